import pytest

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def record_criterion():
    def record(number, passed, text):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {text}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
