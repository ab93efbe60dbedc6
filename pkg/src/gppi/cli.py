"""``gppi <subcommand> --config <path> [--seed N] [--strict] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import sys

from . import runner
from .config import ConfigError, default_config, parse_config

SUBCOMMANDS = ("collect", "train-gp", "run-gppi", "run-igppi", "run-baseline", "validate", "report")


def build_parser():
    p = argparse.ArgumentParser(prog="gppi", description="GP path-integral control experiments")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="INI experiment file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, action="append",
                   help="seed to run (repeatable); defaults to the config's seeds")
    p.add_argument("--strict", action="store_true", help="treat a PI-assumption violation as an error")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--checks", nargs="*", help="validate: subset of oracle checks to run")
    return p


def load(args):
    if args.config:
        cfg = parse_config(args.config, strict=True if args.strict else None)
    else:
        cfg = default_config()
    for w in cfg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.subcommand == "validate":
            ok, results = runner.validate(args.out, args.checks)
            for r in results:
                print(r.line())
            return 0 if ok else 1
        if args.subcommand == "report":
            cfg = load(args) if args.config else None
            out = args.out or (cfg.experiment.out if cfg else "runs")
            print(json.dumps(runner.report(out), indent=1))
            return 0
        cfg = load(args)
        out = args.out or cfg.experiment.out
        seeds = args.seed or list(cfg.experiment.seeds)
        stage = {
            "collect": runner.collect,
            "train-gp": runner.train,
            "run-gppi": runner.run_gppi,
            "run-igppi": runner.run_igppi,
            "run-baseline": runner.run_baseline,
        }[args.subcommand]
        status = 0
        for seed in seeds:
            res = stage(cfg, seed, out)
            if isinstance(res, runner.RunReport):
                line = (f"{res.method} seed {seed}: cost {res.final_cost:.4g} terminal {res.terminal_cost:.4g} "
                        f"samples {res.samples} success {res.success} ({res.seconds:.1f} s)")
                if res.error:
                    line += f" error: {res.error}"
                    status = 1
                print(line)
            else:
                print(f"seed {seed}: wrote {res}")
        return status
    except ConfigError as e:
        print(e, file=sys.stderr)
        return 2
    except runner.MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
