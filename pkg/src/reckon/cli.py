"""Command-line entry point: ``reckon train|eval|gen|validate``.

Exit codes: 0 ok, 1 validation failure, 2 config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .aev import AevParseError
from .config import load_config
from .harness import HarnessIOError, cmd_eval, cmd_gen, cmd_train
from .task import ConfigError

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="config file (key = value with [sections])")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dt", type=int, metavar="US", help="timestep in microseconds; AEV input is re-binned")
    p.add_argument("--decision-window", type=float, metavar="FRAC",
                   help="leading fraction of the recall window used for decisions")
    p.add_argument("--threads", type=int, help="evaluation worker threads")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reckon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train from a random init and write metrics + checkpoint")
    _common(p)
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    p = sub.add_parser("eval", help="forward-only evaluation of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-trials", type=int, help="held-out trials (overrides eval_trials)")
    p = sub.add_parser("gen", help="write navigation trials as AEV files with a manifest")
    _common(p)
    p.add_argument("--n-trials", type=int, required=True)
    p = sub.add_parser("validate", help="run the oracle and invariant checks")
    p.add_argument("--only", action="append", help="run only this check (repeatable)")
    p.add_argument("--report", help="also write the JSON report to this path")
    return parser


def _resolve(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    flag_map = {"seed": "seed", "out": "out", "dt": "dt_us", "decision_window": "decision_window",
                "threads": "threads"}
    for attr, key in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = val
    if args.command == "eval" and args.n_trials is not None:
        overrides["eval_trials"] = args.n_trials
    return load_config(args.config, overrides=overrides)


def _print(obj):
    print(json.dumps(obj, sort_keys=True, indent=2))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            from .validate import CHECKS, run_all

            unknown = set(args.only or ()) - set(CHECKS)
            if unknown:
                raise ConfigError(f"unknown checks: {sorted(unknown)}")
            report = run_all(args.only)
            _print(report)
            if args.report:
                with open(args.report, "w", encoding="utf-8") as fh:
                    json.dump(report, fh, sort_keys=True, indent=2)
            return EXIT_OK if report["passed"] else EXIT_VALIDATION
        cfg = _resolve(args)
        if args.command == "train":
            log = None if args.quiet else (lambda m: print(m, file=sys.stderr, flush=True))
            _print(cmd_train(cfg, log=log))
        elif args.command == "eval":
            _print(cmd_eval(cfg, args.checkpoint, args.out))
        elif args.command == "gen":
            if args.n_trials < 0:
                raise ConfigError("--n-trials must be non-negative")
            m = cmd_gen(cfg, args.n_trials, cfg.out)
            _print({"n_trials": m["n_trials"], "label_counts": m["label_counts"]})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HarnessIOError, AevParseError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
