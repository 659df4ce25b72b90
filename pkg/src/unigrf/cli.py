"""Command-line entry point: prepare, train, eval, sweep, report.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

from unigrf.config import OUTPUT_ROOT_ENV, RunConfig
from unigrf.errors import ConfigError, DataError, UniGRFError

logger = logging.getLogger("unigrf")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per RunConfig field; unset flags leave the config file's value alone."""
    parser.add_argument("--config", help="JSON file of RunConfig fields (flags override it)")
    hints = typing.get_type_hints(RunConfig)
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = hints[f.name]
        if kind is bool:
            parser.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.name == "ks":
            parser.add_argument(flag, dest=f.name, type=int, nargs="+", default=None)
        else:
            parser.add_argument(flag, dest=f.name, type=kind, default=None)


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig)
                 if getattr(args, f.name, None) is not None}
    if args.config:
        return RunConfig.load(args.config, overrides)
    return RunConfig.from_dict(overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unigrf", description=__doc__.splitlines()[0],
        epilog=f"Runs without --output-dir go to ${OUTPUT_ROOT_ENV}/run-<config hash> (default root: ./runs).",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse a raw ratings file into a processed store")
    p.add_argument("raw")
    p.add_argument("out")
    p.add_argument("--format", choices=("dat", "csv"), default="dat")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one model")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("store")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--out", help="report path (default: next to the checkpoint)")
    p.add_argument("--ks", type=int, nargs="+", default=[10, 50])
    p.add_argument("--rank-dump", action="store_true")

    p = sub.add_parser("sweep", help="one run per value of m or layers")
    p.add_argument("--axis", choices=("m", "layers"), required=True)
    p.add_argument("--values", type=int, nargs="+", required=True)
    _add_config_flags(p)

    p = sub.add_parser("report", help="summarize a finished run and audit its weighter trace")
    p.add_argument("run_dir")
    return parser


def _cmd_prepare(args) -> int:
    from unigrf.data import prepare_data

    manifest = prepare_data(args.raw, args.format, args.n, args.out, seed=args.seed)
    print(json.dumps(manifest, indent=2))
    return 0


def _cmd_train(args) -> int:
    from unigrf.trainer import run_training

    config = config_from_args(args).validate()
    result = run_training(config)
    summary = {"output_dir": str(result.output_dir), "epochs": len(result.epochs), "best_epoch": result.best_epoch,
               "config_hash": config.hash()}
    if result.test is not None:
        summary["test"] = {"ndcg": result.test.ndcg, "hr": result.test.hr, "mrr": result.test.mrr,
                           "auc": result.test.auc}
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_eval(args) -> int:
    from unigrf.trainer import run_eval

    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint {args.checkpoint} not found")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"{args.split}_report.json")
    cfg = RunConfig(data=str(args.store), ks=args.ks, rank_dump=args.rank_dump)
    report = run_eval(args.checkpoint, args.store, args.split, cfg, output=out)
    print(report.to_json(), end="")
    return 0


def _cmd_sweep(args) -> int:
    from unigrf.trainer import run_sweep

    config = config_from_args(args).validate()
    rows = run_sweep(config, args.axis, args.values)
    print(json.dumps(rows, indent=2, default=str))
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def _cmd_report(args) -> int:
    from unigrf.trainer import build_report

    if not (Path(args.run_dir) / "metrics.csv").exists():
        raise DataError(f"{args.run_dir} has no metrics.csv")
    report = build_report(args.run_dir)
    print(json.dumps(report, indent=2))
    return 0 if not report["weighter_violations"] else 1


COMMANDS = {"prepare": _cmd_prepare, "train": _cmd_train, "eval": _cmd_eval, "sweep": _cmd_sweep,
            "report": _cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UniGRFError as exc:
        print(f"unigrf {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # contract violations surfacing from bad settings are configuration problems
        print(f"unigrf {args.command}: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as exc:
        print(f"unigrf {args.command}: I/O failure: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
