"""Command-line entry point.

Subcommands: ``run`` a configured experiment, ``ablate`` it against the four
single-removal variants, train the offline ``oracle`` bound, and ``report``
curve files for finished run directories. Exit code 0 on success, 1 on
configuration errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .errors import ConfigurationError


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("config", nargs="?", default=None,
                        help="config file (omit for all defaults)")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--seed", default=None,
                        help="override the seed list, e.g. 0,1,2")
    parser.add_argument("--overwrite", action="store_true",
                        help="replace existing run directories")
    parser.add_argument("--paper-scale", action="store_true",
                        help="use the full-length training schedule defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distillmatch",
                                     description="semi-supervised continual-learning lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "ablate", "oracle"):
        _add_config_arguments(sub.add_parser(name))
    report = sub.add_parser("report")
    report.add_argument("dirs", nargs="+", help="completed run directories")
    return parser


def _load_config(args) -> harness.ExperimentConfig:
    config = harness.parse_config(args.config, paper_scale=args.paper_scale)
    overrides = {}
    if args.out is not None:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seeds"] = tuple(int(s) for s in str(args.seed).split(","))
    if overrides:
        from dataclasses import replace
        config = replace(config, **overrides)
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            dirs = harness.run_experiment(_load_config(args), overwrite=args.overwrite)
            for d in dirs:
                print(d)
        elif args.command == "ablate":
            table = harness.ablate(_load_config(args), overwrite=args.overwrite)
            for row in table["row_order"]:
                cells = table["rows"][row]
                rendered = "  ".join(
                    f"{m}={_fmt(cells[m]['mean'])}+/-{_fmt(cells[m]['std'])}"
                    for m in table["metric_order"]
                )
                print(f"{row:13s} {rendered}")
        elif args.command == "oracle":
            dirs = harness.run_oracle(_load_config(args), overwrite=args.overwrite)
            for d in dirs:
                print(d)
        elif args.command == "report":
            for path in harness.report(args.dirs):
                print(path)
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


if __name__ == "__main__":
    raise SystemExit(main())
