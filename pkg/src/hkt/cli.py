"""Command-line front end: ``hkt run`` executes one mode, ``hkt report`` compares finished runs."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import KEYS, ExperimentConfig, parse_config
from .errors import ConfigError, HKTError
from .experiment import run
from .report import build_report

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

_BOOL_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig) if f.type == "bool"}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hkt", description="Stage-wise parent-to-child feature transfer experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one mode (train-parent, train-solo, train-hkt, train-kd, eval, "
                                       "grad-check, compare)")
    p_run.add_argument("--config", help="flat key = value config file")
    for key in KEYS:
        flag = "--" + key.replace("_", "-")
        if key in _BOOL_KEYS:
            p_run.add_argument(flag, dest=key, nargs="?", const="true", default=None, metavar="BOOL")
        else:
            p_run.add_argument(flag, dest=key, default=None, metavar=key.upper())

    p_rep = sub.add_parser("report", help="compare completed run directories")
    p_rep.add_argument("run_dirs", nargs="+", help="run or compare output directories")
    p_rep.add_argument("--out", help="write report.md, report.csv and figures here")
    p_rep.add_argument("--no-figures", action="store_true")
    p_rep.add_argument("--repeats", type=int, default=5, help="timed inference repeats (median is reported)")
    return parser


def _print_report(report) -> None:
    print("--- report ---")
    print(report.markdown(), end="")
    for name, path in sorted(report.files.items()):
        print(f"{name}: {path}")
    print("--- end report ---")


def cmd_run(args) -> int:
    overrides = {k: getattr(args, k) for k in KEYS if getattr(args, k) is not None}
    cfg = parse_config(args.config, overrides)
    result = run(cfg)
    out = Path(cfg.out)
    print(f"mode = {cfg.mode}")
    print(f"out = {out}")
    if cfg.mode == "compare":
        report = build_report([out], out / "report", figures=cfg.figures)
        _print_report(report)
        return EXIT_OK
    for key in ("param_count", "best_val_acc_native", "final_val_acc_native", "final_val_acc_fused",
                "val_acc_native", "max_rel_error"):
        if result.get(key) not in (None, ""):
            print(f"{key} = {result[key]}")
    if cfg.mode == "grad-check" and result["passed"] != "true":
        return EXIT_FAILED
    return EXIT_OK


def cmd_report(args) -> int:
    report = build_report(args.run_dirs, args.out, figures=not args.no_figures, repeats=args.repeats)
    _print_report(report)
    return EXIT_OK if report.runs else EXIT_FAILED


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_report(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HKTError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
