"""Command line entry point: ``relu-ocp run ...``.

Runs a benchmark sweep and writes the results table.  Log verbosity is
taken from the ``RELU_OCP_LOG`` environment variable (``WARNING`` by
default).  The exit code is 0 only if every cell converged.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from .bench import EXAMPLES, emit, run_sweep
from .descent_driver import DescentConfig

LOG_ENV = "RELU_OCP_LOG"


def _float_list(text: str):
    try:
        return [float(eval_fraction(t)) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def eval_fraction(token: str) -> float:
    """Parse ``0.01``, ``1e-3`` or ``1/32``."""
    token = token.strip()
    if "/" in token:
        num, den = token.split("/", 1)
        return float(num) / float(den)
    return float(token)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="relu-ocp", description="Optimal control with ReLU-network PDE constraints.")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a sweep over alpha and mesh size")
    r.add_argument("--example", choices=EXAMPLES, required=True)
    r.add_argument("--alpha", type=_float_list, required=True, help="comma separated, e.g. 1e-1,1e-2")
    r.add_argument("--dx", type=_float_list, required=True, help="comma separated, e.g. 1/16,1/32")
    r.add_argument("--nu", type=float, default=None, help="Armijo parameter (default 0.9 single-max, 0.7 otherwise)")
    r.add_argument("--out", default=None, help="output file (stdout if omitted)")
    r.add_argument("--format", choices=("csv", "md", "json"), default="md")
    r.add_argument("--max-outer", type=int, default=None)
    r.add_argument("--seed", type=int, default=0)
    return ap


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    nu = args.nu if args.nu is not None else (0.9 if args.example == "single-max" else 0.7)
    cfg = replace(DescentConfig(), nu=nu, seed=args.seed)
    if args.max_outer is not None:
        cfg = replace(cfg, max_outer=args.max_outer)
    result = run_sweep(args.example, args.alpha, args.dx, cfg)
    text = emit(result, args.format, args.out)
    if args.out is None:
        sys.stdout.write(text)
    return 0 if result.all_converged else 1


if __name__ == "__main__":
    sys.exit(main())
