"""Command-line interface: ``cartsel {simulate,importance,select,reproduce}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DataError, Framework, Method, gen_breiman, load_csv, split_three, write_csv
from .harness import ReproduceConfig, reproduce_example, write_report
from .importance import (
    TEST_ONE_SE,
    TEST_PERMUTATION,
    VI_PRIMARY,
    VI_SURROGATE,
    PstarConfig,
    importance_tree,
    variable_importance,
)
from .selection import (
    DEFAULT_ALPHA_GRID,
    DEFAULT_BETA_GRID,
    ExhaustiveCapError,
    RunConfig,
    run_procedure,
)


class UsageError(Exception):
    """Invalid flag combination; maps to exit status 2."""


def parse_grid(text: str) -> tuple[float, ...]:
    """``a,b,c`` or a log-spaced range ``min:max:count``."""
    text = text.strip()
    try:
        if ":" in text:
            lo, hi, count = text.split(":")
            lo, hi, k = float(lo), float(hi), int(count)
            if lo <= 0 or hi < lo or k < 1:
                raise ValueError
            values = np.geomspace(lo, hi, k) if k > 1 else np.array([lo])
            return tuple(float(v) for v in values)
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid grid {text!r}") from None
    if not values or any(v < 0 or not np.isfinite(v) for v in values):
        raise argparse.ArgumentTypeError(f"invalid grid {text!r}")
    return tuple(sorted(set(values)))


def parse_fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid split {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("split needs three fractions f1,f2,f3")
    return parts


def parse_seeds(text: str) -> tuple[int, ...]:
    """``1-20`` (inclusive) or ``1,4,9``."""
    try:
        if "-" in text.strip()[1:]:
            lo, hi = text.split("-", 1)
            seeds = tuple(range(int(lo), int(hi) + 1))
        else:
            seeds = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seeds {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return tuple(sorted(set(seeds)))


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="CSV file with a header row")
    p.add_argument("--target", default="y", help="response column (default: %(default)s)")
    p.add_argument("--framework", choices=[f.value for f in Framework], default="regression",
                   help="default: %(default)s")


def _add_run_args(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--method", choices=[m.value for m in Method], default="m1", help="default: %(default)s")
    p.add_argument("--split", type=parse_fractions, default=None,
                   help="f1,f2,f3 (default: 0.5,0.25,0.25 for m1, 0.75,0,0.25 for m2)")
    if seed:
        p.add_argument("--seed", type=int, default=1, help="default: %(default)s")
    p.add_argument("--nmin", type=_positive, default=None,
                   help="minimum rows per child (default: 5 regression, 1 classification)")
    p.add_argument("--vi", choices=[VI_SURROGATE, VI_PRIMARY], default=VI_SURROGATE,
                   help="default: %(default)s")


def _add_select_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["pstar", "exhaustive"], default="pstar", help="default: %(default)s")
    p.add_argument("--alpha-grid", type=parse_grid, default=DEFAULT_ALPHA_GRID,
                   help="comma list or min:max:count (default: %(default)s)")
    p.add_argument("--beta-grid", type=parse_grid, default=DEFAULT_BETA_GRID,
                   help="comma list or min:max:count (default: %(default)s)")
    p.add_argument("--pstar-test", choices=[TEST_ONE_SE, TEST_PERMUTATION], default=TEST_ONE_SE,
                   help="default: %(default)s")
    p.add_argument("--jobs", type=_positive, default=1, help="worker processes (default: %(default)s)")
    p.add_argument("--force-exhaustive", action="store_true",
                   help="allow exhaustive mode above the variable cap (default: off)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cartsel", description="Variable selection with CART.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated benchmark sample to CSV")
    p.add_argument("--n", type=_positive, default=1000, help="default: %(default)s")
    p.add_argument("--p", type=int, default=10, help="number of variables, >= 10 (default: %(default)s)")
    p.add_argument("--seed", type=int, default=1, help="default: %(default)s")
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("importance", help="variable importance ranking")
    _add_data_args(p)
    _add_run_args(p)
    p.add_argument("--out", default="-", help="output path, - for stdout (default: %(default)s)")
    p.add_argument("--format", choices=["json", "md"], default="json", help="default: %(default)s")

    p = sub.add_parser("select", help="run the full selection procedure")
    _add_data_args(p)
    _add_run_args(p)
    _add_select_args(p)
    p.add_argument("--out", default="-", help="output path, - for stdout (default: %(default)s)")
    p.add_argument("--format", choices=["json", "md"], default="json", help="default: %(default)s")

    p = sub.add_parser("reproduce", help="multi-seed simulation study")
    p.add_argument("--n", type=_positive, default=1000, help="default: %(default)s")
    p.add_argument("--seeds", type=parse_seeds, default=tuple(range(1, 21)),
                   help="range 1-20 or list 1,2,3 (default: 1-20)")
    _add_run_args(p, seed=False)
    _add_select_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", default="json,csv,md",
                   help="comma list of json, csv, md (default: %(default)s)")
    return parser


def _run_config(args, seed: int) -> RunConfig:
    method = Method(args.method)
    config = RunConfig(
        method=method,
        fractions=args.split,
        seed=seed,
        mode=getattr(args, "mode", "pstar"),
        alpha_grid=getattr(args, "alpha_grid", DEFAULT_ALPHA_GRID),
        beta_grid=getattr(args, "beta_grid", DEFAULT_BETA_GRID),
        n_min=args.nmin,
        vi=args.vi,
        pstar_test=getattr(args, "pstar_test", TEST_ONE_SE),
        jobs=getattr(args, "jobs", 1),
        force_exhaustive=getattr(args, "force_exhaustive", False),
    )
    f1, f2, f3 = config.resolved_fractions()
    if method is Method.M1 and f2 <= 0:
        raise UsageError("--method m1 needs a positive second split fraction")
    if method is Method.M2 and f2 != 0:
        raise UsageError("--method m2 needs the second split fraction to be 0")
    if min(f1, f2, f3) < 0 or f1 + f2 + f3 > 1 + 1e-12:
        raise UsageError(f"invalid split {args.split}")
    return config


def _emit(text: str, out: str) -> None:
    if out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _json(doc) -> str:
    return json.dumps(doc, indent=2) + "\n"


def cmd_simulate(args) -> None:
    if args.p < 10:
        raise UsageError("--p must be at least 10")
    write_csv(gen_breiman(args.n, args.seed, p=args.p), args.out)


def cmd_importance(args) -> None:
    ds = load_csv(args.input, args.target, args.framework)
    config = _run_config(args, args.seed)
    split = split_three(ds, config.resolved_fractions(), args.seed, config.method)
    pconf = PstarConfig(n_min=config.resolved_nmin(ds.framework), vi=args.vi, seed=args.seed)
    tree, rows = importance_tree(ds, split, pconf)
    report = variable_importance(tree, ds, rows, surrogate=args.vi == VI_SURROGATE)
    if args.format == "md":
        _emit(report.to_markdown(ds.names), args.out)
    else:
        _emit(_json({**report.to_dict(ds.names), "config": config.echo(ds.framework)}), args.out)


def cmd_select(args) -> None:
    ds = load_csv(args.input, args.target, args.framework)
    result = run_procedure(ds, _run_config(args, args.seed))
    if args.format == "md":
        names = ", ".join(ds.names[j] for j in result.subset)
        text = (
            f"Selected variables: {names}\n\n"
            f"alpha = {result.alpha:g}, beta = {result.beta:g}, "
            f"hold-out risk = {result.holdout_risk:.6g}, K = {result.K}\n\n"
            + result.grid_markdown()
        )
        _emit(text, args.out)
    else:
        _emit(_json(result.to_dict()), args.out)


def cmd_reproduce(args) -> None:
    formats = tuple(f.strip() for f in args.format.split(","))
    bad = set(formats) - {"json", "csv", "md"}
    if bad:
        raise UsageError(f"unknown format(s): {', '.join(sorted(bad))}")
    run = replace(_run_config(args, 0), jobs=1)
    # Parallelism is over seeds; each seed then runs serially.
    config = ReproduceConfig(n=args.n, seeds=args.seeds, run=run, jobs=args.jobs)
    write_report(reproduce_example(config), args.out, formats)


COMMANDS = {
    "simulate": cmd_simulate,
    "importance": cmd_importance,
    "select": cmd_select,
    "reproduce": cmd_reproduce,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ExhaustiveCapError) as exc:
        print(f"cartsel {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError, ValueError) as exc:
        print(f"cartsel {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
