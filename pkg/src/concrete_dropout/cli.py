"""Command-line entry point: ``concrete-dropout --task synth --seeds 0 1 2 ...``."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConcreteDropoutError
from .experiments import DATA_ENV, TASKS, ExperimentSpec, run

EXIT_CHECK_FAILED = 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="concrete-dropout",
        description="Train Concrete-dropout MLPs and write CSV result tables plus a manifest.",
        epilog=f"Exit status is 0 on success, 1 if a gradient check fails, otherwise the error class code. "
        f"MNIST IDX files are looked up in --data, then ${DATA_ENV}, then ./data/mnist.",
    )
    p.add_argument("--task", choices=TASKS, help="experiment to run")
    p.add_argument("--manifest", help="rerun the experiment recorded in this manifest.json")
    p.add_argument("--seed", "--seeds", dest="seeds", type=int, nargs="+", help="one or more seeds")
    p.add_argument("--n-grid", type=int, nargs="+", help="training-set sizes")
    p.add_argument("--widths", type=int, nargs="+", help="hidden widths (one model per width)")
    p.add_argument("--depth", type=int, help="number of hidden layers")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="cap on optimiser steps; overrides --epochs")
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--lengthscale", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument(
        "--precision-mode", choices=("homoscedastic_mapem", "heteroscedastic_head", "fixed"),
        help="how the Gaussian observation precision is handled",
    )
    p.add_argument("--p-init", type=float, help="fixed initial drop probability for every layer")
    p.add_argument("--test-size", type=int)
    p.add_argument("--splits", type=int, help="random 90/10 splits for regress")
    p.add_argument("--target", help="target column name or index for regress (default: last)")
    p.add_argument("--data", help="CSV file (regress) or IDX directory (mnist)")
    p.add_argument("--plots", action="store_true", help="also write SVG trend plots")
    p.add_argument("--out-dir", help="output directory (default: results)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    overrides = {
        k: v
        for k, v in vars(args).items()
        if v is not None and k not in ("task", "manifest", "verbose", "plots")
    }
    if args.manifest:
        spec = ExperimentSpec.from_manifest(args.manifest)
        for k, v in overrides.items():
            setattr(spec, k, v)
        return spec
    if args.task is None:
        raise SystemExit("error: one of --task or --manifest is required")
    return ExperimentSpec(task=args.task, plots=args.plots, **overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        result = run(spec_from_args(args))
    except ConcreteDropoutError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    if "passed" in result and not result["passed"]:
        print(f"gradient check failed: max relative error {result['max_rel_error']:.3e}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return 0


if __name__ == "__main__":
    sys.exit(main())
