"""Command-line entry point: ``glister-dp <verb> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .config import DatasetSection, _strict, load_config
from .data import ROLES, export_csv, save_binary
from .errors import ConfigurationError
from .experiment import OUTPUT_ENV, emit_convergence_data, emit_fig2_data, run_allocation_sweep, run_experiment


@dataclass
class GenDataSpec:
    dataset: dict = field(default_factory=dict)
    output_dir: str = "data"
    csv: bool = False


def generate_data(spec_path, output_dir=None) -> list[Path]:
    """Materialize a dataset spec as ``<role>.bin`` caches (and CSVs when asked)."""
    with open(spec_path) as fh:
        raw = yaml.safe_load(fh) or {}
    spec = _strict(GenDataSpec, raw, "gen-data spec")
    section = _strict(DatasetSection, spec.dataset, "dataset")
    section.validate()
    bundle = section.load()
    out = Path(output_dir or spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for role in ROLES:
        ds = getattr(bundle, role)
        save_binary(ds, out / f"{role}.bin")
        written.append(out / f"{role}.bin")
        if spec.csv:
            export_csv(ds, out / f"{role}.csv")
            written.append(out / f"{role}.csv")
    return written


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glister-dp", description="Private data-subset selection experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="verb", required=True)

    for verb, helptext in (("run", "strategy x k x eps x seed grid"),
                           ("sweep-alloc", "GLISTER-DP over the r_grid allocation ratios")):
        s = sub.add_parser(verb, help=helptext)
        s.add_argument("config")
        s.add_argument("--output", help=f"experiment directory (overrides ${OUTPUT_ENV} and output_dir)")
        s.add_argument("--seed-offset", type=int, default=0, help="shift every seed in the grid")
        s.add_argument("--workers", type=int, default=None, help="worker processes (default: CPU count)")

    s = sub.add_parser("fig2", help="true vs exponential-mechanism selection distributions")
    s.add_argument("run_dir")
    s.add_argument("--output")

    s = sub.add_parser("convergence", help="long-format accuracy vs wall clock")
    s.add_argument("run_dir", help="a run directory or an experiment directory")
    s.add_argument("--output")

    s = sub.add_parser("gen-data", help="write a dataset spec to binary caches")
    s.add_argument("spec")
    s.add_argument("--output")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "run":
            return run_experiment(load_config(args.config), args.output, args.seed_offset, args.workers)
        if args.verb == "sweep-alloc":
            return run_allocation_sweep(load_config(args.config), args.output, args.seed_offset, args.workers)
        if args.verb == "fig2":
            for path in emit_fig2_data(args.run_dir, args.output):
                print(path)
            return 0
        if args.verb == "convergence":
            print(emit_convergence_data(args.run_dir, args.output))
            return 0
        for path in generate_data(args.spec, args.output):
            print(path)
        return 0
    except (ConfigurationError, FileNotFoundError, ValueError) as exc:
        print(f"glister-dp {args.verb}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
