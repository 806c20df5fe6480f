#!/usr/bin/env python3
"""Check privacy-ledger sidecars against the budgets recorded next to them.

Usage: check_ledger.py PATH [PATH ...]

Each PATH is a run directory (holding ledger.jsonl and summary.json) or any
directory above run directories. Spends are re-summed from the JSON lines
alone; the package is not imported. Exit status 0 iff every ledger conforms.
"""

import json
import math
import sys
from pathlib import Path

SLACK = 1e-9
PHASES = ("train", "selection")
FIELDS = {"mechanism", "eps", "delta", "phase", "step"}


def check_run(run_dir: Path) -> list[str]:
    summary = json.loads((run_dir / "summary.json").read_text())
    budget = summary["ledger"]
    problems = []
    eps = {p: [] for p in PHASES}
    deltas = []
    for lineno, line in enumerate((run_dir / "ledger.jsonl").read_text().splitlines(), 1):
        rec = json.loads(line)
        if set(rec) != FIELDS:
            problems.append(f"line {lineno}: fields {sorted(rec)}")
            continue
        if rec["phase"] not in PHASES:
            problems.append(f"line {lineno}: unknown phase {rec['phase']!r}")
            continue
        if not (rec["eps"] >= 0 and rec["delta"] >= 0):
            problems.append(f"line {lineno}: negative spend")
        eps[rec["phase"]].append(rec["eps"])
        deltas.append(rec["delta"])
    eps_train, eps_sel = math.fsum(eps["train"]), math.fsum(eps["selection"])
    total, delta_spent = eps_train + eps_sel, math.fsum(deltas)
    caps = {"train": budget["eps_train_cap"], "selection": budget["eps_selection_cap"]}
    if eps_train > caps["train"] + SLACK:
        problems.append(f"train eps {eps_train!r} > cap {caps['train']!r}")
    if eps_sel > caps["selection"] + SLACK:
        problems.append(f"selection eps {eps_sel!r} > cap {caps['selection']!r}")
    if total > budget["epsilon_total"] + SLACK:
        problems.append(f"total eps {total!r} > {budget['epsilon_total']!r}")
    if delta_spent > budget["delta"] * (1 + SLACK):
        problems.append(f"delta {delta_spent!r} > {budget['delta']!r}")
    return problems


def find_runs(path: Path) -> list[Path]:
    if (path / "ledger.jsonl").exists():
        return [path]
    return sorted(p.parent for p in path.rglob("ledger.jsonl"))


def main(argv) -> int:
    if not argv:
        print(__doc__.strip(), file=sys.stderr)
        return 2
    runs = [r for arg in argv for r in find_runs(Path(arg))]
    if not runs:
        print("no ledger.jsonl files found", file=sys.stderr)
        return 1
    bad = 0
    for run in runs:
        problems = check_run(run)
        bad += bool(problems)
        print(f"{'OK  ' if not problems else 'FAIL'} {run}" + "".join(f"\n     {p}" for p in problems))
    print(f"{len(runs) - bad}/{len(runs)} ledgers conform")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
