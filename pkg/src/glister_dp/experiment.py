"""Experiment orchestration and plot-ready result files.

Output layout under an experiment directory::

    config.yaml                 resolved configuration
    summary.csv                 strategy,eps,k,seed,final_accuracy,total_seconds,status
    aggregate.csv               strategy,eps,k,n_runs,mean_accuracy,std_accuracy,sem_accuracy,mean_seconds
    runs/<run-id>/metrics.csv   epoch,train_loss,val_loss,test_accuracy,wall_clock_s,eps_train,eps_selection
    runs/<run-id>/summary.json  run settings, final accuracy, sigma, ledger snapshot
    runs/<run-id>/ledger.jsonl  one spend record per line
    runs/<run-id>/subset.csv    round,epoch,step,index,gain
    runs/<run-id>/diagnostics.json   only when diagnostics are retained
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import shutil
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_from_dict
from .errors import ConfigurationError
from .trainer import RunRecord, DatasetBundle, run

log = logging.getLogger(__name__)

OUTPUT_ENV = "GLISTER_DP_OUTPUT"

SUMMARY_COLUMNS = ("strategy", "eps", "k", "seed", "final_accuracy", "total_seconds", "status")
AGGREGATE_COLUMNS = ("strategy", "eps", "k", "n_runs", "mean_accuracy", "std_accuracy", "sem_accuracy", "mean_seconds")
SUBSET_COLUMNS = ("round", "epoch", "step", "index", "gain")
FIG2_COLUMNS = ("round", "rank", "true_probability", "em_probability")
CONVERGENCE_COLUMNS = ("strategy", "eps", "k", "seed", "epoch", "wall_clock_s", "test_accuracy")
ALLOC_COLUMNS = ("r", "eps", "k", "seed", "final_accuracy", "eps_train", "eps_selection", "status")
ALLOC_AGG_COLUMNS = ("r", "eps", "k", "n_runs", "mean_accuracy", "std_accuracy", "sem_accuracy")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([row[c] for c in columns] if isinstance(row, dict) else row)
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def resolve_output_dir(config: ExperimentConfig, override=None) -> Path:
    """Explicit override, else ``$GLISTER_DP_OUTPUT/<output_dir>`` when set, else ``output_dir``."""
    if override is not None:
        return Path(override)
    root = os.environ.get(OUTPUT_ENV)
    out = Path(config.output_dir)
    return out if root is None or out.is_absolute() else Path(root) / out


@dataclass(frozen=True)
class Cell:
    strategy: str
    eps: float
    k: float
    seed: int
    r: float | None = None

    @property
    def run_id(self) -> str:
        tag = f"{self.strategy}_eps{self.eps:g}_k{self.k:g}_seed{self.seed}"
        return tag if self.r is None else f"{tag}_r{self.r:g}"


def write_run(run_dir, cell: Cell, record: RunRecord, train_config) -> dict:
    """Write one run's files and return its summary dict."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(run_dir / "metrics.csv", csv_text(RunRecord.COLUMNS, record.rows))
    record.ledger.to_jsonl(run_dir / "ledger.jsonl")
    subset_rows = []
    if record.selection_rounds:
        for rnd in record.selection_rounds:
            out = rnd["outcome"]
            for step, (idx, gain) in enumerate(zip(out.indices, out.step_gains)):
                subset_rows.append((rnd["round"], rnd["epoch"], step, int(idx), float(gain)))
    elif record.final_subset is not None:
        subset_rows = [(0, 0, step, int(i), "") for step, i in enumerate(record.final_subset)]
    atomic_write_text(run_dir / "subset.csv", csv_text(SUBSET_COLUMNS, subset_rows))
    if record.diagnostics:
        atomic_write_text(run_dir / "diagnostics.json", json.dumps(record.diagnostics))
    budget = train_config.budget
    summary = {
        "run_id": cell.run_id,
        "strategy": cell.strategy,
        "eps": cell.eps,
        "k": cell.k,
        "seed": cell.seed,
        "alloc_ratio": budget.alloc_ratio,
        "delta": budget.delta,
        "final_accuracy": record.final_test_accuracy,
        "total_seconds": record.total_seconds,
        "sigma": record.sigma,
        "epochs": train_config.epochs,
        "ledger": record.ledger.snapshot(),
        "status": "ok",
    }
    atomic_write_text(run_dir / "summary.json", json.dumps(summary, indent=2))
    return summary


# worker state, set once per process
_DATA: DatasetBundle | None = None
_CONFIG: ExperimentConfig | None = None


def _init_worker(raw_config: dict) -> None:
    global _DATA, _CONFIG
    _CONFIG = config_from_dict(raw_config)
    _DATA = _CONFIG.dataset.load()


def _execute(cell: Cell, run_dir: str) -> dict:
    """Run one cell inside a worker; failures are returned, not raised."""
    try:
        tc = _CONFIG.train_config(cell.strategy, cell.eps, cell.k, cell.seed, len(_DATA.train), alloc_ratio=cell.r)
        record = run(tc, _DATA)
        out = write_run(run_dir, cell, record, tc)
        out["eps_train"] = record.rows[-1]["eps_train"]
        out["eps_selection"] = record.rows[-1]["eps_selection"]
        return out
    except Exception as exc:  # noqa: BLE001 - recorded per run
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        atomic_write_text(Path(run_dir) / "error.txt", traceback.format_exc())
        return {"run_id": cell.run_id, "strategy": cell.strategy, "eps": cell.eps, "k": cell.k,
                "seed": cell.seed, "final_accuracy": math.nan, "total_seconds": math.nan,
                "status": f"failed: {type(exc).__name__}: {exc}"}


def _map_cells(config: ExperimentConfig, jobs: list[tuple[Cell, str]], workers: int | None) -> list[dict]:
    raw = config.to_dict()
    workers = workers or config.workers or os.cpu_count() or 1
    workers = max(1, min(workers, len(jobs)))
    if workers == 1:
        _init_worker(raw)
        return [_execute(c, d) for c, d in jobs]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(raw,)) as pool:
        futures = [pool.submit(_execute, c, d) for c, d in jobs]
        return [f.result() for f in futures]


def _stats(values) -> tuple[float, float, float]:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=float)
    if v.size == 0:
        return math.nan, math.nan, math.nan
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), std, std / math.sqrt(v.size)


def aggregate(summary_rows: list[dict], keys=("strategy", "eps", "k")) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for row in summary_rows:
        if row["status"] == "ok":
            groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for key, rows in groups.items():
        mean, std, sem = _stats([r["final_accuracy"] for r in rows])
        entry = dict(zip(keys, key))
        entry.update(n_runs=len(rows), mean_accuracy=mean, std_accuracy=std, sem_accuracy=sem,
                     mean_seconds=float(np.mean([r.get("total_seconds", math.nan) for r in rows])))
        out.append(entry)
    return out


def run_experiment(config: ExperimentConfig, output_dir=None, seed_offset: int = 0,
                   workers: int | None = None) -> int:
    """Run the strategy x eps x k x seed grid. Returns 0 iff every run succeeded.

    FULL-DP ignores k, so it runs once per (eps, seed) and its files are copied
    into every k cell.
    """
    out = resolve_output_dir(config, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.yaml", config.to_yaml())
    seeds = [s + seed_offset for s in config.seeds]
    cells = [Cell(s, float(e), float(k), int(seed))
             for s in config.strategies for k in config.k_grid for e in config.eps_grid for seed in seeds]
    jobs, copies = [], []
    for cell in cells:
        run_dir = out / "runs" / cell.run_id
        if cell.strategy == "full-dp" and cell.k != float(config.k_grid[0]):
            source = Cell(cell.strategy, cell.eps, float(config.k_grid[0]), cell.seed)
            copies.append((cell, source))
        else:
            jobs.append((cell, str(run_dir)))
    results = {r["run_id"]: r for r in _map_cells(config, jobs, workers)}
    for cell, source in copies:
        src = results[source.run_id]
        dst_dir = out / "runs" / cell.run_id
        if dst_dir.exists():
            shutil.rmtree(dst_dir)
        shutil.copytree(out / "runs" / source.run_id, dst_dir)
        row = dict(src, run_id=cell.run_id, k=cell.k)
        if (dst_dir / "summary.json").exists():
            atomic_write_text(dst_dir / "summary.json", json.dumps(row, indent=2))
        results[cell.run_id] = row
    summary = [results[c.run_id] for c in cells]
    atomic_write_text(out / "summary.csv", csv_text(SUMMARY_COLUMNS, summary))
    atomic_write_text(out / "aggregate.csv", csv_text(AGGREGATE_COLUMNS, aggregate(summary)))
    failed = [r for r in summary if r["status"] != "ok"]
    for r in failed:
        log.error("run %s %s", r["run_id"], r["status"])
    return 1 if failed else 0


def run_allocation_sweep(config: ExperimentConfig, output_dir=None, seed_offset: int = 0,
                         workers: int | None = None) -> int:
    """GLISTER-DP at each r in ``r_grid`` for every eps, k and seed."""
    bad = [r for r in config.r_grid if not 0 < r < 1]
    if bad:
        raise ConfigurationError(f"r_grid values must lie in (0, 1): {bad}")
    out = resolve_output_dir(config, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.yaml", config.to_yaml())
    seeds = [s + seed_offset for s in config.seeds]
    cells = [Cell("glister-dp", float(e), float(k), int(seed), float(r))
             for r in config.r_grid for k in config.k_grid for e in config.eps_grid for seed in seeds]
    jobs = [(c, str(out / "runs" / c.run_id)) for c in cells]
    results = _map_cells(config, jobs, workers)
    rows = []
    for cell, res in zip(cells, results):
        rows.append({"r": cell.r, "eps": cell.eps, "k": cell.k, "seed": cell.seed,
                     "final_accuracy": res["final_accuracy"], "eps_train": res.get("eps_train", math.nan),
                     "eps_selection": res.get("eps_selection", math.nan), "status": res["status"]})
    atomic_write_text(out / "alloc.csv", csv_text(ALLOC_COLUMNS, rows))
    agg = aggregate(rows, keys=("r", "eps", "k"))
    atomic_write_text(out / "alloc_aggregate.csv", csv_text(ALLOC_AGG_COLUMNS, agg))
    return 1 if any(r["status"] != "ok" for r in rows) else 0


def _run_dirs(path) -> list[Path]:
    """A single run directory, or every run under an experiment directory."""
    path = Path(path)
    if (path / "summary.json").exists():
        return [path]
    runs = path / "runs"
    if not runs.is_dir():
        raise FileNotFoundError(f"{path} is neither a run directory nor an experiment directory")
    return sorted(d for d in runs.iterdir() if (d / "summary.json").exists())


def emit_fig2_data(run_dir, output_dir=None) -> tuple[Path, Path]:
    """True vs exponential-mechanism selection probabilities for each round.

    Rows within a round are ranked by true probability, largest first. Writes
    ``fig2.csv`` and ``fig2_tv.json`` next to the run unless ``output_dir`` is given.
    """
    run_dir = Path(run_dir)
    diag_path = run_dir / "diagnostics.json"
    if not diag_path.exists():
        raise FileNotFoundError(
            f"{diag_path} not found: rerun GLISTER-DP with train.retain_diagnostics: true "
            "to record per-round selection distributions"
        )
    rounds = json.loads(diag_path.read_text())
    rows, tv = [], []
    for d in rounds:
        true_p = np.asarray(d["true_normalized"])
        em_p = np.asarray(d["em_distribution"])
        order = np.argsort(-true_p, kind="stable")
        rows.extend((d["round"], rank, float(true_p[i]), float(em_p[i])) for rank, i in enumerate(order))
        tv.append({key: d[key] for key in ("round", "epoch", "eps0", "tv_to_uniform", "tv_true_to_uniform",
                                           "tv_between", "mean_tv_to_uniform", "mean_tv_true_to_uniform",
                                           "max_tv_to_uniform")} | {"pool_size": int(true_p.size)})
    dest = Path(output_dir) if output_dir else run_dir
    csv_path, json_path = dest / "fig2.csv", dest / "fig2_tv.json"
    atomic_write_text(csv_path, csv_text(FIG2_COLUMNS, rows))
    atomic_write_text(json_path, json.dumps(tv, indent=2))
    return csv_path, json_path


def emit_convergence_data(path, output_dir=None) -> Path:
    """Long-format accuracy vs wall clock for every run under ``path``."""
    path = Path(path)
    rows = []
    for d in _run_dirs(path):
        s = json.loads((d / "summary.json").read_text())
        if s.get("status") != "ok":
            continue
        for m in read_csv(d / "metrics.csv"):
            rows.append({"strategy": s["strategy"], "eps": s["eps"], "k": s["k"], "seed": s["seed"],
                         "epoch": int(m["epoch"]), "wall_clock_s": m["wall_clock_s"],
                         "test_accuracy": m["test_accuracy"]})
    dest = Path(output_dir) if output_dir else path
    out = dest / "convergence.csv"
    atomic_write_text(out, csv_text(CONVERGENCE_COLUMNS, rows))
    return out
