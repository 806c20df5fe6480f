"""DP-SGD training loops for GLISTER-DP and the RANDOM-DP / FULL-DP baselines."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from .data import LabeledDataset
from .errors import ConfigurationError
from .model import ModelState, clipped_gradient_sum, forward_loss, init_model
from .privacy import (
    SELECTION,
    TRAIN,
    PrivacyBudget,
    PrivacyLedger,
    calibrate_sigma,
    noisy_mean,
    rdp_subsampled_gaussian,
    rdp_to_eps,
)
from .selection import (
    DEFAULT_BETA,
    DEFAULT_GAMMA,
    dp_stochastic_greedy,
    gain_distribution_report,
    random_subset,
)

log = logging.getLogger(__name__)

STRATEGIES = ("glister-dp", "random-dp", "full-dp")


@dataclass(frozen=True)
class Seeds:
    model: int = 0
    sampling: int = 1
    noise: int = 2
    selection: int = 3

    def offset(self, by: int) -> "Seeds":
        return Seeds(self.model + by, self.sampling + by, self.noise + by, self.selection + by)


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.1
    epochs: int = 30
    lot_size: int = 256
    selection_interval: int = 5
    subset_fraction: float = 0.1
    clip_norm: float = 1.0
    budget: PrivacyBudget = field(default_factory=lambda: PrivacyBudget(3.0, 1e-5, 0.9))
    strategy: str = "glister-dp"
    seeds: Seeds = field(default_factory=Seeds)
    arch: str = "logistic"
    hidden: int = 0
    selection_eta: float | None = None
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA
    gain_scale: float | str = "percentile"
    composition: str = "basic"
    min_phase_eps: float = 1e-6
    noise_multiplier: float | None = None
    retain_diagnostics: bool = False
    workers: int = 1

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}")
        if self.selection_interval < 1:
            raise ConfigurationError("selection_interval must be >= 1")
        if self.epochs < 1 or self.lot_size < 1:
            raise ConfigurationError("epochs and lot_size must be >= 1")
        if not 0 < self.subset_fraction <= 1:
            raise ConfigurationError("subset_fraction must be in (0, 1]")
        if self.eta <= 0 or self.clip_norm <= 0:
            raise ConfigurationError("eta and clip_norm must be positive")

    def subset_size(self, n: int) -> int:
        return n if self.strategy == "full-dp" else max(1, int(round(self.subset_fraction * n)))


@dataclass
class RunRecord:
    strategy: str
    rows: list = field(default_factory=list)
    final_test_accuracy: float = float("nan")
    total_seconds: float = 0.0
    final_subset: np.ndarray | None = None
    sigma: float = 0.0
    ledger: PrivacyLedger | None = None
    selection_rounds: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    model: ModelState | None = None

    COLUMNS = ("epoch", "train_loss", "val_loss", "test_accuracy", "wall_clock_s", "eps_train", "eps_selection")

    def metrics(self, with_time: bool = True) -> list[tuple]:
        cols = self.COLUMNS if with_time else tuple(c for c in self.COLUMNS if c != "wall_clock_s")
        return [tuple(r[c] for c in cols) for r in self.rows]


@dataclass(frozen=True)
class DatasetBundle:
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


class TrainingAccountant:
    """Running RDP account of the training phase; charges the ledger incrementally.

    Each charge is ``eps(steps so far) - eps(steps at the last charge)`` as an
    exact rational, so the charges telescope to the epsilon of the whole run.
    """

    def __init__(self, q: float, sigma: float, delta: float):
        self.q, self.sigma, self.delta = q, sigma, delta
        self.steps = 0
        self._charged = Fraction(0)
        self._delta_charged = False

    def epsilon(self, steps: int | None = None) -> float:
        steps = self.steps if steps is None else steps
        if steps == 0:
            return 0.0
        if self.sigma == 0:
            return math.inf
        return rdp_to_eps(rdp_subsampled_gaussian(self.q, self.sigma, steps), self.delta)

    def advance(self, n_steps: int = 1) -> None:
        self.steps += n_steps

    def charge(self, ledger: PrivacyLedger | None, epoch: int) -> None:
        if ledger is None or self.steps == 0:
            return
        now = Fraction(self.epsilon())
        delta = 0.0 if self._delta_charged else self.delta
        ledger.spend("dp-sgd", now - self._charged, delta, phase=TRAIN, step=epoch)
        self._charged = now
        self._delta_charged = True


def lots_per_epoch(subset_size: int, lot_size: int) -> int:
    return math.ceil(subset_size / lot_size)


def sampling_rate(subset_size: int, lot_size: int) -> float:
    return min(1.0, lot_size / subset_size)


def dp_sgd_epoch(state: ModelState, ds: LabeledDataset, subset, config: TrainConfig, sigma: float,
                 rng_sampling: np.random.Generator, rng_noise: np.random.Generator,
                 accountant: TrainingAccountant | None = None) -> tuple[ModelState, int]:
    """One pass of Poisson-sampled DP-SGD over ``subset``.

    Runs ``ceil(|S| / B)`` lots; each includes every subset row independently
    with probability ``q = B / |S|``. Returns the new state and the number of
    lots taken.
    """
    subset = np.asarray(subset, dtype=np.int64)
    q = sampling_rate(subset.size, config.lot_size)
    expected = q * subset.size
    theta = state.theta.copy()
    n_lots = lots_per_epoch(subset.size, config.lot_size)
    for _ in range(n_lots):
        lot = subset[rng_sampling.random(subset.size) < q]
        current = state.with_theta(theta)
        if lot.size:
            clipped_sum, _ = clipped_gradient_sum(current, ds, lot, config.clip_norm)
        else:
            clipped_sum = np.zeros_like(theta)
        theta = theta - config.eta * noisy_mean(clipped_sum, config.clip_norm, sigma, rng_noise, expected)
        if accountant is not None:
            accountant.advance()
    return state.with_theta(theta), n_lots


def _evaluate(state: ModelState, data: DatasetBundle) -> tuple[float, float, float]:
    train_loss, _ = forward_loss(state, data.train)
    val_loss, _ = forward_loss(state, data.val)
    _, test_acc = forward_loss(state, data.test)
    return train_loss, val_loss, test_acc


def _train_sigma(config: TrainConfig, eps_train: float, delta: float, subset_size: int) -> float:
    if config.noise_multiplier is not None:
        return float(config.noise_multiplier)
    steps = config.epochs * lots_per_epoch(subset_size, config.lot_size)
    return calibrate_sigma(eps_train, delta, sampling_rate(subset_size, config.lot_size), steps)


def _initial_model(config: TrainConfig, data: DatasetBundle) -> ModelState:
    return init_model(config.arch, data.train.n_features, data.train.num_classes,
                      seed=config.seeds.model, hidden=config.hidden)


def _round_diagnostics(outcome, eps0: float, gamma: float, round_id: int, epoch: int) -> dict:
    reports = [gain_distribution_report(d["gains"], eps0, gamma) for d in outcome.step_distributions]
    first = reports[0]
    return {
        "round": round_id,
        "epoch": epoch,
        "eps0": eps0,
        "pool": [int(i) for i in outcome.step_distributions[0]["pool"]],
        "true_normalized": first["true_normalized"].tolist(),
        "em_distribution": first["em_distribution"].tolist(),
        "tv_to_uniform": first["tv_to_uniform"],
        "tv_true_to_uniform": first["tv_true_to_uniform"],
        "tv_between": first["tv_between"],
        "mean_tv_to_uniform": float(np.mean([r["tv_to_uniform"] for r in reports])),
        "mean_tv_true_to_uniform": float(np.mean([r["tv_true_to_uniform"] for r in reports])),
        "max_tv_to_uniform": float(np.max([r["tv_to_uniform"] for r in reports])),
    }


def _train_loop(config: TrainConfig, data: DatasetBundle, ledger: PrivacyLedger, subset_size: int,
                sigma: float, select) -> RunRecord:
    """Shared epoch loop. ``select(epoch, state) -> indices or None`` (None keeps the subset)."""
    rng_sampling = np.random.default_rng(config.seeds.sampling)
    rng_noise = np.random.default_rng(config.seeds.noise)
    q = sampling_rate(subset_size, config.lot_size)
    accountant = TrainingAccountant(q, sigma, ledger.budget.delta - ledger.budget.selection_delta)
    state = _initial_model(config, data)
    record = RunRecord(config.strategy, sigma=sigma, ledger=ledger)
    subset = None
    elapsed = 0.0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        chosen = select(epoch, state)
        if chosen is not None:
            subset = np.asarray(chosen, dtype=np.int64)
        state, _ = dp_sgd_epoch(state, data.train, subset, config, sigma, rng_sampling, rng_noise, accountant)
        accountant.charge(ledger, epoch)
        elapsed += time.perf_counter() - t0
        train_loss, val_loss, test_acc = _evaluate(state, data)
        record.rows.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "test_accuracy": test_acc,
            "wall_clock_s": elapsed,
            "eps_train": float(ledger.spent(TRAIN)[0]),
            "eps_selection": float(ledger.spent(SELECTION)[0]),
        })
        log.debug("%s epoch %d: val_loss=%.4f test_acc=%.4f", config.strategy, epoch, val_loss, test_acc)
    record.final_test_accuracy = record.rows[-1]["test_accuracy"]
    record.total_seconds = elapsed
    record.final_subset = subset
    record.model = state
    return record


def run_glister_dp(config: TrainConfig, data: DatasetBundle) -> RunRecord:
    """GLISTER-DP: private greedy reselection every ``selection_interval`` epochs.

    Training gets ``r * eps`` and a noise multiplier calibrated once for all
    ``T * ceil(k / B)`` lots. Selection gets ``(1 - r) * eps``, split evenly over
    the ``ceil(T / L)`` rounds.
    """
    config.validate()
    if config.strategy != "glister-dp":
        raise ConfigurationError("run_glister_dp needs strategy 'glister-dp'")
    budget = config.budget
    if budget.eps_train < config.min_phase_eps or budget.eps_selection < config.min_phase_eps:
        raise ConfigurationError(
            f"budget split r={budget.alloc_ratio} leaves a phase below {config.min_phase_eps}: "
            f"eps_train={budget.eps_train:.3g}, eps_selection={budget.eps_selection:.3g}"
        )
    n = len(data.train)
    k = config.subset_size(n)
    if k < config.lot_size:
        raise ConfigurationError(f"subset size {k} is smaller than the lot size {config.lot_size}")
    ledger = PrivacyLedger(budget)
    sigma = _train_sigma(config, budget.eps_train, budget.delta - budget.selection_delta, k)
    n_rounds = math.ceil(config.epochs / config.selection_interval)
    eps_round = budget.eps_selection_exact / n_rounds
    delta_round = budget.selection_delta / n_rounds
    rng_selection = np.random.default_rng(config.seeds.selection)
    sel_eta = config.selection_eta if config.selection_eta is not None else config.eta
    rounds: list[dict] = []
    diagnostics: list[dict] = []

    def select(epoch, state):
        if epoch % config.selection_interval:
            return None
        rid = len(rounds)
        out = dp_stochastic_greedy(
            state, data.train, data.val, k, sel_eta, eps_round, config.gamma, ledger, rng_selection,
            beta=config.beta, composition=config.composition, scale=config.gain_scale,
            retain=config.retain_diagnostics, round_id=rid, delta_prime=delta_round,
        )
        rounds.append({"round": rid, "epoch": epoch, "outcome": out})
        if config.retain_diagnostics:
            eps0 = float(eps_round) / k if config.composition == "basic" else float("nan")
            diagnostics.append(_round_diagnostics(out, eps0, config.gamma, rid, epoch))
        return out.indices

    record = _train_loop(config, data, ledger, k, sigma, select)
    record.selection_rounds = rounds
    record.diagnostics = diagnostics
    return record


def run_baseline(config: TrainConfig, data: DatasetBundle) -> RunRecord:
    """RANDOM-DP (one uniform subset, whole budget to training) or FULL-DP (S = D)."""
    config.validate()
    if config.strategy not in ("random-dp", "full-dp"):
        raise ConfigurationError("run_baseline needs strategy 'random-dp' or 'full-dp'")
    budget = replace(config.budget, alloc_ratio=1.0, selection_delta=0.0)
    ledger = PrivacyLedger(budget)
    n = len(data.train)
    k = config.subset_size(n)
    if k < config.lot_size and config.strategy == "random-dp":
        raise ConfigurationError(f"subset size {k} is smaller than the lot size {config.lot_size}")
    sigma = _train_sigma(config, budget.eps_train, budget.delta, k)
    if config.strategy == "full-dp":
        fixed = np.arange(n)
    else:
        fixed = random_subset(n, k, np.random.default_rng(config.seeds.selection)).indices

    def select(epoch, state):
        return fixed if epoch == 0 else None

    return _train_loop(config, data, ledger, k, sigma, select)


def run(config: TrainConfig, data: DatasetBundle) -> RunRecord:
    if config.strategy == "glister-dp":
        return run_glister_dp(config, data)
    return run_baseline(config, data)


def allocation_sweep(base_config: TrainConfig, r_values, data: DatasetBundle, seed_offsets=(0,)) -> list[dict]:
    """Run GLISTER-DP at each allocation ratio ``r`` (and each seed offset)."""
    rows = []
    for r in r_values:
        if not 0 < r < 1:
            raise ConfigurationError(f"allocation ratio must be in (0, 1), got {r}")
        for off in seed_offsets:
            cfg = replace(base_config, strategy="glister-dp",
                          budget=replace(base_config.budget, alloc_ratio=float(r)),
                          seeds=base_config.seeds.offset(off))
            rec = run_glister_dp(cfg, data)
            rows.append({"r": float(r), "seed_offset": off, "test_accuracy": rec.final_test_accuracy,
                         "eps_train": rec.rows[-1]["eps_train"], "eps_selection": rec.rows[-1]["eps_selection"]})
    return rows


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
