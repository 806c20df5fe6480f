"""Greedy subset selection on validation-gradient alignment, private and not.

The gain of a candidate ``e`` is the first-order drop in validation loss from
one gradient step on ``e``::

    gain(e) = eta * <grad l_e(theta_hat), grad L_V(theta_hat)>

restricted to the final linear layer. After an element is picked, the working
parameters take that step (``theta_hat -= eta * grad l_e``), so later gains
account for what was already chosen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import DomainError
from .model import ModelState, last_layer_inputs, softmax_residual
from .privacy import SELECTION, PrivacyLedger, exp_mechanism_sample, per_step_epsilon, sampling_distribution

DEFAULT_BETA = 0.01
DEFAULT_GAMMA = 1.0
SCALE_PERCENTILE = 95.0


@dataclass
class SelectionOutcome:
    indices: np.ndarray
    step_gains: np.ndarray
    step_distributions: list | None = None
    eps_spent: float = 0.0
    pool_size: int = 0

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.step_gains = np.asarray(self.step_gains, dtype=np.float64)

    def rows(self):
        """``(step, index, gain)`` triples for CSV export."""
        return [(i, int(e), float(g)) for i, (e, g) in enumerate(zip(self.indices, self.step_gains))]


class GainContext:
    """Working last-layer parameters plus cached activations for gain evaluation.

    Only the final layer moves during selection, so the hidden activations of
    train and validation rows are computed once.
    """

    def __init__(self, state: ModelState, train_ds: LabeledDataset, val_ds: LabeledDataset, eta: float):
        self.state = state
        self.eta = float(eta)
        w, b = state.unpack()[-2:]
        self.w = np.array(w, dtype=np.float64)
        self.b = np.array(b, dtype=np.float64)
        self.train_ds = train_ds
        self._h_train = None if state.arch == "logistic" else last_layer_inputs(state, train_ds.features)
        self._h_val = last_layer_inputs(state, val_ds.features)
        self._y_val = val_ds.labels
        self.refresh()

    def train_inputs(self, rows) -> np.ndarray:
        if self._h_train is None:
            return np.asarray(self.train_ds.features[rows], dtype=np.float64)
        return self._h_train[rows]

    def refresh(self) -> None:
        """Recompute the mean validation gradient at the current working parameters."""
        _, dz = softmax_residual(self._h_val @ self.w + self.b, self._y_val)
        n = dz.shape[0]
        self.val_grad_w = self._h_val.T @ dz / n
        self.val_grad_b = dz.sum(axis=0) / n

    @property
    def val_grad(self) -> np.ndarray:
        return np.concatenate([self.val_grad_w.ravel(), self.val_grad_b])

    @property
    def theta_hat(self) -> np.ndarray:
        theta = self.state.theta.copy()
        theta[self.state.last_layer_slice] = np.concatenate([self.w.ravel(), self.b])
        return theta

    def candidate_residuals(self, rows) -> tuple[np.ndarray, np.ndarray]:
        h = self.train_inputs(rows)
        _, dz = softmax_residual(h @ self.w + self.b, self.train_ds.labels[rows])
        return h, dz

    def gains(self, rows) -> np.ndarray:
        h, dz = self.candidate_residuals(rows)
        # <outer(h, dz), Gw> + <dz, Gb> without forming the outer products
        return self.eta * (np.einsum("ni,nj,ij->n", h, dz, self.val_grad_w) + dz @ self.val_grad_b)

    def commit(self, e: int) -> None:
        h, dz = self.candidate_residuals(np.array([e]))
        self.w -= self.eta * np.outer(h[0], dz[0])
        self.b -= self.eta * dz[0]
        self.refresh()


def compute_gains(ctx: GainContext, candidates) -> np.ndarray:
    """Raw first-order gains for ``candidates`` (see module docstring)."""
    cand = np.asarray(candidates, dtype=np.int64)
    if cand.size == 0:
        raise DomainError("candidate set is empty")
    return ctx.gains(cand)


def normalize_gains(raw, gamma: float = DEFAULT_GAMMA, scale: float | str = "percentile") -> np.ndarray:
    """Map raw gains into ``[0, gamma]``.

    ``"percentile"``: shift by the pool minimum, divide by the pool's 95th
    percentile of the shifted values, clip. This scale depends on the pool and
    is not charged to the ledger. A numeric ``scale`` is the strict mode:
    ``clip(raw / scale, 0, gamma)`` with nothing estimated from data.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if scale == "percentile":
        shifted = raw - raw.min()
        s = np.percentile(shifted, SCALE_PERCENTILE)
        if s <= 0:
            s = shifted.max()
        if s <= 0:
            return np.zeros_like(raw)
        return np.clip(shifted / s, 0.0, gamma)
    if isinstance(scale, str) or scale <= 0:
        raise DomainError(f"bad gain scale {scale!r}")
    return np.clip(raw / float(scale), 0.0, gamma)


def pool_size(n: int, k: int, beta: float) -> int:
    """``min(n, ceil((n / k) * ln(1 / beta)))``; ``beta = 0`` means the full ground set."""
    if beta <= 0:
        return n
    return min(n, math.ceil((n / k) * math.log(1 / beta)))


class _Remaining:
    """Unselected indices with O(1) removal (swap with the tail)."""

    def __init__(self, n: int):
        self.items = np.arange(n, dtype=np.int64)
        self.pos = np.arange(n, dtype=np.int64)
        self.size = n

    def draw(self, s: int, rng: np.random.Generator) -> np.ndarray:
        if s >= self.size:
            pool = self.items[: self.size].copy()
        else:
            pool = self.items[rng.choice(self.size, size=s, replace=False)]
        return np.sort(pool)

    def remove(self, e: int) -> None:
        i, last = self.pos[e], self.items[self.size - 1]
        self.items[i], self.items[self.size - 1] = last, e
        self.pos[last], self.pos[e] = i, self.size - 1
        self.size -= 1


def greedy_maximize(objective, n: int, k: int, rng: np.random.Generator | None = None,
                    beta: float = 0.0, choose=None, retain: bool = False) -> SelectionOutcome:
    """Stochastic greedy over ``range(n)``.

    ``objective.gains(pool)`` returns marginal gains and ``objective.commit(e)``
    records a pick. ``choose(gains, pool, retained) -> position`` defaults
    to argmax, lowest index first on ties. ``beta = 0`` scans every remaining element each step.
    """
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    s = pool_size(n, k, beta)
    remaining = _Remaining(n)
    picked, gains_out, dists = [], [], [] if retain else None
    for _ in range(k):
        pool = remaining.draw(s, rng)
        g = np.asarray(objective.gains(pool), dtype=np.float64)
        j = int(np.argmax(g)) if choose is None else int(choose(g, pool, dists))
        e = int(pool[j])
        picked.append(e)
        gains_out.append(g[j])
        remaining.remove(e)
        objective.commit(e)
    return SelectionOutcome(picked, gains_out, dists, pool_size=s)


def stochastic_greedy(state: ModelState, train_ds: LabeledDataset, val_ds: LabeledDataset, k: int,
                      eta: float, rng: np.random.Generator, beta: float = DEFAULT_BETA) -> SelectionOutcome:
    if k > len(train_ds):
        raise DomainError(f"k={k} exceeds the {len(train_ds)} training examples")
    ctx = GainContext(state, train_ds, val_ds, eta)
    return greedy_maximize(ctx, len(train_ds), k, rng, beta)


def _mechanism_stream(rng: np.random.Generator) -> np.random.Generator:
    # a child stream leaves ``rng``'s own draws (the pools) untouched
    return rng.spawn(1)[0]


def dp_stochastic_greedy(state: ModelState, train_ds: LabeledDataset, val_ds: LabeledDataset, k: int,
                         eta: float, eps_round: float, gamma: float, ledger: PrivacyLedger | None,
                         rng: np.random.Generator, beta: float = DEFAULT_BETA,
                         mech_rng: np.random.Generator | None = None, composition: str = "basic",
                         scale: float | str = "percentile", retain: bool = False,
                         round_id: int | None = None, delta_prime: float = 0.0) -> SelectionOutcome:
    """Stochastic greedy with each argmax replaced by an exponential-mechanism draw.

    Each of the ``k`` draws runs at ``eps0 = per_step_epsilon(eps_round, k)``
    with sensitivity ``gamma`` on gains normalized into ``[0, gamma]``. The
    whole ``eps_round`` (and ``delta_prime``, used only by advanced
    composition) is debited from the selection phase before any draw.
    ``eps_round = inf`` turns every draw into an argmax over the raw gains and
    charges nothing.
    """
    n = len(train_ds)
    if k > n:
        raise DomainError(f"k={k} exceeds the {n} training examples")
    if gamma <= 0:
        raise DomainError("gamma must be positive")
    eps0 = float(per_step_epsilon(eps_round, k, composition, delta_prime))
    if ledger is not None and not math.isinf(eps_round):
        ledger.spend("exponential-mechanism", eps_round, delta_prime if composition == "advanced" else 0.0,
                     phase=SELECTION, step=round_id)
    mech_rng = mech_rng if mech_rng is not None else _mechanism_stream(rng)

    def choose(raw, pool, dists):
        if math.isinf(eps0):
            return int(np.argmax(raw))
        util = normalize_gains(raw, gamma, scale)
        j = exp_mechanism_sample(util, eps0, gamma, mech_rng)
        if dists is not None:
            dists.append({
                "pool": pool.copy(),
                "gains": util,
                "em": sampling_distribution(util, eps0, gamma),
            })
        return j

    ctx = GainContext(state, train_ds, val_ds, eta)
    out = greedy_maximize(ctx, n, k, rng, beta, choose=choose, retain=retain)
    out.eps_spent = 0.0 if math.isinf(eps_round) else float(eps_round)
    return out


def random_subset(n: int, k: int, rng: np.random.Generator) -> SelectionOutcome:
    """Uniform ``k``-subset of ``range(n)``; costs no privacy."""
    if not 1 <= k <= n:
        raise DomainError(f"need 1 <= k <= n, got k={k}, n={n}")
    idx = rng.choice(n, size=k, replace=False)
    return SelectionOutcome(idx, np.zeros(k))


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def gain_distribution_report(gains, eps0: float, gamma: float = DEFAULT_GAMMA) -> dict:
    """Compare gain-proportional sampling with what the exponential mechanism samples."""
    g = np.clip(np.asarray(gains, dtype=np.float64), 0.0, gamma)
    if g.size == 0:
        raise DomainError("gains are empty")
    uniform = np.full(g.size, 1.0 / g.size)
    true = g / g.sum() if g.sum() > 0 else uniform
    em = sampling_distribution(g, eps0, gamma)
    return {
        "true_normalized": true,
        "em_distribution": em,
        "tv_to_uniform": total_variation(em, uniform),
        "tv_true_to_uniform": total_variation(true, uniform),
        "tv_between": total_variation(true, em),
    }


@dataclass
class CoverageFunction:
    """``f(S) = |union of sets[i] for i in S|``: monotone submodular."""

    sets: list
    covered: set = field(default_factory=set)

    def value(self, chosen) -> int:
        out = set()
        for i in chosen:
            out |= self.sets[i]
        return len(out)

    def gains(self, pool) -> np.ndarray:
        return np.array([len(self.sets[i] - self.covered) for i in pool], dtype=float)

    def commit(self, e: int) -> None:
        self.covered |= self.sets[e]
