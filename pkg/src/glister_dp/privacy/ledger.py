"""Budget split between training and subset selection, enforced by basic composition.

Amounts are held as exact rationals (``fractions.Fraction`` of the float
inputs), so phase subtotals add up to the total with no rounding slack.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from scipy.optimize import brentq

from ..errors import BudgetExceededError, ConfigurationError, DomainError

TRAIN = "train"
SELECTION = "selection"
PHASES = (TRAIN, SELECTION)


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(float(x))


@dataclass(frozen=True)
class PrivacyBudget:
    """Total ``(epsilon, delta)`` and the share ``alloc_ratio`` given to training.

    Delta goes to training except ``selection_delta``, which is only needed by
    advanced composition of the exponential-mechanism steps.
    """

    epsilon_total: float
    delta: float
    alloc_ratio: float = 1.0
    selection_delta: float = 0.0

    def __post_init__(self):
        if not self.epsilon_total > 0:
            raise ConfigurationError("epsilon_total must be positive")
        if not 0 < self.delta < 1:
            raise ConfigurationError("delta must be in (0, 1)")
        if not 0 <= self.alloc_ratio <= 1:
            raise ConfigurationError("alloc_ratio must be in [0, 1]")
        if not 0 <= self.selection_delta < self.delta:
            raise ConfigurationError("selection_delta must be in [0, delta)")

    @property
    def eps_train_exact(self) -> Fraction:
        # the float product, as a caller writing eps * r would compute it
        return _frac(self.epsilon_total * self.alloc_ratio)

    @property
    def eps_selection_exact(self) -> Fraction:
        return _frac(self.epsilon_total) - self.eps_train_exact

    @property
    def eps_train(self) -> float:
        return float(self.eps_train_exact)

    @property
    def eps_selection(self) -> float:
        return float(self.eps_selection_exact)

    def phase_caps(self) -> dict[str, tuple[Fraction, Fraction]]:
        sel_delta = _frac(self.selection_delta)
        return {
            TRAIN: (self.eps_train_exact, _frac(self.delta) - sel_delta),
            SELECTION: (self.eps_selection_exact, sel_delta),
        }


def default_delta(n_train: int) -> float:
    """The conventional ``1 / |D_train|``."""
    return 1.0 / n_train


@dataclass(frozen=True)
class SpendRecord:
    mechanism: str
    eps: Fraction
    delta: Fraction
    phase: str
    step: int | None

    def as_json(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "eps": float(self.eps),
            "delta": float(self.delta),
            "phase": self.phase,
            "step": self.step,
        }


class PrivacyLedger:
    """Append-only spend log. ``spend`` is the single writer and holds a lock."""

    def __init__(self, budget: PrivacyBudget):
        self.budget = budget
        self._records: list[SpendRecord] = []
        self._lock = threading.Lock()

    @property
    def records(self) -> tuple[SpendRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def spent(self, phase: str | None = None) -> tuple[Fraction, Fraction]:
        recs = [r for r in self.records if phase is None or r.phase == phase]
        return sum((r.eps for r in recs), Fraction(0)), sum((r.delta for r in recs), Fraction(0))

    def remaining(self, phase: str | None = None) -> tuple[Fraction, Fraction]:
        if phase is None:
            cap = (_frac(self.budget.epsilon_total), _frac(self.budget.delta))
        else:
            cap = self.budget.phase_caps()[phase]
        eps, delta = self.spent(phase)
        return cap[0] - eps, cap[1] - delta

    def spend(self, mechanism: str, eps, delta=0.0, phase: str = TRAIN, step: int | None = None) -> "PrivacyLedger":
        """Debit ``(eps, delta)`` against ``phase``; refuse if any cap would be exceeded."""
        if phase not in PHASES:
            raise DomainError(f"unknown phase {phase!r}")
        eps_f, delta_f = _frac(eps), _frac(delta)
        if eps_f < 0 or delta_f < 0:
            raise DomainError("spends must be nonnegative")
        with self._lock:
            caps = self.budget.phase_caps()[phase]
            phase_eps = sum((r.eps for r in self._records if r.phase == phase), Fraction(0))
            phase_delta = sum((r.delta for r in self._records if r.phase == phase), Fraction(0))
            tot_eps = sum((r.eps for r in self._records), Fraction(0))
            tot_delta = sum((r.delta for r in self._records), Fraction(0))
            over_phase = phase_eps + eps_f > caps[0] or phase_delta + delta_f > caps[1]
            over_total = (tot_eps + eps_f > _frac(self.budget.epsilon_total)
                          or tot_delta + delta_f > _frac(self.budget.delta))
            if over_phase or over_total:
                raise BudgetExceededError(
                    f"{mechanism}: spend eps={float(eps_f):.6g} delta={float(delta_f):.3g} "
                    f"exceeds the {phase} budget",
                    (float(caps[0] - phase_eps), float(caps[1] - phase_delta)),
                )
            self._records.append(SpendRecord(mechanism, eps_f, delta_f, phase, step))
        return self

    def snapshot(self) -> dict:
        eps_t, delta_t = self.spent(TRAIN)
        eps_s, delta_s = self.spent(SELECTION)
        return {
            "epsilon_total": self.budget.epsilon_total,
            "delta": self.budget.delta,
            "alloc_ratio": self.budget.alloc_ratio,
            "eps_train_cap": self.budget.eps_train,
            "eps_selection_cap": self.budget.eps_selection,
            "eps_train_spent": float(eps_t),
            "eps_selection_spent": float(eps_s),
            "delta_spent": float(delta_t + delta_s),
            "n_records": len(self.records),
        }

    def to_jsonl(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.as_json()) + "\n")
        tmp.replace(path)


def per_step_epsilon(eps_round: float, k: int, composition: str = "basic", delta_prime: float = 0.0) -> float:
    """Per-draw epsilon so that ``k`` exponential-mechanism draws total ``eps_round``.

    ``basic`` splits evenly. ``advanced`` inverts the advanced composition bound
    ``sqrt(2k ln(1/delta')) e + k e (exp(e) - 1) = eps_round`` (needs delta' > 0).
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    eps_round = float(eps_round)
    if math.isinf(eps_round):
        return math.inf
    if composition == "basic":
        return eps_round / k
    if composition != "advanced":
        raise ConfigurationError(f"unknown composition {composition!r}")
    if not 0 < delta_prime < 1:
        raise ConfigurationError("advanced composition needs 0 < delta' < 1")

    def total(e):
        return math.sqrt(2 * k * math.log(1 / delta_prime)) * e + k * e * math.expm1(e) - eps_round

    adv = brentq(total, 0.0, eps_round, xtol=1e-15)
    # advanced composition only helps for large k; never return less than basic
    return max(adv, eps_round / k)
