"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from ..errors import CalibrationError, DomainError

DEFAULT_ORDERS = tuple(float(a) for a in range(2, 65)) + (80.0, 96.0, 128.0, 192.0, 256.0)
NOISE_FLOOR = 0.5


@dataclass(frozen=True, eq=False)
class RdpCurve:
    orders: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        orders = np.asarray(self.orders, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if orders.shape != values.shape:
            raise DomainError("orders and values differ in length")
        if np.any(orders <= 1):
            raise DomainError("RDP orders must exceed 1")
        if np.any(values < 0):
            raise DomainError("RDP values must be nonnegative")
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "values", values)

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if not np.array_equal(self.orders, other.orders):
            raise DomainError("cannot compose curves over different orders")
        return RdpCurve(self.orders, self.values + other.values)

    def __mul__(self, steps: int) -> "RdpCurve":
        return RdpCurve(self.orders, self.values * steps)

    __rmul__ = __mul__


def _log_a_integer(q: float, sigma: float, alpha: int) -> float:
    # log E_{mu0}[(mu/mu0)^alpha] for mu = (1-q) N(0, s^2) + q N(1, s^2), mu0 = N(0, s^2)
    k = np.arange(alpha + 1, dtype=np.float64)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    log_terms = log_binom + k * math.log(q) + (alpha - k) * math.log1p(-q) + (k * k - k) / (2 * sigma**2)
    return float(logsumexp(log_terms))


def rdp_subsampled_gaussian(q: float, sigma: float, steps: int, orders=DEFAULT_ORDERS) -> RdpCurve:
    """RDP of ``steps`` compositions of the sampled Gaussian mechanism.

    ``q = 1`` uses the closed form ``alpha / (2 sigma^2)`` at any order; ``q < 1``
    uses the exact binomial expansion, which needs integer orders.
    """
    if not 0 < q <= 1:
        raise DomainError(f"sampling rate must be in (0, 1], got {q}")
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    orders = np.asarray(orders, dtype=np.float64)
    if q == 1.0:
        per_step = orders / (2 * sigma**2)
    else:
        if np.any(orders != np.round(orders)):
            raise DomainError("subsampled RDP is computed at integer orders only")
        per_step = np.array([_log_a_integer(q, sigma, int(a)) / (a - 1) for a in orders])
    return RdpCurve(orders, np.maximum(per_step, 0.0) * steps)


def rdp_to_eps(curve: RdpCurve, delta: float, return_order: bool = False):
    """``min_alpha [RDP(alpha) + log(1/delta) / (alpha - 1)]``."""
    if curve.orders.size == 0:
        raise DomainError("empty RDP curve")
    if not 0 < delta < 1:
        raise DomainError("delta must be in (0, 1)")
    eps = curve.values + math.log(1 / delta) / (curve.orders - 1)
    i = int(np.argmin(eps))
    return (float(eps[i]), float(curve.orders[i])) if return_order else float(eps[i])


def epsilon_for(sigma: float, q: float, steps: int, delta: float, orders=DEFAULT_ORDERS) -> float:
    return rdp_to_eps(rdp_subsampled_gaussian(q, sigma, steps, orders), delta)


def calibrate_sigma(target_eps: float, delta: float, q: float, steps: int, orders=DEFAULT_ORDERS,
                    lo: float = NOISE_FLOOR, hi: float = 1000.0, rtol: float = 1e-3) -> float:
    """Smallest-ish sigma whose epsilon lands in ``[(1 - rtol) * target, target]``.

    Geometric bisection over ``[lo, hi]``; epsilon must decrease in sigma.
    """
    if target_eps <= 0:
        raise DomainError("target epsilon must be positive")
    eps_lo = epsilon_for(lo, q, steps, delta, orders)
    eps_hi = epsilon_for(hi, q, steps, delta, orders)
    if eps_lo < eps_hi:
        raise CalibrationError("epsilon is not decreasing in sigma", (lo, hi))
    if eps_hi > target_eps:
        raise CalibrationError(f"even sigma={hi} gives eps={eps_hi:.4g} > {target_eps}", (lo, hi))
    if eps_lo < (1 - rtol) * target_eps:
        raise CalibrationError(f"sigma={lo} already gives eps={eps_lo:.4g} < {target_eps}", (lo, hi))
    a, b = lo, hi
    for _ in range(200):
        mid = math.sqrt(a * b)
        eps = epsilon_for(mid, q, steps, delta, orders)
        if eps > target_eps:
            a = mid
        elif eps < (1 - rtol) * target_eps:
            b = mid
        else:
            if mid < NOISE_FLOOR:
                warnings.warn(f"calibrated sigma {mid:.3g} is below the noise floor {NOISE_FLOOR}")
            return mid
    # fall back to the conservative end of the final bracket
    return b
