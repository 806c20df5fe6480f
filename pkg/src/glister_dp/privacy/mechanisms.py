"""Gaussian noise on clipped gradients and the exponential mechanism."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from ..errors import DomainError


def clip_rows(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale each row by ``min(1, C / |row|)``."""
    norms = np.linalg.norm(grads, axis=1)
    scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    return grads * scale[:, None]


def noisy_mean(clipped_sum: np.ndarray, clip_norm: float, sigma: float, rng: np.random.Generator,
               expected_batch_size: float) -> np.ndarray:
    """Add N(0, (sigma*C)^2) per coordinate to a clipped sum, divide by the nominal lot size."""
    noise = rng.normal(0.0, sigma * clip_norm, size=clipped_sum.shape) if sigma > 0 else 0.0
    return (clipped_sum + noise) / expected_batch_size


def clip_and_noise(per_sample, clip_norm: float, sigma: float, rng: np.random.Generator,
                   expected_batch_size: float | None = None) -> np.ndarray:
    """Clip each per-example row, sum, add Gaussian noise and average.

    ``per_sample`` is a :class:`~glister_dp.model.PerSampleGrads` or a bare
    matrix. The divisor is ``expected_batch_size`` (the expected Poisson lot
    size), falling back to the realized row count.
    """
    if clip_norm <= 0:
        raise DomainError("clip norm must be positive")
    if sigma < 0:
        raise DomainError("sigma must be nonnegative")
    grads = getattr(per_sample, "grads", per_sample)
    grads = np.asarray(grads, dtype=np.float64)
    if expected_batch_size is None:
        expected_batch_size = max(grads.shape[0], 1)
    clipped_sum = clip_rows(grads, clip_norm).sum(axis=0)
    return noisy_mean(clipped_sum, clip_norm, sigma, rng, expected_batch_size)


def _scores(utilities, eps0: float, sensitivity: float) -> np.ndarray:
    u = np.asarray(utilities, dtype=np.float64).reshape(-1)
    if u.size == 0:
        raise DomainError("utilities are empty")
    if not np.all(np.isfinite(u)):
        raise DomainError("utilities must be finite")
    if eps0 <= 0 or sensitivity <= 0:
        raise DomainError("eps0 and sensitivity must be positive")
    return eps0 * u / (2.0 * sensitivity)


def sampling_distribution(utilities, eps0: float, sensitivity: float) -> np.ndarray:
    """``softmax(eps0 * u / (2 * sensitivity))``."""
    s = _scores(utilities, eps0, sensitivity)
    if np.isinf(eps0):
        p = (s == s.max()).astype(float)
        return p / p.sum()
    return np.exp(s - logsumexp(s))


def exp_mechanism_sample(utilities, eps0: float, sensitivity: float, rng: np.random.Generator,
                         size: int | None = None):
    """Exponential-mechanism draw via Gumbel-max.

    ``eps0 = inf`` returns the plain argmax (lowest index on ties). With ``size``
    set, returns that many independent draws as an array.
    """
    s = _scores(utilities, eps0, sensitivity)
    if np.isinf(eps0):
        best = int(np.argmax(np.asarray(utilities, dtype=np.float64)))
        return best if size is None else np.full(size, best, dtype=np.int64)
    if size is None:
        return int(np.argmax(s + rng.gumbel(size=s.shape)))
    return np.argmax(s + rng.gumbel(size=(size, s.size)), axis=1)


def exp_mechanism_sample_direct(utilities, eps0: float, sensitivity: float, rng: np.random.Generator,
                                size: int | None = None):
    """Inverse-CDF draw from :func:`sampling_distribution`; a cross-check for the Gumbel path."""
    p = sampling_distribution(utilities, eps0, sensitivity)
    u = rng.random() if size is None else rng.random(size)
    idx = np.minimum(np.searchsorted(np.cumsum(p), u, side="right"), p.size - 1)
    return int(idx) if size is None else idx
