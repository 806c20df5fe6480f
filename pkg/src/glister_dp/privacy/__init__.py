"""Differential-privacy primitives, the RDP accountant and the budget ledger."""

from .ledger import (
    PHASES,
    SELECTION,
    TRAIN,
    PrivacyBudget,
    PrivacyLedger,
    SpendRecord,
    default_delta,
    per_step_epsilon,
)
from .mechanisms import (
    clip_and_noise,
    clip_rows,
    exp_mechanism_sample,
    exp_mechanism_sample_direct,
    noisy_mean,
    sampling_distribution,
)
from .rdp import (
    DEFAULT_ORDERS,
    NOISE_FLOOR,
    RdpCurve,
    calibrate_sigma,
    epsilon_for,
    rdp_subsampled_gaussian,
    rdp_to_eps,
)

__all__ = [
    "PHASES", "SELECTION", "TRAIN", "PrivacyBudget", "PrivacyLedger", "SpendRecord",
    "default_delta", "per_step_epsilon", "clip_and_noise", "clip_rows", "exp_mechanism_sample",
    "exp_mechanism_sample_direct", "noisy_mean", "sampling_distribution", "DEFAULT_ORDERS",
    "NOISE_FLOOR", "RdpCurve", "calibrate_sigma", "epsilon_for", "rdp_subsampled_gaussian",
    "rdp_to_eps",
]
