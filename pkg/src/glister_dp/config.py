"""Experiment configuration files (YAML). Unknown keys are errors."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import (
    ROLES,
    ImbalanceSpec,
    SyntheticSpec,
    generate_synthetic,
    induce_imbalance,
    load_binary,
    load_idx_digits,
    random_keep_fractions,
)
from .errors import ConfigurationError
from .privacy import PrivacyBudget, default_delta
from .trainer import STRATEGIES, DatasetBundle, Seeds, TrainConfig

DATASET_KINDS = ("synthetic", "idx-digits", "cached-binary")


def _strict(cls, raw: dict | None, where: str):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return cls(**raw)


@dataclass
class ImbalanceSection:
    low: float = 0.8
    high: float = 1.0
    seed: int = 0


@dataclass
class DatasetSection:
    kind: str = "synthetic"
    # synthetic
    n_total: int = 5000
    n_features: int = 10
    class_ratios: dict = field(default_factory=lambda: {"train": [0.1, 0.9], "val": [0.6, 0.4], "test": [0.9, 0.1]})
    split_fractions: dict = field(default_factory=lambda: {"train": 0.6, "val": 0.2, "test": 0.2})
    separation: float = 2.0
    seed: int = 0
    # idx-digits
    path: str | None = None
    val_size: int = 5000
    # cached-binary
    train: str | None = None
    val: str | None = None
    test: str | None = None
    imbalance: dict | None = None

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigurationError(f"dataset.kind must be one of {DATASET_KINDS}")
        if self.kind == "idx-digits":
            if not self.path or not Path(self.path).is_dir():
                raise ConfigurationError(f"dataset.path {self.path!r} is not a directory")
        if self.kind == "cached-binary":
            for role in ROLES:
                p = getattr(self, role)
                if not p or not Path(p).is_file():
                    raise ConfigurationError(f"dataset.{role} {p!r} does not exist")
        if self.imbalance is not None:
            _strict(ImbalanceSection, self.imbalance, "dataset.imbalance")

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_total=self.n_total,
            n_features=self.n_features,
            class_ratios={k: tuple(v) for k, v in self.class_ratios.items()},
            seed=self.seed,
            separation=self.separation,
            split_fractions=dict(self.split_fractions),
        )

    def load(self) -> DatasetBundle:
        if self.kind == "synthetic":
            train, val, test = generate_synthetic(self.synthetic_spec())
        elif self.kind == "idx-digits":
            train, val, test = load_idx_digits(self.path, val_size=self.val_size, seed=self.seed)
        else:
            train, val, test = (load_binary(getattr(self, r), role=r) for r in ROLES)
        if self.imbalance is not None:
            imb = _strict(ImbalanceSection, self.imbalance, "dataset.imbalance")
            keep = random_keep_fractions(train.num_classes, imb.low, imb.high, imb.seed)
            train = induce_imbalance(train, ImbalanceSpec(keep, seed=imb.seed))
        return DatasetBundle(train, val, test)


@dataclass
class TrainSection:
    arch: str = "logistic"
    hidden: int = 0
    eta: float = 0.1
    selection_eta: float | None = None
    epochs: int = 30
    lot_size: int = 256
    selection_interval: int = 5
    clip_norm: float = 1.0
    delta: float | None = None
    alloc_ratio: float = 0.9
    selection_delta: float = 0.0
    beta: float = 0.01
    gamma: float = 1.0
    gain_scale: float | str = "percentile"
    composition: str = "basic"
    noise_multiplier: float | None = None
    retain_diagnostics: bool = False


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    k_grid: list = field(default_factory=lambda: [0.1])
    eps_grid: list = field(default_factory=lambda: [3.0])
    seeds: list = field(default_factory=lambda: [0])
    r_grid: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    output_dir: str = "results"
    workers: int | None = None

    def validate(self) -> None:
        self.dataset.validate()
        for name in ("strategies", "k_grid", "eps_grid", "seeds", "r_grid"):
            if not getattr(self, name):
                raise ConfigurationError(f"{name} must be nonempty")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigurationError(f"unknown strategies {bad}; expected {STRATEGIES}")

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def train_config(self, strategy: str, eps: float, k: float, seed: int, n_train: int,
                     alloc_ratio: float | None = None) -> TrainConfig:
        t = self.train
        delta = t.delta if t.delta is not None else default_delta(n_train)
        r = t.alloc_ratio if alloc_ratio is None else alloc_ratio
        return TrainConfig(
            eta=t.eta,
            epochs=t.epochs,
            lot_size=t.lot_size,
            selection_interval=t.selection_interval,
            subset_fraction=float(k),
            clip_norm=t.clip_norm,
            budget=PrivacyBudget(float(eps), delta, r if strategy == "glister-dp" else 1.0,
                                 t.selection_delta if strategy == "glister-dp" else 0.0),
            strategy=strategy,
            seeds=seeds_for(seed),
            arch=t.arch,
            hidden=t.hidden,
            selection_eta=t.selection_eta,
            beta=t.beta,
            gamma=t.gamma,
            gain_scale=t.gain_scale,
            composition=t.composition,
            noise_multiplier=t.noise_multiplier,
            retain_diagnostics=t.retain_diagnostics,
        )


def seeds_for(seed: int) -> Seeds:
    """Four disjoint streams per experiment seed."""
    return Seeds(model=seed, sampling=10_000 + seed, noise=20_000 + seed, selection=30_000 + seed)


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    ds = _strict(DatasetSection, raw.pop("dataset", None), "dataset")
    tr = _strict(TrainSection, raw.pop("train", None), "train")
    cfg = _strict(ExperimentConfig, raw, "top level")
    cfg.dataset, cfg.train = ds, tr
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)
