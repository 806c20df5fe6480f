"""Labeled datasets, the synthetic shift generator, imbalance induction and IO.

Datasets are immutable once built. Everything seeded is a pure function of its
inputs and the seed.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError

ROLES = ("train", "val", "test")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_IDX_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    role: str = "train"
    name: str = "dataset"
    # Row ids in the dataset this one was carved from, when that matters.
    source_rows: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        features = np.asarray(self.features)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ConfigurationError(f"features must be 2-D, got shape {features.shape}")
        if features.shape[0] != labels.shape[0]:
            raise ConfigurationError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        if self.role not in ROLES:
            raise ConfigurationError(f"role must be one of {ROLES}, got {self.role!r}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConfigurationError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(features)):
            raise ConfigurationError("features contain NaN or Inf")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, rows, role: str | None = None, name: str | None = None) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.int64)
        src = rows if self.source_rows is None else self.source_rows[rows]
        return LabeledDataset(
            self.features[rows],
            self.labels[rows],
            self.num_classes,
            role=role or self.role,
            name=name or self.name,
            source_rows=src,
        )


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian class blobs with per-split class ratios.

    ``class_ratios`` maps each split role to per-class proportions. ``n_total``
    rows are divided between splits by ``split_fractions``.
    """

    n_total: int = 5000
    n_features: int = 10
    class_ratios: Mapping[str, Sequence[float]] = field(
        default_factory=lambda: {"train": (0.1, 0.9), "val": (0.6, 0.4), "test": (0.9, 0.1)}
    )
    seed: int = 0
    separation: float = 2.0
    split_fractions: Mapping[str, float] = field(
        default_factory=lambda: {"train": 0.6, "val": 0.2, "test": 0.2}
    )

    @property
    def num_classes(self) -> int:
        return len(next(iter(self.class_ratios.values())))

    def validate(self) -> None:
        if self.n_features < 1:
            raise ConfigurationError("n_features must be >= 1")
        if self.n_total < 1:
            raise ConfigurationError("n_total must be >= 1")
        if self.separation < 0:
            raise ConfigurationError("separation must be nonnegative")
        if set(self.class_ratios) != set(ROLES):
            raise ConfigurationError(f"class_ratios needs exactly the splits {ROLES}")
        if set(self.split_fractions) != set(ROLES):
            raise ConfigurationError(f"split_fractions needs exactly the splits {ROLES}")
        widths = {len(r) for r in self.class_ratios.values()}
        if len(widths) != 1 or widths.pop() < 2:
            raise ConfigurationError("every split needs the same number (>= 2) of class ratios")
        if self.num_classes > self.n_features:
            raise ConfigurationError("need n_features >= number of classes")
        for role, ratios in self.class_ratios.items():
            r = np.asarray(ratios, dtype=float)
            if np.any(r < 0) or not np.isclose(r.sum(), 1.0, atol=1e-9):
                raise ConfigurationError(f"class ratios for {role!r} must be >= 0 and sum to 1")
        fr = np.asarray([self.split_fractions[r] for r in ROLES], dtype=float)
        if np.any(fr <= 0) or not np.isclose(fr.sum(), 1.0, atol=1e-9):
            raise ConfigurationError("split_fractions must be positive and sum to 1")


def apportion(total: int, weights: Sequence[float]) -> np.ndarray:
    """Largest-remainder rounding of ``total`` into integer parts."""
    w = np.asarray(weights, dtype=float)
    exact = total * w / w.sum()
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    # ties go to the lower index
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def class_means(num_classes: int, n_features: int, separation: float) -> np.ndarray:
    """Class means on distinct coordinate axes, pairwise distance ``separation``."""
    means = np.zeros((num_classes, n_features))
    means[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
    return means


def generate_synthetic(spec: SyntheticSpec) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    c = spec.num_classes
    means = class_means(c, spec.n_features, spec.separation)

    split_sizes = apportion(spec.n_total, [spec.split_fractions[r] for r in ROLES])
    per_split_counts = [apportion(int(n), spec.class_ratios[r]) for r, n in zip(ROLES, split_sizes)]

    # One master pool, then disjoint row ranges per split.
    labels = np.concatenate(
        [np.repeat(np.arange(c), counts) for counts in per_split_counts]
    )
    features = means[labels] + rng.standard_normal((labels.size, spec.n_features))

    out = []
    start = 0
    for role, n in zip(ROLES, split_sizes):
        rows = start + rng.permutation(int(n))
        start += int(n)
        out.append(
            LabeledDataset(
                features[rows], labels[rows], c, role=role, name=f"synthetic-{role}", source_rows=rows
            )
        )
    return tuple(out)


@dataclass(frozen=True)
class ImbalanceSpec:
    per_class_keep: Mapping[int, float]
    seed: int = 0

    def __post_init__(self):
        for cls, keep in self.per_class_keep.items():
            if not 0.0 < keep <= 1.0:
                raise ConfigurationError(f"keep fraction for class {cls} must be in (0, 1], got {keep}")


def random_keep_fractions(num_classes: int, low: float = 0.8, high: float = 1.0, seed: int = 0) -> dict[int, float]:
    rng = np.random.default_rng(seed)
    return {c: float(f) for c, f in enumerate(rng.uniform(low, high, size=num_classes))}


def induce_imbalance(ds: LabeledDataset, spec: ImbalanceSpec) -> LabeledDataset:
    """Keep ``floor(keep_c * count_c)`` rows of each class, chosen uniformly.

    Classes are processed in ascending order, each with one
    ``rng.choice(..., replace=False)`` draw. Retained rows keep their order.
    """
    if ds.role != "train":
        raise ConfigurationError("imbalance is only induced on the train split")
    counts = ds.class_counts()
    rng = np.random.default_rng(spec.seed)
    keep_mask = np.ones(len(ds), dtype=bool)
    for cls in sorted(spec.per_class_keep):
        if not 0 <= cls < ds.num_classes or counts[cls] == 0:
            raise ConfigurationError(f"class {cls} does not occur in {ds.name!r}")
        members = np.flatnonzero(ds.labels == cls)
        n_keep = int(np.floor(spec.per_class_keep[cls] * members.size))
        kept = rng.choice(members, size=n_keep, replace=False)
        keep_mask[members] = False
        keep_mask[kept] = True
    return ds.subset(np.flatnonzero(keep_mask), name=f"{ds.name}-imbalanced")


# --- IDX digits -------------------------------------------------------------


def _open_maybe_gz(path: Path) -> bytes:
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse one IDX file (optionally gzipped) into an ndarray of uint8."""
    path = Path(path)
    data = _open_maybe_gz(path)
    if len(data) < 4:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC) or (
        expected_magic is not None and magic != expected_magic
    ):
        raise FormatError(f"{path}: bad magic number 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise FormatError(f"{path}: truncated dimension header", offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    n_bytes = int(np.prod(dims))
    if len(data) < header_end + n_bytes:
        raise FormatError(
            f"{path}: expected {n_bytes} payload bytes, file ends early", offset=len(data)
        )
    return np.frombuffer(data, dtype=np.uint8, count=n_bytes, offset=header_end).reshape(dims)


def _find_idx(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / f"{stem}.gz", root / stem.replace("-idx", ".idx")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no {stem}[.gz] under {root}")


def carve_validation(n: int, val_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle ``range(n)`` under ``seed``; the tail ``val_size`` rows become val."""
    if not 0 <= val_size < n:
        raise ConfigurationError(f"val_size must be in [0, {n})")
    perm = np.random.default_rng(seed).permutation(n)
    return perm[: n - val_size], perm[n - val_size:]


def load_idx_digits(path, val_size: int = 5000, seed: int = 0):
    """Load the four standard IDX files under ``path``.

    Returns ``(train, test)`` when ``val_size`` is 0, otherwise
    ``(train, val, test)`` with val carved from the shuffled train split.
    Pixels are scaled to [0, 1] as float32.
    """
    root = Path(path)
    arrays = {}
    for key, stem in _IDX_FILES.items():
        magic = IDX_IMAGES_MAGIC if key.endswith("images") else IDX_LABELS_MAGIC
        arrays[key] = read_idx(_find_idx(root, stem), expected_magic=magic)

    def _images(a):
        return (a.reshape(a.shape[0], -1).astype(np.float32) / np.float32(255.0))

    x_train, y_train = _images(arrays["train_images"]), arrays["train_labels"]
    x_test, y_test = _images(arrays["test_images"]), arrays["test_labels"]
    if x_train.shape[0] != y_train.shape[0] or x_test.shape[0] != y_test.shape[0]:
        raise FormatError("image and label counts disagree", offset=4)
    num_classes = int(max(y_train.max(), y_test.max())) + 1

    test = LabeledDataset(x_test, y_test, num_classes, role="test", name="digits-test")
    full = LabeledDataset(x_train, y_train, num_classes, role="train", name="digits-train")
    if val_size == 0:
        return full, test
    train_rows, val_rows = carve_validation(len(full), val_size, seed)
    return (
        full.subset(train_rows, name="digits-train"),
        full.subset(val_rows, role="val", name="digits-val"),
        test,
    )


# --- binary cache and CSV ---------------------------------------------------

_CACHE_HEADER = struct.Struct("<III")


def save_binary(ds: LabeledDataset, path) -> None:
    """Header ``<n_rows, n_cols, n_classes>`` (u32 LE), f32 features, i32 labels."""
    path = Path(path)
    n, m = ds.features.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(n, m, ds.num_classes))
        fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())


def load_binary(path, role: str = "train", name: str | None = None) -> LabeledDataset:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    n, m, c = _CACHE_HEADER.unpack_from(data)
    need = _CACHE_HEADER.size + 4 * n * m + 4 * n
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(data)}", offset=min(len(data), need))
    feats = np.frombuffer(data, dtype="<f4", count=n * m, offset=_CACHE_HEADER.size).reshape(n, m)
    labels = np.frombuffer(data, dtype="<i4", count=n, offset=_CACHE_HEADER.size + 4 * n * m)
    return LabeledDataset(feats.astype(np.float32), labels.astype(np.int64), c, role=role, name=name or path.stem)


def export_csv(ds: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{j}" for j in range(ds.n_features)])
        for y, row in zip(ds.labels, ds.features):
            writer.writerow([int(y)] + [repr(float(v)) for v in row])
