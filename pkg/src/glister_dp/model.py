"""Small classifiers with closed-form per-example gradients.

Two architectures: multinomial logistic regression and a one-hidden-layer ReLU
MLP. Parameters live in one flat float64 vector laid out as
``[W1 (m x h), b1 (h), W2 (h x c), b2 (c)]`` for the MLP and
``[W (m x c), b (c)]`` for logistic regression, weights row-major with
fan-in first. The final linear layer is always the tail of the vector.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .data import LabeledDataset
from .errors import ConfigurationError, DomainError, FormatError

ARCHS = ("logistic", "mlp")
DEFAULT_CHUNK = 1024


@dataclass(frozen=True, eq=False)
class ModelState:
    theta: np.ndarray
    arch: str
    n_inputs: int
    n_classes: int
    hidden: int = 0

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (param_count(self.arch, self.n_inputs, self.n_classes, self.hidden),):
            raise ConfigurationError(
                f"theta has shape {theta.shape}, architecture needs "
                f"{param_count(self.arch, self.n_inputs, self.n_classes, self.hidden)}"
            )
        if not np.all(np.isfinite(theta)):
            raise ConfigurationError("theta contains NaN or Inf")
        object.__setattr__(self, "theta", theta)

    @property
    def p(self) -> int:
        return self.theta.shape[0]

    @property
    def descriptor(self) -> str:
        if self.arch == "logistic":
            return f"logistic:{self.n_inputs}:{self.n_classes}"
        return f"mlp:{self.n_inputs}:{self.hidden}:{self.n_classes}"

    @property
    def last_layer_size(self) -> int:
        fan_in = self.n_inputs if self.arch == "logistic" else self.hidden
        return fan_in * self.n_classes + self.n_classes

    @property
    def last_layer_slice(self) -> slice:
        return slice(self.p - self.last_layer_size, self.p)

    def with_theta(self, theta) -> "ModelState":
        return ModelState(theta, self.arch, self.n_inputs, self.n_classes, self.hidden)

    def unpack(self):
        """Views of the weight blocks, in layer order."""
        m, c, h, t = self.n_inputs, self.n_classes, self.hidden, self.theta
        if self.arch == "logistic":
            return t[: m * c].reshape(m, c), t[m * c:]
        o = 0
        w1 = t[o: o + m * h].reshape(m, h); o += m * h
        b1 = t[o: o + h]; o += h
        w2 = t[o: o + h * c].reshape(h, c); o += h * c
        b2 = t[o: o + c]
        return w1, b1, w2, b2


def param_count(arch: str, n_inputs: int, n_classes: int, hidden: int = 0) -> int:
    if arch == "logistic":
        return n_inputs * n_classes + n_classes
    if arch == "mlp":
        if hidden < 1:
            raise ConfigurationError("mlp needs hidden >= 1")
        return n_inputs * hidden + hidden + hidden * n_classes + n_classes
    raise ConfigurationError(f"unknown architecture {arch!r}; expected one of {ARCHS}")


def init_model(arch: str, n_inputs: int, n_classes: int, seed: int = 0, hidden: int = 0) -> ModelState:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    if n_inputs < 1 or n_classes < 2:
        raise ConfigurationError("need n_inputs >= 1 and n_classes >= 2")
    rng = np.random.default_rng(seed)
    p = param_count(arch, n_inputs, n_classes, hidden)
    theta = np.zeros(p)
    if arch == "logistic":
        bound = 1.0 / np.sqrt(n_inputs)
        theta[: n_inputs * n_classes] = rng.uniform(-bound, bound, n_inputs * n_classes)
    else:
        m, h, c = n_inputs, hidden, n_classes
        theta[: m * h] = rng.uniform(-1 / np.sqrt(m), 1 / np.sqrt(m), m * h)
        o = m * h + h
        theta[o: o + h * c] = rng.uniform(-1 / np.sqrt(h), 1 / np.sqrt(h), h * c)
    return ModelState(theta, arch, n_inputs, n_classes, hidden if arch == "mlp" else 0)


# --- forward ------------------------------------------------------------------


def _check_indices(ds: LabeledDataset, indices) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise DomainError("index set is empty")
    if idx.min() < 0 or idx.max() >= len(ds):
        raise DomainError(f"indices out of bounds for dataset of size {len(ds)}")
    return idx


def last_layer_inputs(state: ModelState, x: np.ndarray) -> np.ndarray:
    """Activations feeding the final linear layer (``x`` itself for logistic)."""
    x = np.asarray(x, dtype=np.float64)
    if state.arch == "logistic":
        return x
    w1, b1, _, _ = state.unpack()
    return np.maximum(x @ w1 + b1, 0.0)


def logits(state: ModelState, x: np.ndarray) -> np.ndarray:
    w, b = state.unpack()[-2:]
    return last_layer_inputs(state, x) @ w + b


def softmax_residual(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and its gradient w.r.t. the logits (softmax - onehot)."""
    lse = logsumexp(z, axis=1)
    losses = lse - z[np.arange(z.shape[0]), y]
    resid = np.exp(z - lse[:, None])
    resid[np.arange(z.shape[0]), y] -= 1.0
    return losses, resid


def forward_loss(state: ModelState, ds: LabeledDataset, indices=None, chunk_size: int = 8192) -> tuple[float, float]:
    """Mean cross-entropy and argmax accuracy over ``indices`` (all rows if None)."""
    idx = np.arange(len(ds)) if indices is None else _check_indices(ds, indices)
    if idx.size == 0:
        raise DomainError("index set is empty")
    total_loss = 0.0
    correct = 0
    for start in range(0, idx.size, chunk_size):
        rows = idx[start: start + chunk_size]
        z = logits(state, ds.features[rows])
        y = ds.labels[rows]
        lse = logsumexp(z, axis=1)
        total_loss += float(np.sum(lse - z[np.arange(rows.size), y]))
        correct += int(np.sum(np.argmax(z, axis=1) == y))
    return total_loss / idx.size, correct / idx.size


# --- gradients ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PerSampleGrads:
    grads: np.ndarray
    losses: np.ndarray


def _grad_chunk(state: ModelState, x: np.ndarray, y: np.ndarray, last_only: bool) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[0]
    x = np.asarray(x, dtype=np.float64)
    if state.arch == "logistic":
        w, b = state.unpack()
        losses, dz = softmax_residual(x @ w + b, y)
        gw = np.einsum("ni,nj->nij", x, dz).reshape(n, -1)
        return np.concatenate([gw, dz], axis=1), losses

    w1, b1, w2, b2 = state.unpack()
    pre = x @ w1 + b1
    h = np.maximum(pre, 0.0)
    losses, dz = softmax_residual(h @ w2 + b2, y)
    gw2 = np.einsum("ni,nj->nij", h, dz).reshape(n, -1)
    if last_only:
        return np.concatenate([gw2, dz], axis=1), losses
    # ReLU subgradient at 0 is 0.
    da = (dz @ w2.T) * (pre > 0.0)
    gw1 = np.einsum("ni,nj->nij", x, da).reshape(n, -1)
    return np.concatenate([gw1, da, gw2, dz], axis=1), losses


def _chunked(state, ds, idx, last_only, chunk_size, workers):
    chunks = [idx[s: s + chunk_size] for s in range(0, idx.size, chunk_size)]

    def work(rows):
        return _grad_chunk(state, ds.features[rows], ds.labels[rows], last_only)

    if workers and workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, chunks))  # map preserves chunk order
    else:
        parts = [work(rows) for rows in chunks]
    return PerSampleGrads(
        np.concatenate([g for g, _ in parts], axis=0),
        np.concatenate([l for _, l in parts]),
    )


def per_sample_gradients(state: ModelState, ds: LabeledDataset, indices,
                         chunk_size: int = DEFAULT_CHUNK, workers: int = 1) -> PerSampleGrads:
    """Row ``i`` is the gradient of example ``indices[i]``'s cross-entropy."""
    idx = _check_indices(ds, indices)
    return _chunked(state, ds, idx, False, chunk_size, workers)


def last_layer_gradients(state: ModelState, ds: LabeledDataset, indices,
                         chunk_size: int = DEFAULT_CHUNK, workers: int = 1) -> PerSampleGrads:
    """As :func:`per_sample_gradients`, restricted to ``state.last_layer_slice``."""
    idx = _check_indices(ds, indices)
    return _chunked(state, ds, idx, True, chunk_size, workers)


def clipped_gradient_sum(state: ModelState, ds: LabeledDataset, indices, clip_norm: float,
                         chunk_size: int = DEFAULT_CHUNK) -> tuple[np.ndarray, np.ndarray]:
    """Sum of per-example gradients each clipped to L2 norm ``clip_norm``.

    Never materializes the per-example rows: every weight-block gradient is an
    outer product, so its norm factorizes as ``|a| * |b|`` and the clipped sum
    is a weighted matrix product. Returns ``(sum, pre-clip norms)``.
    """
    idx = _check_indices(ds, indices)
    total = np.zeros(state.p)
    norms = np.empty(idx.size)
    for start in range(0, idx.size, chunk_size):
        rows = idx[start: start + chunk_size]
        x = np.asarray(ds.features[rows], dtype=np.float64)
        y = ds.labels[rows]
        if state.arch == "logistic":
            w, b = state.unpack()
            _, dz = softmax_residual(x @ w + b, y)
            sq = (np.sum(x * x, axis=1) + 1.0) * np.sum(dz * dz, axis=1)
            nrm = np.sqrt(sq)
            scale = np.minimum(1.0, clip_norm / np.maximum(nrm, 1e-300))
            sdz = dz * scale[:, None]
            total += np.concatenate([(x.T @ sdz).ravel(), sdz.sum(axis=0)])
        else:
            w1, b1, w2, b2 = state.unpack()
            pre = x @ w1 + b1
            h = np.maximum(pre, 0.0)
            _, dz = softmax_residual(h @ w2 + b2, y)
            da = (dz @ w2.T) * (pre > 0.0)
            sq = (np.sum(x * x, axis=1) + 1.0) * np.sum(da * da, axis=1) + (
                np.sum(h * h, axis=1) + 1.0
            ) * np.sum(dz * dz, axis=1)
            nrm = np.sqrt(sq)
            scale = np.minimum(1.0, clip_norm / np.maximum(nrm, 1e-300))
            sda, sdz = da * scale[:, None], dz * scale[:, None]
            total += np.concatenate(
                [(x.T @ sda).ravel(), sda.sum(axis=0), (h.T @ sdz).ravel(), sdz.sum(axis=0)]
            )
        norms[start: start + rows.size] = nrm
    return total, norms


def mean_gradient(state: ModelState, ds: LabeledDataset, indices=None) -> np.ndarray:
    """Gradient of the mean loss, assembled without per-example rows."""
    idx = np.arange(len(ds)) if indices is None else _check_indices(ds, indices)
    total, _ = clipped_gradient_sum(state, ds, idx, clip_norm=np.inf)
    return total / idx.size


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(state: ModelState, path) -> None:
    """``<u32 len><descriptor utf-8><u64 p><p x f64 LE>``."""
    desc = state.descriptor.encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<Q", state.p))
        fh.write(state.theta.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError("truncated checkpoint", offset=len(data))
    (n,) = struct.unpack_from("<I", data, 0)
    desc = data[4: 4 + n].decode()
    (p,) = struct.unpack_from("<Q", data, 4 + n)
    off = 12 + n
    if len(data) != off + 8 * p:
        raise FormatError("checkpoint payload length mismatch", offset=len(data))
    theta = np.frombuffer(data, dtype="<f8", count=p, offset=off).astype(np.float64)
    parts = desc.split(":")
    if parts[0] == "logistic":
        return ModelState(theta, "logistic", int(parts[1]), int(parts[2]))
    if parts[0] == "mlp":
        return ModelState(theta, "mlp", int(parts[1]), int(parts[3]), int(parts[2]))
    raise FormatError(f"unknown architecture descriptor {desc!r}", offset=4)
