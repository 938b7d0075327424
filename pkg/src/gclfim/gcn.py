"""Two-layer GCN with a hand-written backward pass.

Layer equations, with every weight matrix carrying its bias as the last row::

    X0 = [X 1]
    H1 = A X0 W1          X1 = [relu(H1) 1]
    H2 = A X1 W2          P  = softmax(H2) over the active classes

The parameter vector ``theta`` is ``W1.ravel()`` followed by ``W2.ravel()``.
Output columns beyond ``active`` are masked out of the softmax, which is how
the class-incremental head grows without changing ``theta``'s length.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Flat parameter vector plus the layer sizes needed to view it as matrices."""

    theta: np.ndarray
    in_dim: int
    hidden: int
    num_classes: int

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.shape != (param_count(self.in_dim, self.hidden, self.num_classes),):
            raise ShapeError(
                f"theta has shape {theta.shape}, expected "
                f"({param_count(self.in_dim, self.hidden, self.num_classes)},)"
            )
        object.__setattr__(self, "theta", theta)

    @property
    def split(self) -> int:
        return (self.in_dim + 1) * self.hidden

    @property
    def w1(self) -> np.ndarray:
        return self.theta[: self.split].reshape(self.in_dim + 1, self.hidden)

    @property
    def w2(self) -> np.ndarray:
        return self.theta[self.split :].reshape(self.hidden + 1, self.num_classes)

    @property
    def dim(self) -> int:
        return self.theta.size

    def with_theta(self, theta: np.ndarray) -> "ModelParams":
        return ModelParams(theta, self.in_dim, self.hidden, self.num_classes)

    @classmethod
    def from_matrices(cls, w1: np.ndarray, w2: np.ndarray) -> "ModelParams":
        w1, w2 = np.asarray(w1, dtype=np.float64), np.asarray(w2, dtype=np.float64)
        if w2.shape[0] != w1.shape[1] + 1:
            raise ShapeError(f"layer shapes {w1.shape} and {w2.shape} do not chain")
        return cls(np.concatenate([w1.ravel(), w2.ravel()]), w1.shape[0] - 1, w1.shape[1], w2.shape[1])

    @classmethod
    def zeros(cls, in_dim: int, hidden: int, num_classes: int) -> "ModelParams":
        return cls(np.zeros(param_count(in_dim, hidden, num_classes)), in_dim, hidden, num_classes)


def param_count(in_dim: int, hidden: int, num_classes: int) -> int:
    return (in_dim + 1) * hidden + (hidden + 1) * num_classes


def init_params(in_dim: int, hidden: int, num_classes: int, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero bias rows."""
    w1 = np.zeros((in_dim + 1, hidden))
    w2 = np.zeros((hidden + 1, num_classes))
    for w, fan_in, fan_out in ((w1, in_dim, hidden), (w2, hidden, num_classes)):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w[:-1] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return ModelParams.from_matrices(w1, w2)


def _append_ones(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


def masked_softmax(logits: np.ndarray, active: int) -> np.ndarray:
    """Row softmax over the first ``active`` columns; inactive columns get probability 0."""
    z = logits[:, :active]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = np.zeros_like(logits, dtype=np.float64)
    probs[:, :active] = e / e.sum(axis=1, keepdims=True)
    return probs


def masked_log_softmax(logits: np.ndarray, active: int) -> np.ndarray:
    z = logits[:, :active]
    z = z - z.max(axis=1, keepdims=True)
    out = np.full(logits.shape, -np.inf)
    out[:, :active] = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return out


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    x0: np.ndarray
    ax0: np.ndarray
    h1: np.ndarray
    x1: np.ndarray
    ax1: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    log_probs: np.ndarray
    active: int

    @property
    def relu_mask(self) -> np.ndarray:
        return self.h1 > 0


def forward(
    params: ModelParams,
    adjacency: sp.spmatrix | np.ndarray,
    features: np.ndarray,
    active: int | None = None,
    ax0: np.ndarray | None = None,
) -> ForwardTrace:
    """``ax0`` may carry a precomputed ``A [X 1]``, which is constant for a fixed graph."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if features.ndim != 2 or features.shape[1] != params.in_dim:
        raise ShapeError(f"features have shape {features.shape}, model expects d={params.in_dim}")
    if adjacency.shape != (n, n):
        raise ShapeError(f"adjacency has shape {adjacency.shape}, expected ({n}, {n})")
    active = params.num_classes if active is None else int(active)
    if not 1 <= active <= params.num_classes:
        raise ShapeError(f"active classes {active} outside 1..{params.num_classes}")

    x0 = _append_ones(features)
    if ax0 is None:
        ax0 = np.asarray(adjacency @ x0)
    h1 = ax0 @ params.w1
    x1 = _append_ones(np.maximum(h1, 0.0))
    ax1 = np.asarray(adjacency @ x1)
    logits = ax1 @ params.w2
    return ForwardTrace(
        x0=x0,
        ax0=ax0,
        h1=h1,
        x1=x1,
        ax1=ax1,
        logits=logits,
        probs=masked_softmax(logits, active),
        log_probs=masked_log_softmax(logits, active),
        active=active,
    )


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    adjacency: sp.spmatrix | np.ndarray,
    dlogits: np.ndarray,
) -> np.ndarray:
    """Pull a gradient w.r.t. the logit matrix back to a flat ``theta`` gradient."""
    dw2 = trace.ax1.T @ dlogits
    dx1 = np.asarray(adjacency.T @ (dlogits @ params.w2[:-1].T))
    dh1 = dx1 * trace.relu_mask
    dw1 = trace.ax0.T @ dh1
    return np.concatenate([dw1.ravel(), dw2.ravel()])


def _check_labels(labels: np.ndarray, active: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= active):
        raise ValueError(f"labels must lie in [0, {active}), got range [{labels.min()}, {labels.max()}]")


def loss_and_grad(
    params: ModelParams,
    adjacency,
    features: np.ndarray,
    batch,
    labels,
    active: int | None = None,
    trace: ForwardTrace | None = None,
) -> tuple[float, np.ndarray]:
    """Summed cross-entropy over ``batch`` and its gradient.

    ``labels`` is indexed by node id. Propagation always uses the whole
    graph; only the loss rows are selected.
    """
    if trace is None:
        trace = forward(params, adjacency, features, active)
    batch = np.asarray(batch, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    y = labels[batch]
    _check_labels(y, trace.active)
    loss = float(-trace.log_probs[batch, y].sum())
    dlogits = np.zeros_like(trace.logits)
    np.add.at(dlogits, batch, trace.probs[batch])
    np.add.at(dlogits, (batch, y), -1.0)
    return loss, backward(params, trace, adjacency, dlogits)


def _neighbourhood_sum(trace: ForwardTrace, adjacency, node: int) -> np.ndarray:
    """m[a, j] = sum_u A[v,u] relu'(H1[u,j]) (A X0)[u,a] for v = ``node``."""
    if sp.issparse(adjacency):
        row = adjacency.getrow(node)
        nbrs, weights = row.indices, row.data
    else:
        row = np.asarray(adjacency)[node]
        nbrs = np.flatnonzero(row)
        weights = row[nbrs]
    return trace.ax0[nbrs].T @ (weights[:, None] * trace.relu_mask[nbrs])


def logit_jacobian(params: ModelParams, trace: ForwardTrace, adjacency, node: int) -> np.ndarray:
    """Jacobian of node ``node``'s logit row w.r.t. ``theta``, shape (C, dim).

    Relies on the adjacency being symmetric (row v doubles as column v).
    """
    c = params.num_classes
    m = _neighbourhood_sum(trace, adjacency, node)
    jac_w1 = m[None, :, :] * params.w2[:-1].T[:, None, :]
    jac_w2 = np.zeros((c, params.hidden + 1, c))
    jac_w2[np.arange(c), :, np.arange(c)] = trace.ax1[node]
    return np.hstack([jac_w1.reshape(c, -1), jac_w2.reshape(c, -1)])


def node_grad(params: ModelParams, trace: ForwardTrace, adjacency, node: int, dlogit: np.ndarray) -> np.ndarray:
    """Gradient of ``dlogit . logits[node]`` w.r.t. theta, without forming the Jacobian."""
    m = _neighbourhood_sum(trace, adjacency, node)
    dw1 = m * (params.w2[:-1] @ dlogit)[None, :]
    dw2 = np.outer(trace.ax1[node], dlogit)
    return np.concatenate([dw1.ravel(), dw2.ravel()])


@dataclass(frozen=True, eq=False)
class PerSampleGrad:
    node_id: int
    vector: np.ndarray
    label_used: int
    anchor_params_hash: int


def per_sample_loglik_grad(
    params: ModelParams,
    adjacency,
    features: np.ndarray,
    node: int,
    label: int,
    active: int | None = None,
    trace: ForwardTrace | None = None,
) -> PerSampleGrad:
    """d log P[node, label] / d theta, i.e. minus that node's cross-entropy gradient."""
    if trace is None:
        trace = forward(params, adjacency, features, active)
    if not 0 <= node < trace.probs.shape[0]:
        raise IndexError(f"node {node} out of range")
    _check_labels(np.array([label]), trace.active)
    delta = -trace.probs[node]
    delta[label] += 1.0
    g = node_grad(params, trace, adjacency, node, delta)
    return PerSampleGrad(node_id=int(node), vector=g, label_used=int(label), anchor_params_hash=params_hash(params))


def params_hash(params: ModelParams) -> int:
    return hash(params.theta.tobytes())


def sample_label(trace: ForwardTrace, node: int, rng: np.random.Generator) -> int:
    """Draw one class from the node's predicted categorical distribution."""
    return int(rng.choice(trace.active, p=trace.probs[node, : trace.active]))


def predict(trace: ForwardTrace) -> np.ndarray:
    """Argmax over active classes; ties go to the lowest class id."""
    return np.argmax(trace.logits[:, : trace.active], axis=1)


_MAGIC = b"GCLF"


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Write ``GCLF``, the layer count and each layer's (rows, cols) as little-endian
    int32, then the flat vector as little-endian float64."""
    shapes = [(params.in_dim + 1, params.hidden), (params.hidden + 1, params.num_classes)]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<i", len(shapes)))
        for rows, cols in shapes:
            fh.write(struct.pack("<ii", rows, cols))
        fh.write(params.theta.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (layers,) = struct.unpack_from("<i", raw, 4)
    shapes = [struct.unpack_from("<ii", raw, 8 + 8 * i) for i in range(layers)]
    offset = 8 + 8 * layers
    theta = np.frombuffer(raw, dtype="<f8", offset=offset).astype(np.float64)
    if layers != 2 or theta.size != sum(r * c for r, c in shapes):
        raise ValueError(f"{path}: header does not match payload")
    (r1, h), (_, c) = shapes
    return ModelParams(theta, r1 - 1, h, c)
