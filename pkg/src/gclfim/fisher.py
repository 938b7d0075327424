"""Fisher information for the categorical GCN likelihood.

All matrices here are conditional on the inputs: the expectation runs over
labels drawn from the model's own predictive distribution with the graph
and features held fixed.
"""

from __future__ import annotations

import numpy as np

from .gcn import ForwardTrace, ModelParams, forward, per_sample_loglik_grad, sample_label

MAX_DENSE_DIM = 5000


class FimSizeError(ValueError):
    """Parameter vector too long for a dense dim x dim matrix."""


def _guard(params: ModelParams) -> None:
    if params.dim > MAX_DENSE_DIM:
        raise FimSizeError(f"dense FIM needs dim(theta) <= {MAX_DENSE_DIM}, got {params.dim}")


def _trace(params, adjacency, features, active, trace):
    return trace if trace is not None else forward(params, adjacency, features, active)


def exact_fim(
    params: ModelParams,
    adjacency,
    features: np.ndarray,
    nodes,
    active: int | None = None,
    trace: ForwardTrace | None = None,
) -> np.ndarray:
    """Sum over nodes of E_{y ~ P[v]} [g g^T], enumerating every active class."""
    _guard(params)
    trace = _trace(params, adjacency, features, active, trace)
    fim = np.zeros((params.dim, params.dim))
    for v in nodes:
        for c in range(trace.active):
            p = trace.probs[v, c]
            if p == 0.0:
                continue
            g = per_sample_loglik_grad(params, adjacency, features, v, c, trace=trace).vector
            fim += p * np.outer(g, g)
    return fim


def sampled_batch_fim(
    params: ModelParams,
    adjacency,
    features: np.ndarray,
    batch,
    rng: np.random.Generator,
    active: int | None = None,
    trace: ForwardTrace | None = None,
) -> np.ndarray:
    """Unbiased rank-|batch| estimate: sum_v g_v g_v^T at a label sampled from the model."""
    _guard(params)
    trace = _trace(params, adjacency, features, active, trace)
    grads = np.array(
        [
            per_sample_loglik_grad(params, adjacency, features, v, sample_label(trace, v, rng), trace=trace).vector
            for v in batch
        ]
    ).reshape(-1, params.dim)
    return grads.T @ grads


def _diag_fim(params, adjacency, features, nodes, pick_label, active, trace) -> np.ndarray:
    trace = _trace(params, adjacency, features, active, trace)
    diag = np.zeros(params.dim)
    for v in nodes:
        g = per_sample_loglik_grad(params, adjacency, features, v, pick_label(trace, v), trace=trace).vector
        diag += g * g
    return diag


def diag_fim_empirical(params, adjacency, features, nodes, labels, rng=None, active=None, trace=None) -> np.ndarray:
    """Squared log-likelihood gradients at each node's true label."""
    labels = np.asarray(labels)
    return _diag_fim(params, adjacency, features, nodes, lambda tr, v: int(labels[v]), active, trace)


def diag_fim_sampled(params, adjacency, features, nodes, labels=None, rng=None, active=None, trace=None) -> np.ndarray:
    """Squared gradients at a label drawn from the predicted distribution."""
    if rng is None:
        raise ValueError("diag_fim_sampled needs an rng")
    return _diag_fim(params, adjacency, features, nodes, lambda tr, v: sample_label(tr, v, rng), active, trace)


def diag_fim_predicted(params, adjacency, features, nodes, labels=None, rng=None, active=None, trace=None) -> np.ndarray:
    """Squared gradients at the argmax label."""
    return _diag_fim(
        params, adjacency, features, nodes, lambda tr, v: int(np.argmax(tr.logits[v, : tr.active])), active, trace
    )


DIAG_ESTIMATORS = {
    "empirical": diag_fim_empirical,
    "sampled": diag_fim_sampled,
    "predicted": diag_fim_predicted,
}


def fim_rank(fim: np.ndarray, tol: float = 1e-8) -> int:
    """Count eigenvalues above ``tol`` times the largest eigenvalue."""
    eig = np.linalg.eigvalsh(0.5 * (fim + fim.T))
    top = eig.max(initial=0.0)
    if top <= 0.0:
        return 0
    return int(np.count_nonzero(eig > tol * top))
