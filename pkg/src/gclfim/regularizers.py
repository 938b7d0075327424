"""Anti-forgetting penalties added to the per-batch classification loss.

Every strategy exposes the same hooks to the training loop:
``begin_task`` / ``penalty`` / ``end_task``. The functional forms
(``ewc_penalty``, ``ours_penalty`` ...) are also usable on their own.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .fisher import DIAG_ESTIMATORS, exact_fim
from .gcn import ModelParams, PerSampleGrad, backward, forward, node_grad, per_sample_loglik_grad, sample_label


class RegularizerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RegConfig:
    strategy: str = "ours"
    lam: float = 0.1
    gamma: float = 1.0
    temperature: float = 2.0
    lambda_dist: float = 1.0
    queue_size: int = 128
    ema_beta: float | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise RegularizerConfigError(f"unknown strategy {self.strategy!r}; choose from {sorted(STRATEGIES)}")
        if self.lam < 0:
            raise RegularizerConfigError("lambda must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise RegularizerConfigError("gamma must lie in (0, 1]")
        if self.queue_size < 1:
            raise RegularizerConfigError("queue size M must be >= 1")
        if self.temperature <= 0:
            raise RegularizerConfigError("temperature must be > 0")
        if self.ema_beta is not None and not 0.0 <= self.ema_beta <= 1.0:
            raise RegularizerConfigError("ema_beta must lie in [0, 1]")


@dataclass(eq=False)
class Anchor:
    task_id: int
    theta: np.ndarray
    importance: np.ndarray | None = None


@dataclass(eq=False)
class AnchorSet:
    anchors: list[Anchor] = field(default_factory=list)

    def append(self, anchor: Anchor) -> None:
        if self.anchors:
            if anchor.task_id <= self.anchors[-1].task_id:
                raise ValueError("anchor task ids must be strictly increasing")
            if anchor.theta.shape != self.anchors[0].theta.shape:
                raise ValueError("anchor length differs from earlier anchors")
        self.anchors.append(anchor)

    def __len__(self) -> int:
        return len(self.anchors)

    def __iter__(self):
        return iter(self.anchors)

    def __getitem__(self, i):
        return self.anchors[i]

    def latest(self) -> Anchor:
        return self.anchors[-1]


class GradCache:
    """FIFO of at most ``capacity`` per-sample gradients (oldest evicted first)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[PerSampleGrad] = deque(maxlen=capacity)

    def push(self, g: PerSampleGrad) -> None:
        self._items.append(g)

    def clear(self) -> None:
        self._items.clear()

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def matrix(self) -> np.ndarray:
        return np.array([g.vector for g in self._items])


def _theta(params) -> np.ndarray:
    return params.theta if isinstance(params, ModelParams) else np.asarray(params, dtype=np.float64)


def ewc_penalty(params, anchors, lam: float) -> tuple[float, np.ndarray]:
    """(lam/2) sum_t sum_i F_{t,i} (theta_i - theta_{t,i})^2 and its gradient."""
    theta = _theta(params)
    penalty, grad = 0.0, np.zeros_like(theta)
    for anchor in anchors:
        if anchor.importance is None:
            raise RegularizerConfigError(f"anchor for task {anchor.task_id} has no importance vector")
        weighted = anchor.importance * (theta - anchor.theta)
        penalty += 0.5 * lam * float(weighted @ (theta - anchor.theta))
        grad += lam * weighted
    return penalty, grad


def online_ewc_update(running: np.ndarray | None, new_task_fim: np.ndarray, gamma: float) -> np.ndarray:
    if running is None:
        return np.array(new_task_fim, dtype=np.float64)
    if running.shape != new_task_fim.shape:
        raise ValueError(f"length mismatch: {running.shape} vs {new_task_fim.shape}")
    return gamma * running + new_task_fim


def output_norm_grad(probs_row: np.ndarray) -> np.ndarray:
    """d ||softmax(z)||^2 / dz."""
    sq = probs_row @ probs_row
    return 2.0 * probs_row * (probs_row - sq)


def mas_importance(params: ModelParams, adjacency, features, nodes, active: int | None = None) -> np.ndarray:
    """Mean over nodes of |d ||softmax output||^2 / d theta|."""
    nodes = list(nodes)
    if not nodes:
        raise ValueError("MAS importance needs at least one node")
    trace = forward(params, adjacency, features, active)
    omega = np.zeros(params.dim)
    for v in nodes:
        omega += np.abs(node_grad(params, trace, adjacency, v, output_norm_grad(trace.probs[v])))
    return omega / len(nodes)


def _soft(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def lwf_penalty(
    params: ModelParams,
    old_params: ModelParams | None,
    adjacency,
    features,
    batch,
    temperature: float,
    lambda_dist: float,
    old_classes: int | None = None,
    trace=None,
    old_logits: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Distillation KL(old || new) of temperature-softened outputs over the old classes."""
    if old_params is None or old_classes == 0:
        return 0.0, np.zeros(params.dim)
    if old_classes is None:
        old_classes = params.num_classes
    batch = np.asarray(batch, dtype=np.int64)
    if trace is None:
        trace = forward(params, adjacency, features)
    if old_logits is None:
        old_logits = forward(old_params, adjacency, features).logits
    q_old = _soft(old_logits[batch, :old_classes], temperature)
    q_new = _soft(trace.logits[batch, :old_classes], temperature)
    kl = np.sum(q_old * (np.log(q_old) - np.log(q_new)))
    dlogits = np.zeros_like(trace.logits)
    np.add.at(dlogits, (batch[:, None], np.arange(old_classes)[None, :]), (q_new - q_old) / temperature)
    return float(lambda_dist * kl), lambda_dist * backward(params, trace, adjacency, dlogits)


def ours_cache_push(cache: GradCache, g: PerSampleGrad) -> None:
    cache.push(g)


def ours_penalty(params, anchors, cache: GradCache, lam: float) -> tuple[float, np.ndarray]:
    """Cached-gradient curvature penalty with the cached vectors held constant.

    penalty = lam / (2|Q|) * sum_{v in Q} sum_t (g_v . (theta - theta_t))^2
    grad    = lam / |Q|    * sum_{v in Q} c_v g_v,   c_v = sum_t g_v . (theta - theta_t)
    """
    theta = _theta(params)
    if len(cache) == 0 or len(anchors) == 0:
        return 0.0, np.zeros_like(theta)
    grads = cache.matrix()
    proj = np.stack([grads @ (theta - a.theta) for a in anchors], axis=1)
    scale = lam / len(cache)
    penalty = 0.5 * scale * float(np.sum(proj * proj))
    return penalty, scale * (grads.T @ proj.sum(axis=1))


class UnbiasednessResult(NamedTuple):
    mc_mean: float
    exact: float
    mc_sem: float


def ours_unbiasedness_check(
    params: ModelParams,
    anchors,
    adjacency,
    features,
    batch,
    rng: np.random.Generator,
    n_draws: int,
    lam: float = 1.0,
    active: int | None = None,
) -> UnbiasednessResult:
    """Monte-Carlo mean of (lam/2) sum_t d_t^T I_B d_t with freshly sampled labels,
    against the same quantity with the exact batch FIM.

    The gradient at a given (node, label) does not depend on the draw, so it
    is computed once per pair and reused across draws.
    """
    trace = forward(params, adjacency, features, active)
    disp = np.array([params.theta - a.theta for a in anchors]).reshape(-1, params.dim)
    fim = exact_fim(params, adjacency, features, batch, trace=trace)
    exact = 0.5 * lam * float(np.einsum("ti,ij,tj->", disp, fim, disp))

    per_label = np.zeros((len(batch), trace.active))
    for row, v in enumerate(batch):
        for c in range(trace.active):
            g = per_sample_loglik_grad(params, adjacency, features, v, c, trace=trace).vector
            per_label[row, c] = np.sum((disp @ g) ** 2)
    draws = np.zeros(n_draws)
    for row, v in enumerate(batch):
        labels = rng.choice(trace.active, size=n_draws, p=trace.probs[v, : trace.active])
        draws += per_label[row, labels]
    draws *= 0.5 * lam
    sem = float(draws.std(ddof=1) / np.sqrt(n_draws)) if n_draws > 1 else float("inf")
    return UnbiasednessResult(float(draws.mean()), exact, sem)


class Strategy:
    """No penalty; plain sequential fine-tuning."""

    def __init__(self, cfg: RegConfig):
        self.cfg = cfg

    def begin_task(self, state, task, active: int) -> None:
        pass

    def penalty(self, state, task, params: ModelParams, trace, batch, rng) -> tuple[float, np.ndarray]:
        return 0.0, np.zeros(params.dim)

    def end_task(self, state, task, anchor_params: ModelParams, active: int, rng) -> Anchor:
        return Anchor(task.task_id, anchor_params.theta.copy())


class EWC(Strategy):
    def __init__(self, cfg: RegConfig, estimator: str):
        super().__init__(cfg)
        self.estimator = DIAG_ESTIMATORS[estimator]

    def penalty(self, state, task, params, trace, batch, rng):
        if len(state.anchors) == 0:
            return super().penalty(state, task, params, trace, batch, rng)
        return ewc_penalty(params, state.anchors, self.cfg.lam)

    def end_task(self, state, task, anchor_params, active, rng):
        fim = self.estimator(
            anchor_params, task.adjacency, task.features, task.train, task.labels, rng=rng, active=active
        )
        return Anchor(task.task_id, anchor_params.theta.copy(), fim)


class OnlineEWC(EWC):
    """Single running diagonal F <- gamma F + F_new, anchored at the latest snapshot."""

    def __init__(self, cfg: RegConfig):
        super().__init__(cfg, "empirical")

    def penalty(self, state, task, params, trace, batch, rng):
        if len(state.anchors) == 0:
            return Strategy.penalty(self, state, task, params, trace, batch, rng)
        return ewc_penalty(params, [state.anchors.latest()], self.cfg.lam)

    def end_task(self, state, task, anchor_params, active, rng):
        anchor = super().end_task(state, task, anchor_params, active, rng)
        running = state.anchors.latest().importance if len(state.anchors) else None
        anchor.importance = online_ewc_update(running, anchor.importance, self.cfg.gamma)
        return anchor


class MAS(EWC):
    def __init__(self, cfg: RegConfig):
        Strategy.__init__(self, cfg)

    def end_task(self, state, task, anchor_params, active, rng):
        omega = mas_importance(anchor_params, task.adjacency, task.features, task.train, active=active)
        return Anchor(task.task_id, anchor_params.theta.copy(), omega)


class LwF(Strategy):
    def begin_task(self, state, task, active):
        self._old_logits = None
        self._old_classes = 0
        if len(state.anchors):
            old = state.params.with_theta(state.anchors.latest().theta)
            self._old_params = old
            self._old_logits = forward(old, task.adjacency, task.features).logits
            self._old_classes = min(task.class_set)

    def penalty(self, state, task, params, trace, batch, rng):
        if self._old_logits is None:
            return super().penalty(state, task, params, trace, batch, rng)
        return lwf_penalty(
            params,
            self._old_params,
            task.adjacency,
            task.features,
            batch,
            self.cfg.temperature,
            self.cfg.lambda_dist,
            old_classes=self._old_classes,
            trace=trace,
            old_logits=self._old_logits,
        )


class Ours(Strategy):
    """Online sampled-label curvature penalty over a FIFO of recent gradients."""

    def begin_task(self, state, task, active):
        state.cache.clear()

    def penalty(self, state, task, params, trace, batch, rng):
        if len(state.anchors) == 0:
            return super().penalty(state, task, params, trace, batch, rng)
        v = int(batch[rng.integers(len(batch))])
        label = sample_label(trace, v, rng)
        ours_cache_push(state.cache, per_sample_loglik_grad(params, task.adjacency, task.features, v, label, trace=trace))
        return ours_penalty(params, state.anchors, state.cache, self.cfg.lam)


STRATEGIES = {
    "finetune": Strategy,
    "ours": Ours,
    "ewc_empirical": lambda cfg: EWC(cfg, "empirical"),
    "ewc_sampled": lambda cfg: EWC(cfg, "sampled"),
    "ewc_predicted": lambda cfg: EWC(cfg, "predicted"),
    "online_ewc": OnlineEWC,
    "mas": MAS,
    "lwf": LwF,
}


def make_strategy(cfg: RegConfig) -> Strategy:
    return STRATEGIES[cfg.strategy](cfg)
