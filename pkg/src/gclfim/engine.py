"""Sequential task training with Adam, per-task EMA snapshots and anchors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .gcn import ModelParams, forward, init_params, loss_and_grad, predict
from .graphs import TaskGraph, TaskSchedule
from .metrics import AccuracyMatrix, average_forgetting, average_performance, evaluate
from .regularizers import AnchorSet, GradCache, RegConfig, Strategy, make_strategy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-5
    weight_decay: float = 5e-4
    ema_beta: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 256

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.ema_beta <= 1.0:
            raise ValueError("ema_beta must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.hidden < 1:
            raise ValueError("batch_size and hidden must be >= 1, epochs >= 0")


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "AdamMoments":
        return cls(np.zeros(dim), np.zeros(dim), 0)


def adam_step(
    theta: np.ndarray,
    grad: np.ndarray,
    moments: AdamMoments,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamMoments]:
    """One bias-corrected Adam update; weight decay enters as ``weight_decay * theta`` on the gradient."""
    g = grad + weight_decay * theta
    step = moments.step + 1
    m = beta1 * moments.m + (1.0 - beta1) * g
    v = beta2 * moments.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), AdamMoments(m, v, step)


def ema_snapshot(theta_prev: np.ndarray, theta_new: np.ndarray, beta: float) -> np.ndarray:
    if theta_prev.shape != theta_new.shape:
        raise ValueError(f"length mismatch: {theta_prev.shape} vs {theta_new.shape}")
    return beta * theta_prev + (1.0 - beta) * theta_new


def make_batches(train_nodes, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    nodes = np.asarray(train_nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("empty training set")
    order = nodes[rng.permutation(nodes.size)]
    return [order[i : i + batch_size] for i in range(0, order.size, batch_size)]


@dataclass
class TrainState:
    params: ModelParams
    moments: AdamMoments
    anchors: AnchorSet
    cache: GradCache
    snapshot: np.ndarray
    cursor: int = 0
    batch_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    reg_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    history: list[dict] = field(default_factory=list)


def init_state(schedule: TaskSchedule, cfg: TrainConfig, reg: RegConfig, seed: int) -> TrainState:
    """Seed three independent streams (init, batching, regularizer sampling).

    Keeping the regularizer's draws off the batching stream means a zero-strength
    penalty leaves the batch sequence, and hence the trajectory, untouched.
    """
    init_ss, batch_ss, reg_ss = np.random.SeedSequence(seed).spawn(3)
    d = schedule[0].features.shape[1]
    params = init_params(d, cfg.hidden, schedule.total_classes, np.random.default_rng(init_ss))
    return TrainState(
        params=params,
        moments=AdamMoments.zeros(params.dim),
        anchors=AnchorSet(),
        cache=GradCache(reg.queue_size),
        snapshot=params.theta.copy(),
        batch_rng=np.random.default_rng(batch_ss),
        reg_rng=np.random.default_rng(reg_ss),
    )


def _accuracy(params: ModelParams, task: TaskGraph, nodes, active: int) -> float:
    if len(nodes) == 0:
        return float("nan")
    pred = predict(forward(params, task.adjacency, task.features, active))[nodes]
    return 100.0 * float(np.mean(pred == task.labels[nodes]))


def train_task(
    state: TrainState,
    task: TaskGraph,
    cfg: TrainConfig,
    reg: RegConfig,
    strategy: Strategy,
    active: int,
) -> TrainState:
    """Run ``cfg.epochs`` epochs on ``task`` and append its EMA-smoothed anchor."""
    if task.task_id != state.cursor:
        raise ValueError(f"expected task {state.cursor}, got {task.task_id}")
    beta = cfg.ema_beta if reg.ema_beta is None else reg.ema_beta
    state.moments = AdamMoments.zeros(state.params.dim)
    strategy.begin_task(state, task, active)
    ax0 = np.asarray(task.adjacency @ np.hstack([task.features, np.ones((task.num_nodes, 1))]))

    for epoch in range(cfg.epochs):
        epoch_loss = epoch_reg = 0.0
        for batch in make_batches(task.train, cfg.batch_size, state.batch_rng):
            trace = forward(state.params, task.adjacency, task.features, active, ax0=ax0)
            loss, grad = loss_and_grad(state.params, task.adjacency, task.features, batch, task.labels, trace=trace)
            pen, pen_grad = strategy.penalty(state, task, state.params, trace, batch, state.reg_rng)
            theta, state.moments = adam_step(
                state.params.theta,
                grad + pen_grad,
                state.moments,
                cfg.learning_rate,
                cfg.weight_decay,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )
            state.params = state.params.with_theta(theta)
            epoch_loss += loss
            epoch_reg += pen
        val_acc = _accuracy(state.params, task, task.val, active)
        state.history.append(
            {"task": task.task_id + 1, "epoch": epoch + 1, "loss": epoch_loss, "reg": epoch_reg, "val_acc": val_acc}
        )
        log.info(
            "task=%d epoch=%d loss=%.6f reg=%.6f val_acc=%.4f",
            task.task_id + 1,
            epoch + 1,
            epoch_loss,
            epoch_reg,
            val_acc,
        )

    state.snapshot = ema_snapshot(state.snapshot, state.params.theta, beta)
    state.params = state.params.with_theta(state.snapshot.copy())
    state.anchors.append(strategy.end_task(state, task, state.params, active, state.reg_rng))
    state.cursor += 1
    return state


@dataclass
class RunResult:
    accuracy: AccuracyMatrix
    params: ModelParams
    history: list[dict]

    @property
    def ap(self) -> float:
        return average_performance(self.accuracy, self.accuracy.num_tasks - 1)

    @property
    def af(self) -> float:
        return average_forgetting(self.accuracy, self.accuracy.num_tasks - 1)


def run_continual(schedule: TaskSchedule, cfg: TrainConfig, reg: RegConfig, seed: int) -> RunResult:
    """Train on every task in order, evaluating all seen tasks after each one."""
    state = init_state(schedule, cfg, reg, seed)
    strategy = make_strategy(reg)
    matrix = AccuracyMatrix(len(schedule))
    for t, task in enumerate(schedule):
        active = schedule.classes_seen(t)
        train_task(state, task, cfg, reg, strategy, active)
        matrix.set_row(t, evaluate(state.params, schedule, t))
    return RunResult(matrix, state.params, state.history)
