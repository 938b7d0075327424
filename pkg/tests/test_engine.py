import logging
import re

import numpy as np
import pytest

from gclfim.engine import (
    AdamMoments,
    TrainConfig,
    adam_step,
    ema_snapshot,
    init_state,
    make_batches,
    run_continual,
    train_task,
)
from gclfim.graphs import build_schedule, generate_sbm_stream
from gclfim.regularizers import RegConfig, make_strategy


@pytest.fixture(scope="module")
def schedule():
    raw = generate_sbm_stream(4, 12, 5, 0.3, 0.02, seed=3)
    return build_schedule(raw, 2, seed=1)


SMALL = TrainConfig(epochs=3, batch_size=8, learning_rate=1e-2, hidden=8)


def test_adam_single_step_by_hand():
    theta, grad = np.array([1.0, -2.0]), np.array([0.5, -0.1])
    new, mom = adam_step(theta, grad, AdamMoments.zeros(2), lr=0.1, weight_decay=0.2)
    g = grad + 0.2 * theta
    m_hat = (0.1 * g) / 0.1
    v_hat = (0.001 * g * g) / 0.001
    np.testing.assert_allclose(new, theta - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-14)
    assert mom.step == 1
    # the first bias-corrected step has magnitude ~lr in every coordinate
    np.testing.assert_allclose(np.abs(new - theta), 0.1, rtol=1e-6)


def test_adam_zero_gradient_is_a_no_op():
    theta = np.array([0.3, -1.2, 4.0])
    new, _ = adam_step(theta, np.zeros(3), AdamMoments.zeros(3), lr=1.0)
    np.testing.assert_array_equal(new, theta)


def test_adam_is_deterministic():
    gen = np.random.default_rng(0)
    grads = gen.standard_normal((5, 4))

    def trajectory():
        theta, mom = np.zeros(4), AdamMoments.zeros(4)
        for g in grads:
            theta, mom = adam_step(theta, g, mom, 1e-3, 5e-4)
        return theta, mom

    (a, ma), (b, mb) = trajectory(), trajectory()
    assert a.tobytes() == b.tobytes() and ma.v.tobytes() == mb.v.tobytes()


def test_ema_examples():
    prev, new = np.array([0.0]), np.array([2.0])
    assert ema_snapshot(prev, new, 0.0)[0] == 2.0
    assert ema_snapshot(prev, new, 1.0)[0] == 0.0
    assert ema_snapshot(prev, new, 0.5)[0] == 1.0
    with pytest.raises(ValueError):
        ema_snapshot(np.zeros(2), np.zeros(3), 0.5)


def test_batches_cover_every_node_once():
    batches = make_batches(range(5), 2, np.random.default_rng(0))
    assert [len(b) for b in batches] == [2, 2, 1]
    assert sorted(np.concatenate(batches).tolist()) == list(range(5))


def test_batches_are_reproducible():
    a = make_batches(range(20), 6, np.random.default_rng(4))
    b = make_batches(range(20), 6, np.random.default_rng(4))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        make_batches([], 3, np.random.default_rng(0))


def test_train_config_validation():
    for bad in (dict(learning_rate=0.0), dict(ema_beta=1.5), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_zero_lambda_matches_finetune_bitwise(schedule):
    ours = run_continual(schedule, SMALL, RegConfig("ours", lam=0.0, ema_beta=0.0), seed=2)
    plain = run_continual(schedule, SMALL, RegConfig("finetune", ema_beta=0.0), seed=2)
    assert ours.params.theta.tobytes() == plain.params.theta.tobytes()
    assert ours.accuracy.values.tobytes() == plain.accuracy.values.tobytes()


def test_runs_are_deterministic(schedule):
    a = run_continual(schedule, SMALL, RegConfig("ours", lam=1.0), seed=5)
    b = run_continual(schedule, SMALL, RegConfig("ours", lam=1.0), seed=5)
    assert a.accuracy.values.tobytes() == b.accuracy.values.tobytes()


def test_anchor_and_cache_bookkeeping(schedule):
    reg = RegConfig("ours", lam=1.0, queue_size=3)
    state = init_state(schedule, SMALL, reg, seed=0)
    strategy = make_strategy(reg)
    for t, task in enumerate(schedule):
        train_task(state, task, SMALL, reg, strategy, schedule.classes_seen(t))
        assert len(state.anchors) == t + 1
        assert len(state.cache) <= 3
    # first task never touches the cache; the second fills it to capacity
    assert len(state.cache) == 3
    assert np.array_equal(state.anchors.latest().theta, state.params.theta)


def test_first_task_carries_no_penalty(schedule):
    result = run_continual(schedule, SMALL, RegConfig("ours", lam=10.0), seed=0)
    first = [h["reg"] for h in result.history if h["task"] == 1]
    later = [h["reg"] for h in result.history if h["task"] == 2]
    assert first and all(r == 0.0 for r in first)
    assert any(r > 0.0 for r in later)


def test_tasks_must_arrive_in_order(schedule):
    reg = RegConfig("finetune")
    state = init_state(schedule, SMALL, reg, seed=0)
    with pytest.raises(ValueError):
        train_task(state, schedule[1], SMALL, reg, make_strategy(reg), schedule.classes_seen(1))


def test_ema_snapshot_becomes_the_evaluated_model(schedule):
    reg = RegConfig("finetune", ema_beta=0.5)
    state = init_state(schedule, SMALL, reg, seed=0)
    theta0 = state.params.theta.copy()
    strategy = make_strategy(reg)
    train_task(state, schedule[0], SMALL, reg, strategy, schedule.classes_seen(0))
    # undo the average to recover the raw trained weights; they must differ from the init
    raw = 2 * state.params.theta - theta0
    assert not np.allclose(raw, theta0)
    np.testing.assert_array_equal(state.snapshot, state.params.theta)


def test_epoch_log_line_format(schedule, caplog):
    with caplog.at_level(logging.INFO, logger="gclfim.engine"):
        run_continual(schedule, TrainConfig(epochs=1, batch_size=8, hidden=4), RegConfig("finetune"), seed=0)
    pattern = re.compile(r"^task=\d+ epoch=\d+ loss=-?\d+\.\d+ reg=-?\d+\.\d+ val_acc=\d+\.\d+$")
    lines = [r.getMessage() for r in caplog.records if r.name == "gclfim.engine"]
    assert len(lines) == len(schedule)
    assert all(pattern.match(line) for line in lines)


@pytest.mark.parametrize("name", ["ewc_empirical", "ewc_sampled", "ewc_predicted", "online_ewc", "mas", "lwf"])
def test_every_baseline_runs(schedule, name):
    result = run_continual(schedule, SMALL, RegConfig(name, lam=1.0), seed=0)
    assert result.accuracy.completed() == len(schedule)
    assert np.isfinite(result.ap) and np.isfinite(result.af)
