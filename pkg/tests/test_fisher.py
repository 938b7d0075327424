import numpy as np
import pytest
import scipy.sparse as sp

from conftest import make_tiny
from gclfim.fisher import (
    DIAG_ESTIMATORS,
    FimSizeError,
    diag_fim_empirical,
    diag_fim_predicted,
    diag_fim_sampled,
    exact_fim,
    fim_rank,
    sampled_batch_fim,
)
from gclfim.gcn import ModelParams, forward, init_params, per_sample_loglik_grad


def single_node_zero_model():
    p = ModelParams.zeros(1, 2, 2)
    return p, sp.csr_matrix([[1.0]]), np.array([[1.0]])


def test_zero_model_fim_lives_in_output_bias_block():
    p, a, x = single_node_zero_model()
    fim = exact_fim(p, a, x, [0])
    np.testing.assert_allclose(fim[-2:, -2:], [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)
    assert np.all(fim[:-2] == 0) and np.all(fim[:, :-2] == 0)


def test_empty_node_set_gives_zero_matrix(rng):
    t = make_tiny(rng)
    fim = exact_fim(t.params, t.adjacency, t.features, [])
    assert fim.shape == (t.params.dim, t.params.dim) and not fim.any()


def test_exact_fim_matches_outer_product_oracle(rng):
    t = make_tiny(rng)
    tr = forward(t.params, t.adjacency, t.features)
    oracle = np.zeros((t.params.dim, t.params.dim))
    for v in (0, 3):
        for c in range(3):
            g = per_sample_loglik_grad(t.params, t.adjacency, t.features, v, c).vector
            oracle += tr.probs[v, c] * np.outer(g, g)
    np.testing.assert_allclose(exact_fim(t.params, t.adjacency, t.features, [0, 3]), oracle, atol=1e-14)


def test_exact_fim_is_symmetric_psd(rng):
    for _ in range(5):
        t = make_tiny(rng)
        fim = exact_fim(t.params, t.adjacency, t.features, range(5))
        assert np.abs(fim - fim.T).max() <= 1e-12
        assert np.linalg.eigvalsh(fim).min() >= -1e-10 * max(1.0, np.abs(fim).max())


def test_sampled_fim_is_psd_with_bounded_rank(rng):
    t = make_tiny(rng)
    est = sampled_batch_fim(t.params, t.adjacency, t.features, [0, 1, 2], np.random.default_rng(0))
    assert np.linalg.eigvalsh(est).min() >= -1e-10
    assert fim_rank(est) <= 3


def test_empirical_diagonal_hand_value():
    p, a, x = single_node_zero_model()
    diag = diag_fim_empirical(p, a, x, [0], [0])
    np.testing.assert_allclose(diag[-2:], [0.25, 0.25])
    assert not diag[:-2].any()


def test_predicted_equals_empirical_when_argmax_is_the_label(rng):
    t = make_tiny(rng)
    tr = forward(t.params, t.adjacency, t.features)
    labels = np.argmax(tr.logits, axis=1)
    nodes = range(5)
    np.testing.assert_array_equal(
        diag_fim_predicted(t.params, t.adjacency, t.features, nodes),
        diag_fim_empirical(t.params, t.adjacency, t.features, nodes, labels),
    )


def test_sampled_diagonal_converges_to_exact_diagonal(rng):
    t = make_tiny(rng, n=3, d=2, h=2, c=3)
    tr = forward(t.params, t.adjacency, t.features)
    target = np.diag(exact_fim(t.params, t.adjacency, t.features, [0, 1], trace=tr))
    gen = np.random.default_rng(7)
    draws = 10_000
    mean = sum(diag_fim_sampled(t.params, t.adjacency, t.features, [0, 1], rng=gen, trace=tr) for _ in range(draws))
    mean /= draws
    assert np.linalg.norm(mean - target) <= 0.05 * np.linalg.norm(target)


def test_sampled_diagonal_needs_rng(rng):
    t = make_tiny(rng)
    with pytest.raises(ValueError):
        diag_fim_sampled(t.params, t.adjacency, t.features, [0])


def test_estimator_table():
    assert set(DIAG_ESTIMATORS) == {"empirical", "sampled", "predicted"}


def test_single_node_two_class_fim_has_rank_one(rng):
    for _ in range(10):
        t = make_tiny(rng, c=2)
        assert fim_rank(exact_fim(t.params, t.adjacency, t.features, [int(rng.integers(5))])) <= 1


def test_identical_isolated_nodes_add_no_rank(rng):
    p = init_params(3, 4, 3, rng)
    x = np.tile(rng.standard_normal(3), (4, 1))
    a = sp.identity(4, format="csr")
    assert fim_rank(exact_fim(p, a, x, range(4))) == fim_rank(exact_fim(p, a, x, [0]))


def test_zero_matrix_has_rank_zero():
    assert fim_rank(np.zeros((4, 4))) == 0


def test_rank_is_monotone_in_the_node_set(rng):
    for _ in range(20):
        t = make_tiny(rng, n=5, d=2, h=3, c=3)
        order = rng.permutation(5)
        ranks = [fim_rank(exact_fim(t.params, t.adjacency, t.features, order[:k])) for k in range(6)]
        assert all(a <= b for a, b in zip(ranks, ranks[1:]))


def test_dense_fim_refuses_huge_models():
    p = ModelParams.zeros(100, 64, 10)
    with pytest.raises(FimSizeError):
        exact_fim(p, sp.identity(1, format="csr"), np.zeros((1, 100)), [0])
    with pytest.raises(FimSizeError):
        sampled_batch_fim(p, sp.identity(1, format="csr"), np.zeros((1, 100)), [0], np.random.default_rng(0))
