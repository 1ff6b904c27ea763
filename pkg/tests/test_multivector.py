import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from orbitlab.errors import DegenerateBasisError
from orbitlab.fields import evaluate
from orbitlab.multivector import (
    best_index,
    cramer_solve,
    index_sets,
    interior_substitute,
    lambda_p,
    pointwise_rank,
    ranks,
)


def test_index_sets_examples():
    assert index_sets(2, 3) == ((0, 1), (0, 2), (1, 2))
    assert index_sets(1, 4) == ((0,), (1,), (2,), (3,))
    assert index_sets(3, 3) == ((0, 1, 2),)
    assert index_sets(4, 3) == ()


def test_example_minor_at_one_two(example):
    wedges = lambda_p(evaluate(example, [1.0, 2.0]), 2)
    assert wedges.minor((0, 1), (0, 1)) == 1.0
    assert wedges.norm == 1.0


def test_identity_frame_norm():
    assert lambda_p(np.eye(4), 4).norm == 1.0


def test_zero_column_kills_minors():
    Y = np.random.default_rng(0).normal(size=(4, 3))
    Y[:, 1] = 0
    wedges = lambda_p(Y, 3)
    assert np.all(wedges.entries == 0)
    spec2 = lambda_p(Y, 2)
    for a, J in enumerate(spec2.rows):
        if 1 in J:
            assert np.all(spec2.entries[a] == 0)


def test_minors_are_determinants(rng):
    Y = rng.normal(size=(4, 3))
    wedges = lambda_p(Y, 2)
    for J in wedges.rows:
        for K in wedges.cols:
            assert wedges.minor(J, K) == pytest.approx(np.linalg.det(Y[list(K)][:, list(J)]), abs=1e-14)


def test_norm_is_sum_of_squared_wedges(rng):
    Y = rng.normal(size=(5, 4))
    wedges = lambda_p(Y, 3)
    assert wedges.norm**2 == pytest.approx(np.sum(wedges.wedge_norms() ** 2), rel=1e-13)


def test_rank_examples(example, balan):
    assert pointwise_rank(evaluate(example, [0.0, 0.0])) == 1
    assert pointwise_rank(evaluate(balan, [0.0, 0.0])) == 0
    assert pointwise_rank(evaluate(balan, [0.0, 1.0])) == 2
    np.testing.assert_array_equal(evaluate(balan, [0.0, 1.0]).matrix, [[np.exp(-1), 0], [0, 1]])


def _random_rank_frame(rng, n, q, r):
    return rng.normal(size=(n, r)) @ rng.normal(size=(r, q)) if r else np.zeros((n, q))


def test_rank_agrees_with_pivoted_elimination(rng):
    from scipy.linalg import qr

    for _ in range(200):
        n, q = rng.integers(1, 7, size=2)
        r = int(rng.integers(0, min(n, q) + 1))
        Y = _random_rank_frame(rng, n, q, r)
        _, R, _ = qr(Y, pivoting=True)
        d = np.abs(np.diag(R))
        oracle = int(np.sum(d > 1e-9 * max(1.0, d[0] if len(d) else 0.0)))
        assert pointwise_rank(Y) == oracle == r
        for p in range(1, min(n, q) + 1):
            assert (lambda_p(Y, p).norm > 1e-8 * max(1.0, np.linalg.norm(Y) ** p)) == (oracle >= p)


def test_batched_ranks_match_pointwise(rng):
    frames = np.stack([_random_rank_frame(rng, 3, 4, r % 4) for r in range(20)])
    np.testing.assert_array_equal(ranks(frames), [pointwise_rank(F) for F in frames])


def test_interior_substitute_by_itself(rng):
    Y = rng.normal(size=(4, 3))
    I = (0, 2)
    base = lambda_p(Y[:, list(I)], 2).entries[0]
    np.testing.assert_allclose(interior_substitute(I, 1, Y[:, 2], Y).entries[0], base, atol=1e-15)


def test_interior_substitute_zero_and_repeat(rng):
    Y = rng.normal(size=(4, 3))
    assert np.all(interior_substitute((0, 1), 0, np.zeros(4), Y).entries == 0)
    assert np.allclose(interior_substitute((0, 1), 1, Y[:, 0], Y).entries, 0, atol=1e-15)


def test_cramer_examples(rng):
    Y = rng.normal(size=(3, 2))
    xi, res = cramer_solve((0,), 3 * Y[:, 0], Y)
    np.testing.assert_allclose(xi, [3.0], rtol=1e-14)
    xi, _ = cramer_solve((0, 1), Y[:, 1], Y)
    np.testing.assert_allclose(xi, [0.0, 1.0], atol=1e-14)


def test_cramer_against_least_squares(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(4, 2)))
    Y = Q @ np.diag([2.0, 1.0])
    W = 2 * Y[:, 0] - 5 * Y[:, 1]
    xi, res = cramer_solve((0, 1), W, Y)
    oracle = np.linalg.solve(Y.T @ Y, Y.T @ W)
    np.testing.assert_allclose(xi, [2.0, -5.0], atol=1e-10)
    np.testing.assert_allclose(xi, oracle, atol=1e-10)
    assert res <= 1e-10


def test_cramer_degenerate_basis():
    Y = np.array([[1.0, 2.0], [1.0, 2.0]])
    with pytest.raises(DegenerateBasisError):
        cramer_solve((0, 1), [1.0, 1.0], Y)


def test_best_index_prefers_largest_wedge_then_lexicographic():
    Y = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]])
    assert best_index(Y, 1) == (2,)
    assert best_index(Y, 2) == (1, 2)
    assert best_index(np.eye(2), 1) == (0,)


frames = st.tuples(st.integers(1, 5), st.integers(1, 5)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.floats(-3, 3, allow_nan=False, width=64))
)


@settings(max_examples=100, deadline=None)
@given(frames, st.data())
def test_column_swap_flips_minor_sign(Y, data):
    n, q = Y.shape
    p = data.draw(st.integers(2, max(2, min(n, q)))) if min(n, q) >= 2 else None
    if p is None:
        return
    J = data.draw(st.sampled_from(index_sets(p, q)))
    K = data.draw(st.sampled_from(index_sets(p, n)))
    sub = Y[list(K)][:, list(J)]
    swapped = sub[:, [1, 0] + list(range(2, p))]
    assert np.linalg.det(swapped) == pytest.approx(-lambda_p(Y, p).minor(J, K), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_cramer_reconstruction(n, q, seed):
    rng = np.random.default_rng(seed)
    p = min(n, q)
    Y = rng.normal(size=(n, q))
    I = tuple(sorted(rng.choice(q, size=p, replace=False)))
    if np.linalg.cond(Y[:, list(I)]) > 1e6:
        return
    W = Y[:, list(I)] @ rng.normal(size=p)
    xi, res = cramer_solve(I, W, Y)
    assert np.linalg.norm(Y[:, list(I)] @ xi - W) <= 1e-9 * max(np.linalg.norm(W), 1e-300) + 1e-300
