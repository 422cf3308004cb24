import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from src.services.selftest_service import brute_force_assignment
from src.utils.linalg import condition_number, hungarian, jacobi_svd


def test_jacobi_svd_reconstructs(rng):
    a = rng.standard_normal((7, 5))
    u, s, v = jacobi_svd(a)
    assert np.allclose(u @ np.diag(s) @ v.T, a, atol=1e-12)
    assert np.all(np.diff(s) <= 0)
    assert np.allclose(v.T @ v, np.eye(5), atol=1e-12)
    assert np.allclose(s, np.linalg.svd(a, compute_uv=False), atol=1e-12)


def test_jacobi_svd_rejects_wide_matrix():
    with pytest.raises(ValueError):
        jacobi_svd(np.ones((2, 3)))


def test_condition_number_examples():
    assert condition_number(np.eye(4)) == pytest.approx(1.0)
    assert condition_number(np.diag([2.0, 1.0])) == pytest.approx(2.0)
    assert condition_number(np.array([[1.0, 1.0], [1.0, 1.0]])) == np.inf


def _power_iteration(m: np.ndarray, steps: int = 2000) -> float:
    v = np.ones(m.shape[0])
    for _ in range(steps):
        v = m @ v
        v /= np.linalg.norm(v)
    return float(v @ m @ v)


def test_condition_number_matches_power_iteration(rng):
    w = rng.standard_normal((10, 10))
    gram = w.T @ w
    top = _power_iteration(gram)
    bottom = 1.0 / _power_iteration(np.linalg.inv(gram))
    assert condition_number(w) == pytest.approx(np.sqrt(top / bottom), rel=1e-8)


def test_hungarian_small_examples():
    assert list(hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))) == [0, 1]
    perm = np.array([2, 0, 3, 1])
    cost = np.ones((4, 4))
    cost[np.arange(4), perm] = 0.0
    assert np.array_equal(hungarian(cost), perm)
    assert hungarian(np.zeros((0, 0))).shape == (0,)


def test_hungarian_matches_brute_force(rng):
    for _ in range(100):
        n = int(rng.integers(1, 8))
        cost = rng.standard_normal((n, n))
        perm = hungarian(cost)
        best, _ = brute_force_assignment(cost)
        assert sorted(perm) == list(range(n))
        assert cost[np.arange(n), perm].sum() == pytest.approx(best, abs=1e-9)


def test_hungarian_matches_scipy(rng):
    cost = rng.standard_normal((12, 12))
    rows, cols = linear_sum_assignment(cost)
    perm = hungarian(cost)
    assert cost[np.arange(12), perm].sum() == pytest.approx(cost[rows, cols].sum(), abs=1e-9)


def test_hungarian_lexicographic_tie_break(rng):
    # couts entiers: beaucoup d'affectations optimales
    for _ in range(30):
        n = int(rng.integers(2, 6))
        cost = rng.integers(0, 3, size=(n, n)).astype(float)
        best = min(
            (cost[np.arange(n), p].sum(), p) for p in itertools.permutations(range(n))
        )
        assert tuple(int(j) for j in hungarian(cost)) == best[1]
    assert list(hungarian(np.zeros((3, 3)))) == [0, 1, 2]


def test_hungarian_errors():
    with pytest.raises(ValueError):
        hungarian(np.ones((2, 3)))
    with pytest.raises(ValueError):
        hungarian(np.array([[0.0, np.inf], [1.0, 0.0]]))
