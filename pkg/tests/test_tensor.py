import numpy as np
import pytest
from hypothesis import given, strategies as st

from spherenorm.errors import DimensionError, ValidationError
from spherenorm.tensor import (as_tensor, is_symmetric, matmul, power_iteration,
                               seeded_rng, sym_eigen)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_as_tensor_rejects_nonfinite():
    with pytest.raises(ValidationError):
        as_tensor([1.0, np.nan])
    with pytest.raises(ValidationError):
        as_tensor([[np.inf]])
    assert as_tensor([1, 2]).dtype == np.float64


def test_matmul_examples(rng):
    v = np.array([[1.0], [2.0], [3.0]])
    assert np.array_equal(matmul(np.eye(3), v), v)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])
    a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    assert np.max(np.abs(matmul(a, b) - naive_matmul(a, b))) <= 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative(rng):
    for _ in range(20):
        a, b, c = (rng.standard_normal((5, 5)) for _ in range(3))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        assert np.linalg.norm(left - right) <= 1e-9 * np.linalg.norm(left)


def test_sym_eigen_diagonal():
    res = sym_eigen(np.diag([1.0, 3.0, 0.0]))
    assert np.allclose(res.eigenvalues, [3, 1, 0], atol=0)


def test_sym_eigen_known_spectrum():
    th = 0.3
    Q = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    res = sym_eigen(Q @ np.diag([5.0, 2.0]) @ Q.T)
    assert np.allclose(res.eigenvalues, [5, 2], atol=1e-12)


def test_sym_eigen_zero_matrix():
    res = sym_eigen(np.zeros((4, 4)))
    assert np.all(res.eigenvalues == 0)
    assert np.allclose(res.eigenvectors.T @ res.eigenvectors, np.eye(4), atol=1e-12)


def test_sym_eigen_rejects_asymmetric():
    with pytest.raises(ValidationError):
        sym_eigen(np.array([[1.0, 2.0], [0.0, 1.0]]))


@given(st.integers(1, 24), st.integers(0, 2**31))
def test_sym_eigen_residuals_and_reconstruction(n, seed):
    r = np.random.default_rng(seed)
    M = r.standard_normal((n, n))
    A = M + M.T
    res = sym_eigen(A)
    Q, lam = res.eigenvectors, res.eigenvalues
    fro = np.linalg.norm(A)
    assert np.all(res.residuals(A) <= 1e-9 * fro + 1e-300)
    assert np.max(np.abs(Q.T @ Q - np.eye(n))) <= 1e-10
    assert np.linalg.norm(Q @ np.diag(lam) @ Q.T - A) <= 1e-9 * fro + 1e-300
    assert np.all(np.diff(lam) <= 0)
    # cross-check against LAPACK
    assert np.allclose(lam, np.sort(np.linalg.eigvalsh(A))[::-1], atol=1e-10 * max(fro, 1))


def test_is_symmetric():
    assert is_symmetric(np.eye(3))
    assert not is_symmetric(np.ones((2, 3)))


def test_power_iteration_examples(rng):
    assert power_iteration(np.eye(4)).sigma == pytest.approx(1.0, abs=1e-12)
    assert power_iteration(np.diag([3.0, 1.0])).sigma == pytest.approx(3.0, abs=1e-12)
    W = rng.standard_normal((8, 8))
    sigma = np.sqrt(sym_eigen(W.T @ W).eigenvalues[0])
    est = power_iteration(W, iters=5000, tol=1e-14)
    assert abs(est.sigma - sigma) <= 1e-6 * sigma


def test_power_iteration_zero_matrix():
    est = power_iteration(np.zeros((3, 3)))
    assert est.sigma == 0.0 and est.degenerate


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_power_iteration_below_frobenius(m, n, seed):
    W = np.random.default_rng(seed).standard_normal((m, n))
    assert power_iteration(W).sigma <= np.linalg.norm(W) + 1e-9


def test_seeded_rng_determinism():
    a = seeded_rng(7).standard_normal(1000)
    b = seeded_rng(7).standard_normal(1000)
    assert np.array_equal(a, b)
    assert not np.array_equal(seeded_rng(7).random(10), seeded_rng(8).random(10))
    assert abs(seeded_rng(3).standard_normal(100_000).mean()) < 0.02
