import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from safeinit import linalg
from safeinit.errors import NotPositiveDefinite, SingularMatrix

METHODS = ["lapack", "jacobi"]


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("m, expected", [
    (np.eye(3), [1, 1, 1]),
    (np.array([[2.0, 1.0], [1.0, 2.0]]), [1, 3]),
    (np.diag([-5.0, 0.0, 7.0]), [-5, 0, 7]),
    (np.diag([7.0, -5.0, 0.0]), [-5, 0, 7]),
])
def test_sym_eig_examples(method, m, expected):
    d = linalg.sym_eig(m, method)
    assert np.allclose(d.values, expected, atol=1e-12)
    assert np.all(np.diff(d.values) >= 0)


def _sym(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    return a + a.T


@settings(max_examples=200)
@given(n=st.integers(1, 20), seed=st.integers(0, 2 ** 32 - 1), method=st.sampled_from(METHODS))
def test_eig_reconstruction_and_orthonormality(n, seed, method):
    m = _sym(n, seed)
    d = linalg.sym_eig(m, method)
    scale = 1 + np.linalg.norm(m)
    assert np.linalg.norm(d.vectors @ np.diag(d.values) @ d.vectors.T - m) <= 1e-10 * scale
    assert np.allclose(d.vectors.T @ d.vectors, np.eye(n), atol=1e-10)


def test_jacobi_matches_lapack():
    m = _sym(12, 3)
    assert np.allclose(linalg.sym_eig(m, "jacobi").values, np.linalg.eigvalsh(m), atol=1e-10)


def test_cholesky_examples():
    assert np.allclose(linalg.cholesky(np.eye(2)), np.eye(2))
    assert np.allclose(linalg.cholesky(np.array([[4.0, 2.0], [2.0, 5.0]])), [[2, 0], [1, 2]])
    with pytest.raises(NotPositiveDefinite):
        linalg.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


@settings(max_examples=200)
@given(n=st.integers(1, 8), seed=st.integers(0, 2 ** 32 - 1), shift=st.floats(-3, 3))
def test_cholesky_iff_positive_definite(n, seed, shift):
    a = np.random.default_rng(seed).standard_normal((n, n))
    m = a @ a.T / n + shift * np.eye(n)
    lam_min = np.linalg.eigvalsh(m)[0]
    if lam_min > 1e-9 * np.linalg.norm(m):
        L = linalg.cholesky(m)
        assert np.allclose(L @ L.T, m, atol=1e-10 * (1 + np.linalg.norm(m)))
        assert np.allclose(L, np.tril(L))
    elif lam_min < -1e-9:
        with pytest.raises(NotPositiveDefinite):
            linalg.cholesky(m)


def test_solve_examples():
    b = np.array([3.0, -1.0])
    assert np.allclose(linalg.solve(np.eye(2), b), b)
    assert np.allclose(linalg.solve(np.diag([2.0, 4.0]), [2.0, 4.0]), [1, 1])
    with pytest.raises(SingularMatrix):
        linalg.solve(np.ones((2, 2)), b)


@given(n=st.integers(1, 10), seed=st.integers(0, 2 ** 32 - 1))
def test_solve_residual(n, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, n)) + n * np.eye(n)
    rhs = rng.standard_normal((n, 2))
    x = linalg.solve(m, rhs)
    assert np.linalg.norm(m @ x - rhs) <= 1e-9 * (1 + np.linalg.norm(rhs))
    assert np.allclose(linalg.inverse(m) @ m, np.eye(n), atol=1e-9)


def test_psd_project_examples():
    assert np.allclose(linalg.psd_project(np.diag([1.0, -1.0])), np.diag([1.0, 0.0]))
    assert np.allclose(linalg.psd_project(np.array([[0.0, 1.0], [1.0, 0.0]])), 0.5 * np.ones((2, 2)))
    p = np.array([[2.0, 1.0], [1.0, 2.0]])
    assert np.allclose(linalg.psd_project(p), p, atol=1e-10)


@given(arrays(np.float64, (5, 5), elements=st.floats(-10, 10)))
def test_psd_project_idempotent_and_psd(a):
    m = a + a.T
    p = linalg.psd_project(m)
    assert np.linalg.eigvalsh(p)[0] >= -1e-10 * (1 + np.linalg.norm(m))
    assert np.allclose(linalg.psd_project(p), p, atol=1e-9 * (1 + np.linalg.norm(m)))


def test_psd_project_is_nearest_on_samples():
    m = _sym(4, 11)
    p = linalg.psd_project(m)
    rng = np.random.default_rng(0)
    for _ in range(200):
        b = rng.standard_normal((4, 4))
        q = b @ b.T
        assert np.linalg.norm(m - p) <= np.linalg.norm(m - q) + 1e-12


@pytest.mark.parametrize("m, lam", [
    (np.diag([3.0, 1.0]), 3.0),
    (np.array([[2.0, 1.0], [1.0, 2.0]]), 3.0),
    (-np.eye(4), -1.0),
])
def test_max_eig_examples(m, lam):
    value, v = linalg.max_eig(m)
    assert value == pytest.approx(lam, abs=1e-12)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert np.linalg.norm(m @ v - value * v) <= 1e-9 * (1 + np.linalg.norm(m))


def test_condition_number():
    assert linalg.condition_number(np.diag([1.0, 10.0])) == pytest.approx(10.0)
