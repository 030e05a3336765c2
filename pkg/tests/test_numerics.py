import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from synthcf.numerics import lasso, lasso_objective, rmse_masked, soft_threshold_svd, svd


def test_svd_identity_and_diagonal():
    np.testing.assert_allclose(svd(np.eye(3)).s, [1, 1, 1])
    np.testing.assert_allclose(svd(np.diag([3.0, 2.0, 1.0])).s, [3, 2, 1])


def test_svd_random_matches_gram_eigenvalues():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((6, 9))
    f = svd(a)
    assert np.linalg.norm(f.reconstruct() - a) / np.linalg.norm(a) < 1e-8
    # independent route: eigenvalues of A A^T are the squared singular values
    eig = np.sort(np.linalg.eigvalsh(a @ a.T))[::-1]
    np.testing.assert_allclose(f.s, np.sqrt(np.clip(eig, 0, None)), atol=1e-6)
    np.testing.assert_allclose(f.u.T @ f.u, np.eye(6), atol=1e-8)
    np.testing.assert_allclose(f.vt @ f.vt.T, np.eye(6), atol=1e-8)


def test_svd_sign_convention():
    rng = np.random.default_rng(0)
    f = svd(rng.standard_normal((5, 4)))
    pivots = f.u[np.argmax(np.abs(f.u), axis=0), np.arange(f.u.shape[1])]
    assert np.all(pivots >= 0)
    g = svd(-rng.standard_normal((5, 4)) * 0 + f.reconstruct())
    np.testing.assert_allclose(g.u, f.u, atol=1e-10)


def test_svd_rejects_non_finite():
    with pytest.raises(ValueError):
        svd(np.array([[1.0, np.nan]]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_svd_invariants(a):
    f = svd(a)
    assert np.all(np.diff(f.s) <= 1e-12)
    assert np.all(f.s >= 0)
    scale = max(np.linalg.norm(a), 1.0)
    assert np.linalg.norm(f.reconstruct() - a) <= 1e-8 * scale


def test_lasso_ols_limit():
    rng = np.random.default_rng(1)
    D = rng.standard_normal((4, 4)) + 3 * np.eye(4)
    y = rng.standard_normal(4)
    res = lasso(D, y, eta=0.0, tol=1e-14, max_iter=100_000)
    np.testing.assert_allclose(res.weights, np.linalg.solve(D, y), atol=1e-6)


def test_lasso_soft_threshold_on_identity():
    # orthonormal design: beta_j = sign(y_j) * max(|y_j| - eta/2, 0)
    res = lasso(np.eye(2), np.array([3.0, -1.0]), eta=2.0)
    np.testing.assert_allclose(res.weights, [2.0, 0.0], atol=1e-12)
    assert res.converged


def test_lasso_full_shrinkage():
    rng = np.random.default_rng(2)
    D = rng.standard_normal((20, 5))
    y = rng.standard_normal(20)
    eta = 2 * np.max(np.abs(D.T @ y))
    np.testing.assert_array_equal(lasso(D, y, eta).weights, 0.0)


def test_lasso_flags_non_convergence():
    rng = np.random.default_rng(2)
    D = rng.standard_normal((20, 5))
    D[:, 1] = D[:, 0] + 1e-3 * D[:, 1]
    res = lasso(D, rng.standard_normal(20), 1e-6, tol=1e-15, max_iter=3)
    assert not res.converged and res.iterations == 3


def test_lasso_objective_monotone_per_sweep():
    rng = np.random.default_rng(4)
    D = rng.standard_normal((30, 8))
    y = rng.standard_normal(30)
    objs = [lasso_objective(D, y, lasso(D, y, 0.5, tol=0, max_iter=k).weights, 0.5) for k in range(1, 15)]
    assert all(b <= a + 1e-12 for a, b in zip(objs, objs[1:]))


def test_soft_threshold_svd_cases():
    a = np.random.default_rng(5).standard_normal((4, 6))
    np.testing.assert_allclose(soft_threshold_svd(a, 0.0), a, atol=1e-10)
    np.testing.assert_array_equal(soft_threshold_svd(a, svd(a).s[0]), np.zeros_like(a))
    np.testing.assert_allclose(soft_threshold_svd(np.diag([5.0, 2.0]), 1.0), np.diag([4.0, 1.0]), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-10, 10)), st.floats(0, 20))
def test_soft_threshold_never_grows_spectrum(a, lam):
    s_in = np.linalg.svd(a, compute_uv=False)
    s_out = np.linalg.svd(soft_threshold_svd(a, lam), compute_uv=False)
    assert np.all(s_out <= s_in + 1e-9)
    assert s_out.sum() <= s_in.sum() + 1e-9


def test_rmse_masked():
    assert rmse_masked([1, 2], [1, 2], [True, True]) == 0.0
    assert rmse_masked([3, 4], [0, 0], [True, True]) == pytest.approx(np.sqrt(12.5))
    assert rmse_masked([3, 4, 1e9], [0, 0, 0], [True, True, False]) == rmse_masked([3, 4], [0, 0], [True, True])
    with pytest.raises(ValueError):
        rmse_masked([1.0], [1.0], [False])
