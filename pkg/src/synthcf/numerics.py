"""Dense linear-algebra helpers shared by preprocessing and the baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SvdFactors", "LassoResult", "svd", "lasso", "lasso_objective", "soft_threshold_svd", "rmse_masked"]


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``matrix = u @ diag(s) @ vt`` with ``s`` descending."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def v(self) -> np.ndarray:
        return self.vt.T

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        r = self.s.size if rank is None else rank
        return (self.u[:, :r] * self.s[:r]) @ self.vt[:r]


def svd(matrix) -> SvdFactors:
    """Thin SVD with a deterministic sign convention.

    Each left singular vector is flipped so that its largest-magnitude entry
    is non-negative (ties resolved by the first occurrence); the matching
    right vector is flipped with it.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"svd expects a 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input contains non-finite entries")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if u.size:
        pivot = u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])]
        sign = np.where(pivot < 0, -1.0, 1.0)
        u = u * sign
        vt = vt * sign[:, None]
    return SvdFactors(u, s, vt)


def soft_threshold_svd(matrix, lam: float) -> np.ndarray:
    """Proximal operator of ``lam * ||.||_*``: shrink every singular value by ``lam``."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    f = svd(matrix)
    s = np.maximum(f.s - lam, 0.0)
    keep = s > 0
    return (f.u[:, keep] * s[keep]) @ f.vt[keep]


@dataclass(frozen=True)
class LassoResult:
    weights: np.ndarray
    converged: bool
    iterations: int
    objective: float


def lasso_objective(design, response, weights, eta: float) -> float:
    r = response - design @ weights
    return float(r @ r + eta * np.abs(weights).sum())


def lasso(design, response, eta: float, tol: float = 1e-10, max_iter: int = 10_000) -> LassoResult:
    """Minimise ``||y - D b||^2 + eta * ||b||_1`` by cyclic coordinate descent.

    No intercept is fitted.  Convergence is declared when the largest
    coordinate change in a sweep falls below ``tol``; otherwise the last
    iterate is returned with ``converged=False``.
    """
    D = np.asarray(design, dtype=np.float64)
    y = np.asarray(response, dtype=np.float64)
    if eta < 0:
        raise ValueError("eta must be non-negative")
    n, p = D.shape
    if y.shape != (n,):
        raise ValueError(f"response shape {y.shape} does not match design rows {n}")
    col_sq = np.einsum("ij,ij->j", D, D)
    if eta == 0 and np.any(col_sq == 0):
        raise ValueError("all-zero design column with eta == 0 has no unique solution")
    b = np.zeros(p)
    r = y.copy()
    half_eta = 0.5 * eta
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        max_step = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            old = b[j]
            rho = D[:, j] @ r + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - half_eta, 0.0) / col_sq[j]
            if new != old:
                r -= D[:, j] * (new - old)
                b[j] = new
                max_step = max(max_step, abs(new - old))
        if max_step < tol:
            converged = True
            break
    return LassoResult(b, converged, it, lasso_objective(D, y, b, eta))


def rmse_masked(pred, truth, mask=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape:
        raise ValueError(f"mask shape {mask.shape} does not match {pred.shape}")
    if not mask.any():
        raise ValueError("rmse over an empty mask")
    diff = pred[mask] - truth[mask]
    return float(np.sqrt(np.mean(diff * diff)))
