"""Linear comparison estimators: Robust Synthetic Control and MC-NNM.

Both operate on the covariate of interest only, in original units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .estimate import CounterfactualEstimate
from .numerics import lasso, svd
from .panel import InterventionSpec, Panel, PanelError

__all__ = [
    "RscConfig",
    "McnnmConfig",
    "McnnmFit",
    "rsc_denoise",
    "rsc_estimate",
    "mcnnm_fit",
    "mcnnm_objective",
    "mcnnm_estimate",
    "select_mcnnm_lambda",
]

logger = logging.getLogger(__name__)


# -------------------------------------------------------------------------- RSC


@dataclass(frozen=True)
class RscConfig:
    """``rank`` (top-m singular values) takes precedence over ``mu`` when set."""

    mu: float = 0.0
    rank: int | None = None
    eta: float = 1.0
    tol: float = 1e-10
    max_iter: int = 20_000

    def __post_init__(self):
        if self.mu < 0 or self.eta < 0:
            raise ValueError("mu and eta must be non-negative")
        if self.rank is not None and self.rank < 1:
            raise ValueError("rank must be >= 1")


def rsc_denoise(donors: np.ndarray, observed: np.ndarray, mu: float = 0.0, rank: int | None = None) -> np.ndarray:
    """Hard-threshold the singular values of the zero-filled donor matrix.

    Keeps singular values ``>= mu`` (or the top ``rank``) and divides by
    ``max(1 - p_hat, 1 / (N * T))`` where ``p_hat`` is the missing fraction.
    """
    X = np.where(observed, donors, 0.0)
    N, T = X.shape
    p_hat = 1.0 - observed.mean()
    f = svd(X)
    keep = np.arange(f.s.size) < rank if rank is not None else f.s >= mu
    M = (f.u[:, keep] * f.s[keep]) @ f.vt[keep]
    return M / max(1.0 - p_hat, 1.0 / (N * T))


def rsc_estimate(panel: Panel, spec: InterventionSpec, config: RscConfig = RscConfig()) -> CounterfactualEstimate:
    spec.validate(panel)
    if spec.t0 < 2:
        raise PanelError("RSC needs at least two pre-intervention steps (t0 >= 2)")
    k, t0 = spec.covariate_of_interest, spec.t0
    donors = spec.donors(panel)
    M = rsc_denoise(panel.values[donors, :, k], panel.observed[donors, :, k], config.mu, config.rank)
    y_obs = panel.observed[spec.target_unit, :t0, k]
    y = panel.values[spec.target_unit, :t0, k][y_obs]
    fit = lasso(M[:, :t0].T[y_obs], y, config.eta, tol=config.tol, max_iter=config.max_iter)
    if not fit.converged:
        logger.warning("RSC lasso did not converge in %d sweeps", fit.iterations)
    pred = M[:, t0:].T @ fit.weights
    return CounterfactualEstimate(
        prediction=pred,
        time_labels=panel.time_labels[t0:],
        estimator="rsc",
        metadata={
            "converged": fit.converged,
            "weights": fit.weights.tolist(),
            "donor_labels": [panel.unit_labels[d] for d in donors],
            "mu": config.mu,
            "rank": config.rank,
            "eta": config.eta,
        },
    )


# ----------------------------------------------------------------------- MC-NNM


@dataclass(frozen=True)
class McnnmConfig:
    """``lam=None`` selects the penalty from ``lambda_grid`` by pre-period holdout."""

    lam: float | None = None
    tol: float = 1e-8
    max_iter: int = 2000
    fixed_effects: bool = True
    lambda_grid: tuple[float, ...] = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 1e-4)
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be non-negative")


@dataclass
class McnnmFit:
    low_rank: np.ndarray
    time_effects: np.ndarray
    unit_effects: np.ndarray
    objective_history: list[float]
    converged: bool

    @property
    def completed(self) -> np.ndarray:
        return self.low_rank + self.time_effects[:, None] + self.unit_effects[None, :]


def mcnnm_objective(Y, mask, L, tau, delta, lam: float) -> float:
    r = np.where(mask, Y - L - tau[:, None] - delta[None, :], 0.0)
    return float((r * r).sum() / mask.sum() + lam * np.linalg.svd(L, compute_uv=False).sum())


def _masked_mean(a: np.ndarray, mask: np.ndarray, axis: int) -> np.ndarray:
    n = mask.sum(axis=axis)
    s = np.where(mask, a, 0.0).sum(axis=axis)
    return np.divide(s, n, out=np.zeros_like(s), where=n > 0)


def mcnnm_fit(Y, mask, lam: float, tol: float = 1e-8, max_iter: int = 2000, fixed_effects: bool = True) -> McnnmFit:
    """Block-coordinate descent on ``|O|^-1 ||P_O(Y - L - tau 1' - 1 delta')||^2 + lam ||L||_*``.

    ``Y`` is ``T x U`` (time by unit).  Each sweep sets the time effects
    ``tau`` and unit effects ``delta`` to their exact minimisers, then takes a
    soft-impute step on ``L`` with threshold ``lam * |O| / 2``.  Every block
    update is a (majorised) minimisation, so the objective never increases.
    """
    Y = np.asarray(Y, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n_obs = mask.sum()
    if n_obs == 0:
        raise ValueError("no observed entries")
    T, U = Y.shape
    L = np.zeros_like(Y)
    tau = _masked_mean(Y, mask, axis=1) if fixed_effects else np.zeros(T)
    delta = np.zeros(U)
    threshold = lam * n_obs / 2.0
    history = [mcnnm_objective(Y, mask, L, tau, delta, lam)]
    converged = False
    for _ in range(max_iter):
        if fixed_effects:
            tau = _masked_mean(Y - L - delta[None, :], mask, axis=1)
            delta = _masked_mean(Y - L - tau[:, None], mask, axis=0)
        R = Y - tau[:, None] - delta[None, :]
        filled = np.where(mask, R, L)
        f = svd(filled)
        s = np.maximum(f.s - threshold, 0.0)
        L = (f.u * s) @ f.vt
        history.append(mcnnm_objective(Y, mask, L, tau, delta, lam))
        prev, cur = history[-2], history[-1]
        if abs(prev - cur) <= tol * max(abs(prev), 1e-12):
            converged = True
            break
    return McnnmFit(L, tau, delta, history, converged)


def _outcome_matrix(panel: Panel, spec: InterventionSpec) -> tuple[np.ndarray, np.ndarray]:
    k = spec.covariate_of_interest
    Y = panel.values[:, :, k].T.copy()
    mask = panel.observed[:, :, k].T.copy()
    mask[spec.t0:, spec.target_unit] = False
    Y[~mask] = 0.0
    return Y, mask


def select_mcnnm_lambda(panel: Panel, spec: InterventionSpec, config: McnnmConfig = McnnmConfig()) -> float:
    """Choose the penalty minimising error on the last pre-period steps of the target.

    Grid values are relative to ``2 * s_max(P_O(Y)) / |O|``, the smallest
    penalty at which ``L = 0`` is optimal.
    """
    Y, mask = _outcome_matrix(panel, spec)
    t0, j = spec.t0, spec.target_unit
    n_hold = max(1, int(round(config.holdout_fraction * t0)))
    fit_mask = mask.copy()
    fit_mask[t0 - n_hold:, j] = False
    hold = mask & ~fit_mask
    if not fit_mask[:, j].any() or not hold.any():
        raise PanelError("pre-period too short for MC-NNM penalty selection")
    lam_max = 2.0 * np.linalg.svd(np.where(fit_mask, Y, 0.0), compute_uv=False)[0] / fit_mask.sum()
    best, best_err = None, np.inf
    for rel in config.lambda_grid:
        lam = rel * lam_max
        fit = mcnnm_fit(Y, fit_mask, lam, config.tol, config.max_iter, config.fixed_effects)
        err = float(np.mean((fit.completed[hold] - Y[hold]) ** 2))
        if err < best_err:
            best, best_err = lam, err
    return best


def mcnnm_estimate(panel: Panel, spec: InterventionSpec, config: McnnmConfig = McnnmConfig()) -> CounterfactualEstimate:
    spec.validate(panel)
    Y, mask = _outcome_matrix(panel, spec)
    lam = config.lam if config.lam is not None else select_mcnnm_lambda(panel, spec, config)
    fit = mcnnm_fit(Y, mask, lam, config.tol, config.max_iter, config.fixed_effects)
    if not fit.converged:
        logger.warning("MC-NNM stopped after %d iterations without converging", config.max_iter)
    pred = fit.completed[spec.t0:, spec.target_unit]
    delta = fit.objective_history[-2] - fit.objective_history[-1] if len(fit.objective_history) > 1 else 0.0
    return CounterfactualEstimate(
        prediction=pred,
        time_labels=panel.time_labels[spec.t0:],
        estimator="mcnnm",
        metadata={
            "converged": fit.converged,
            "lambda": lam,
            "iterations": len(fit.objective_history) - 1,
            "final_objective": fit.objective_history[-1],
            "final_objective_delta": delta,
        },
    )
