"""Latent-factor synthetic panels with a known counterfactual.

Unit ``i`` gets a latent ``theta_i`` and time step ``j`` the latent
``rho_j = j`` (1-based, so column 0 has ``rho = 1``).  Covariate 0 is
:func:`mean_covariate_1`, covariate 1 is :func:`mean_covariate_2`; Gaussian
noise is added to every cell.

Random streams: ``SeedSequence(seed).spawn(N + 1)`` gives one PCG64 stream
per unit (unit 0 is the target).  Each stream first draws its unit's
``theta`` (unless thetas are supplied) and then its ``T x 2`` noise block, so
a unit's data does not depend on how many other units are generated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .panel import InterventionSpec, Panel

__all__ = ["SynthConfig", "SyntheticPanel", "mean_covariate_1", "mean_covariate_2", "generate"]


def mean_covariate_1(theta, rho, T: int):
    """Unit-scaled growth term plus two periodic components of ``rho`` (in degrees)."""
    if T <= 0:
        raise ValueError("T must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    f1 = np.mod(rho, 360.0)
    f2 = np.mod(rho, 180.0)
    deg = math.pi / 180.0
    out = (
        theta
        + (rho * theta / T) * np.exp(rho / T)
        + np.cos(2.0 * f1 * deg)
        + np.sin(f1 * deg)
        + np.cos(2.0 * f2 * deg)
        + np.sin(f2 * deg)
    )
    return out if out.ndim else float(out)


def mean_covariate_2(theta, rho, T: int):
    """Logistic surface in ``theta`` and ``rho / T`` with range (0, 10)."""
    if T <= 0:
        raise ValueError("T must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    out = 10.0 / (1.0 + np.exp(-theta - rho / T - 0.7 * theta * rho / T))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class SynthConfig:
    N: int = 10
    T: int = 400
    T0: int = 320
    noise_variance: float = 1.0
    seed: int = 0
    theta: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not 0 < self.T0 < self.T:
            raise ValueError("need 0 < T0 < T")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be >= 0")
        if self.theta is not None and len(self.theta) != self.N + 1:
            raise ValueError(f"theta needs N+1={self.N + 1} entries")


@dataclass(frozen=True)
class SyntheticPanel:
    mean: Panel
    observed: Panel
    truth: np.ndarray
    theta: np.ndarray
    spec: InterventionSpec


def generate(config: SynthConfig) -> SyntheticPanel:
    U, T = config.N + 1, config.T
    streams = [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(config.seed).spawn(U)]
    sigma = math.sqrt(config.noise_variance)
    rho = np.arange(1, T + 1, dtype=np.float64)
    theta = np.empty(U)
    noise = np.empty((U, T, 2))
    for u, rng in enumerate(streams):
        drawn = rng.uniform(0.0, 1.0)
        theta[u] = drawn if config.theta is None else config.theta[u]
        noise[u] = rng.standard_normal((T, 2)) * sigma
    mean = np.stack(
        [
            mean_covariate_1(theta[:, None], rho[None, :], T),
            mean_covariate_2(theta[:, None], rho[None, :], T),
        ],
        axis=-1,
    )
    obs = mean + noise if sigma > 0 else mean.copy()
    mask = np.ones(mean.shape, dtype=bool)
    units = ("target",) + tuple(f"donor{i}" for i in range(1, U))
    covs = ("f1", "f2")
    times = tuple(range(T))
    spec = InterventionSpec(target_unit=0, t0=config.T0, covariate_of_interest=0)
    return SyntheticPanel(
        mean=Panel(mean, mask, units, times, covs),
        observed=Panel(obs, mask, units, times, covs),
        truth=mean[0, config.T0:, 0].copy(),
        theta=theta,
        spec=spec,
    )
