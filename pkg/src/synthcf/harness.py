"""Experiment runner: replicated benchmarks, sweeps, scoring and CSV emission.

Replicate ``k`` of a run with master seed ``m`` uses ``replicate_seed(m, k)``
for both the synthetic panel and every estimator's training, so a single
replicate can be reproduced without running the ones before it.  The seed does
not depend on the sweep value: the cells of a sweep share random numbers.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .baselines import McnnmConfig, RscConfig, mcnnm_estimate, rsc_estimate
from .estimate import CounterfactualEstimate
from .inference import attention_report, generate_counterfactual
from .model import ModelConfig
from .numerics import rmse_masked
from .panel import (
    InterventionSpec,
    Panel,
    ScalingStats,
    apply_scaling,
    fit_scaling,
    impute_zeros,
    load_panel_csv,
    lowrank_denoise,
)
from .synthgen import SynthConfig, generate
from .training import TrainConfig, finetune, pretrain

__all__ = [
    "ExperimentConfig",
    "MetricsRecord",
    "MetricsTable",
    "ReplicateContext",
    "register_estimator",
    "registered_estimators",
    "replicate_seed",
    "preprocess",
    "spec_from_labels",
    "run_experiment",
    "sweep",
    "aggregate",
    "emit_plot_data",
    "METRICS_HEADER",
    "AGGREGATE_HEADER",
    "TRAJECTORY_HEADER",
    "ATTENTION_HEADER",
    "TIMINGS_HEADER",
    "OUTPUT_FILES",
]

logger = logging.getLogger(__name__)

CI_LEVEL = 0.90
_Z = statistics.NormalDist().inv_cdf(0.5 + CI_LEVEL / 2)
_MASK64 = (1 << 64) - 1

METRICS_HEADER = ("axis", "value", "replicate", "seed", "estimator", "status", "rmse", "converged", "error")
AGGREGATE_HEADER = ("axis", "value", "estimator", "mean_rmse", "ci_low", "ci_high", "n_ok", "n_failed")
TRAJECTORY_HEADER = ("axis", "value", "replicate", "estimator", "time", "truth", "prediction")
ATTENTION_HEADER = ("axis", "value", "replicate", "estimator", "donor", "time", "weight")
TIMINGS_HEADER = ("axis", "value", "replicate", "estimator", "seconds")
OUTPUT_FILES = ("metrics.csv", "aggregate.csv", "trajectories.csv", "attention.csv", "timings.csv")


def replicate_seed(master_seed: int, replicate: int) -> int:
    """splitmix64 output ``replicate + 1`` of the stream started at ``master_seed``."""
    z = (master_seed + (replicate + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; ``from_dict`` accepts the parsed config file.

    ``scenario`` is ``"synthetic"`` (panels drawn from ``synth``) or ``"panel"``
    (one CSV panel at ``panel_path``; replicates then only vary training seeds,
    and the target's observed post-period values serve as the truth).
    ``model`` holds ModelConfig fields other than the three panel dimensions.
    """

    scenario: str = "synthetic"
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: dict = field(default_factory=lambda: dict(num_layers=2, num_heads=1, hidden_dim=32, dropout_rate=0.0,
                                                      l_minus=10, l_plus=5))
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, warmup_steps=100,
                                                                      total_iterations=1000))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-4, warmup_steps=100,
                                                                      total_iterations=1000))
    denoise_rank: int | None = None
    rsc: RscConfig = field(default_factory=lambda: RscConfig(rank=5, eta=1.0, tol=1e-6))
    mcnnm: McnnmConfig = field(default_factory=McnnmConfig)
    estimators: tuple[str, ...] = ("transformer", "rsc", "mcnnm")
    replicates: int = 5
    master_seed: int = 0
    output_dir: str = "results"
    attention: bool = True
    panel_path: str | None = None
    schema: dict | None = None
    target_unit: str | None = None
    t0: str | int | None = None
    covariate: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.scenario not in ("synthetic", "panel"):
            raise ValueError(f"unknown scenario {self.scenario!r}; use 'synthetic' or 'panel'")
        if not self.estimators:
            raise ValueError("estimator list is empty")
        unknown = [e for e in self.estimators if e not in _REGISTRY]
        if unknown:
            raise ValueError(f"unregistered estimators {unknown}; known: {sorted(_REGISTRY)}")
        if self.scenario == "panel" and (self.panel_path is None or self.target_unit is None or self.t0 is None):
            raise ValueError("panel scenario needs panel_path, target_unit and t0")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        nested = {"synth": SynthConfig, "pretrain": TrainConfig, "finetune": TrainConfig, "rsc": RscConfig,
                  "mcnnm": McnnmConfig}
        base = cls()
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                sub = dict(d[key])
                if "theta" in sub and sub["theta"] is not None:
                    sub["theta"] = tuple(sub["theta"])
                if "lambda_grid" in sub:
                    sub["lambda_grid"] = tuple(sub["lambda_grid"])
                d[key] = replace(getattr(base, key), **sub)
        if "model" in d:
            d["model"] = {**base.model, **d["model"]}
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["estimators"] = list(self.estimators)
        return out


@dataclass
class MetricsRecord:
    estimator: str
    replicate: int
    seed: int
    rmse: float
    seconds: float
    converged: bool
    status: str = "ok"
    error: str = ""
    axis: str = "none"
    value: float | int | str = ""

    def __post_init__(self):
        if self.status == "ok" and not self.rmse >= 0:
            raise ValueError("successful records need a finite RMSE >= 0")


@dataclass
class MetricsTable:
    records: list[MetricsRecord] = field(default_factory=list)
    trajectories: list[tuple] = field(default_factory=list)
    attention: list[tuple] = field(default_factory=list)

    def extend(self, other: "MetricsTable") -> None:
        self.records.extend(other.records)
        self.trajectories.extend(other.trajectories)
        self.attention.extend(other.attention)

    def tag(self, axis: str, value) -> "MetricsTable":
        for r in self.records:
            r.axis, r.value = axis, value
        self.trajectories = [(axis, value) + row[2:] for row in self.trajectories]
        self.attention = [(axis, value) + row[2:] for row in self.attention]
        return self

    def rmse(self, estimator: str) -> np.ndarray:
        return np.array([r.rmse for r in self.records if r.estimator == estimator and r.status == "ok"])


# ---------------------------------------------------------------- estimators


@dataclass
class ReplicateContext:
    """Inputs handed to an estimator for one replicate.

    ``panel`` still contains the target's post-period values; estimators must
    use ``hidden`` (target post-period unobserved) or go through ``preprocess``.
    ``truth`` is exposed for diagnostic estimators only.
    """

    panel: Panel
    hidden: Panel
    spec: InterventionSpec
    truth: np.ndarray
    config: ExperimentConfig
    seed: int
    attention: dict = field(default_factory=dict)


Estimator = Callable[[ReplicateContext], CounterfactualEstimate]
_REGISTRY: dict[str, Estimator] = {}


def register_estimator(name: str, fn: Estimator, overwrite: bool = False) -> None:
    if name in _REGISTRY and not overwrite:
        raise ValueError(f"estimator {name!r} already registered")
    _REGISTRY[name] = fn


def registered_estimators() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def preprocess(panel: Panel, spec: InterventionSpec, denoise_rank: int | None = None,
               stats: ScalingStats | None = None) -> tuple[Panel, ScalingStats]:
    """Scale with pre-period statistics, zero-impute and optionally denoise donors.

    The target's post-period is hidden first, so nothing after ``t0`` leaks.
    Pass ``stats`` to reuse scaling fitted earlier (e.g. stored in a checkpoint).
    """
    hidden = panel.hide_target_post(spec)
    if stats is None:
        stats = fit_scaling(hidden, spec)
    out = impute_zeros(apply_scaling(hidden, stats))
    if denoise_rank:
        out = lowrank_denoise(out, denoise_rank, spec)
    return out, stats


def _transformer(ctx: ReplicateContext, pretrain_iterations: int | None = None) -> CounterfactualEstimate:
    cfg = ctx.config
    data, stats = preprocess(ctx.panel, ctx.spec, cfg.denoise_rank)
    U, T, K = data.shape
    model_cfg = ModelConfig(num_units=U, num_covariates=K, max_time=T, **cfg.model)
    pre_cfg = replace(cfg.pretrain, seed=ctx.seed)
    if pretrain_iterations is not None:
        pre_cfg = replace(pre_cfg, total_iterations=pretrain_iterations,
                          warmup_steps=min(pre_cfg.warmup_steps, pretrain_iterations))
    params, pre_log = pretrain(data, ctx.spec, model_cfg, pre_cfg)
    params, ft_log = finetune(params, data, ctx.spec, replace(cfg.finetune, seed=ctx.seed))
    meta = {
        "pretrain_iterations": pre_cfg.total_iterations,
        "finetune_iterations": cfg.finetune.total_iterations,
        "final_pretrain_loss": pre_log.losses[-1] if pre_log.losses else None,
        "final_finetune_loss": ft_log.losses[-1] if ft_log.losses else None,
    }
    est = generate_counterfactual(params, data, ctx.spec, stats, metadata=meta)
    if cfg.attention:
        ctx.attention["report"] = attention_report(params, data, ctx.spec)
    return est


def _transformer_nopretrain(ctx: ReplicateContext) -> CounterfactualEstimate:
    est = _transformer(ctx, pretrain_iterations=0)
    est.estimator = "transformer_nopretrain"
    return est


register_estimator("transformer", _transformer)
register_estimator("transformer_nopretrain", _transformer_nopretrain)
register_estimator("rsc", lambda ctx: rsc_estimate(ctx.hidden, ctx.spec, ctx.config.rsc))
register_estimator("mcnnm", lambda ctx: mcnnm_estimate(ctx.hidden, ctx.spec, ctx.config.mcnnm))


# ---------------------------------------------------------------- running


def _load_problem(config: ExperimentConfig, seed: int) -> tuple[Panel, InterventionSpec, np.ndarray, np.ndarray]:
    """Return (panel, spec, truth, truth mask) for one replicate."""
    if config.scenario == "synthetic":
        sp = generate(replace(config.synth, seed=seed))
        return sp.observed, sp.spec, sp.truth, np.ones(sp.truth.shape, dtype=bool)
    panel = load_panel_csv(config.panel_path, config.schema)
    spec = spec_from_labels(panel, config.target_unit, config.t0, config.covariate)
    k = spec.covariate_of_interest
    truth = np.where(panel.observed[spec.target_unit, spec.t0:, k], panel.values[spec.target_unit, spec.t0:, k], 0.0)
    return panel, spec, truth, panel.observed[spec.target_unit, spec.t0:, k].copy()


def spec_from_labels(panel: Panel, target_unit, t0, covariate=None) -> InterventionSpec:
    """Build an InterventionSpec from unit/time/covariate labels as they appear in the CSV."""
    def index(labels, value, what):
        for i, lab in enumerate(labels):
            if lab == value or str(lab) == str(value):
                return i
        raise ValueError(f"{what} {value!r} not found; available: {list(labels)[:10]}")

    k = 0 if covariate is None else index(panel.covariate_labels, covariate, "covariate")
    spec = InterventionSpec(index(panel.unit_labels, target_unit, "unit"), index(panel.time_labels, t0, "time"), k)
    spec.validate(panel)
    return spec


def run_experiment(config: ExperimentConfig) -> MetricsTable:
    """Run every estimator on every replicate; failures are recorded, not raised."""
    table = MetricsTable()
    for rep in range(config.replicates):
        seed = replicate_seed(config.master_seed, rep)
        panel, spec, truth, truth_mask = _load_problem(config, seed)
        hidden = panel.hide_target_post(spec)
        times = panel.time_labels[spec.t0:]
        for name in config.estimators:
            ctx = ReplicateContext(panel, hidden, spec, truth, config, seed)
            start = time.perf_counter()
            try:
                est = _REGISTRY[name](ctx)
                if est.prediction.shape != truth.shape:
                    raise ValueError(f"prediction length {est.prediction.size} != post-period {truth.size}")
                rmse = rmse_masked(est.prediction, truth, truth_mask)
            except Exception as exc:  # isolation: one estimator must not sink the others
                logger.warning("estimator %s failed on replicate %d: %s", name, rep, exc)
                table.records.append(MetricsRecord(name, rep, seed, math.nan, time.perf_counter() - start, False,
                                                   status="failed", error=f"{type(exc).__name__}: {exc}"))
                continue
            table.records.append(MetricsRecord(name, rep, seed, rmse, time.perf_counter() - start, est.converged))
            for t, y, p in zip(times, truth, est.prediction):
                table.trajectories.append(("none", "", rep, name, t, float(y), float(p)))
            report = ctx.attention.get("report")
            if report is not None:
                for d, row in zip(report.donor_labels, report.weights):
                    for t, w in zip(report.time_labels, row):
                        table.attention.append(("none", "", rep, name, d, t, float(w)))
    return table


def sweep(axis: str, values, base: ExperimentConfig) -> MetricsTable:
    """Run ``base`` once per value of ``axis`` ("noise" or "donor_pool").

    When the Transformer is listed the no-pretrain ablation arm is added.
    """
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if axis not in ("noise", "donor_pool"):
        raise ValueError(f"unknown sweep axis {axis!r}; use 'noise' or 'donor_pool'")
    if base.scenario != "synthetic":
        raise ValueError("sweeps need the synthetic scenario")
    estimators = base.estimators
    if "transformer" in estimators and "transformer_nopretrain" not in estimators:
        estimators = estimators + ("transformer_nopretrain",)
    table = MetricsTable()
    for v in values:
        synth = replace(base.synth, noise_variance=float(v)) if axis == "noise" else replace(base.synth, N=int(v))
        table.extend(run_experiment(replace(base, synth=synth, estimators=estimators)).tag(axis, v))
    return table


def aggregate(table: MetricsTable) -> list[tuple]:
    """Mean RMSE and normal-approximation 90% interval per (axis, value, estimator).

    Only successful replicates enter the mean; a cell with fewer than two has
    no interval (written as nan).
    """
    groups: dict[tuple, list[MetricsRecord]] = {}
    for r in table.records:
        groups.setdefault((r.axis, r.value, r.estimator), []).append(r)
    rows = []
    for (axis, value, name), recs in groups.items():
        ok = np.array([r.rmse for r in recs if r.status == "ok"])
        n = ok.size
        mean = float(ok.mean()) if n else math.nan
        half = _Z * float(ok.std(ddof=1)) / math.sqrt(n) if n > 1 else math.nan
        rows.append((axis, value, name, mean, mean - half, mean + half, n, len(recs) - n))
    return rows


# ---------------------------------------------------------------- output


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _write(path: Path, header: tuple, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(tuple(_fmt(x) for x in row))


def emit_plot_data(table: MetricsTable, out_dir: str | Path, config: ExperimentConfig | None = None) -> list[Path]:
    """Write the tidy CSVs listed in OUTPUT_FILES (plus config.json when given).

    Wall-clock seconds go to timings.csv only, so every other file is a pure
    function of the configuration and master seed.
    """
    if not table.records:
        raise ValueError("metrics table is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = table.records
    files = [out / f for f in OUTPUT_FILES]
    _write(files[0], METRICS_HEADER, ((r.axis, r.value, r.replicate, r.seed, r.estimator, r.status, r.rmse,
                                        r.converged, r.error) for r in recs))
    _write(files[1], AGGREGATE_HEADER, aggregate(table))
    _write(files[2], TRAJECTORY_HEADER, table.trajectories)
    _write(files[3], ATTENTION_HEADER, table.attention)
    _write(files[4], TIMINGS_HEADER, ((r.axis, r.value, r.replicate, r.estimator, r.seconds) for r in recs))
    if config is not None:
        path = out / "config.json"
        path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        files.append(path)
    return files
