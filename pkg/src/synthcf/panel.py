"""Panel data container and the preprocessing chain applied before estimation.

A panel is a dense ``(units, time, covariates)`` array paired with a boolean
``observed`` mask of the same shape.  Missing cells carry arbitrary values in
``values``; every consumer must consult ``observed``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import svd

__all__ = [
    "Panel",
    "InterventionSpec",
    "ScalingStats",
    "PanelError",
    "load_panel_csv",
    "write_panel_csv",
    "fit_scaling",
    "apply_scaling",
    "invert_scaling",
    "scale_series",
    "impute_zeros",
    "lowrank_denoise",
    "split_pre_post",
]

CSV_HEADER = ("unit", "time", "covariate", "value")


class PanelError(ValueError):
    """Raised for malformed panels, files, or out-of-range windows."""


@dataclass(frozen=True)
class Panel:
    values: np.ndarray
    observed: np.ndarray
    unit_labels: tuple = ()
    time_labels: tuple = ()
    covariate_labels: tuple = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        observed = np.asarray(self.observed, dtype=bool)
        if values.ndim != 3:
            raise PanelError(f"values must be 3-d (units, time, covariates), got shape {values.shape}")
        if observed.shape != values.shape:
            raise PanelError(f"observed mask shape {observed.shape} != values shape {values.shape}")
        U, T, K = values.shape
        if U < 2 or T < 2 or K < 1:
            raise PanelError(f"panel needs U>=2, T>=2, K>=1; got U={U}, T={T}, K={K}")
        if not np.all(np.isfinite(values[observed])):
            raise PanelError("values must be finite wherever observed is true")
        labels = {
            "unit_labels": self.unit_labels or tuple(str(u) for u in range(U)),
            "time_labels": self.time_labels or tuple(range(T)),
            "covariate_labels": self.covariate_labels or tuple(f"x{k}" for k in range(K)),
        }
        for (name, lab), n in zip(labels.items(), (U, T, K)):
            lab = tuple(lab)
            if len(lab) != n:
                raise PanelError(f"{name} has {len(lab)} entries, expected {n}")
            if len(set(lab)) != n:
                raise PanelError(f"{name} contains duplicates")
            object.__setattr__(self, name, lab)
        values = values.copy()
        observed = observed.copy()
        values.flags.writeable = False
        observed.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "observed", observed)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def num_units(self) -> int:
        return self.values.shape[0]

    @property
    def num_times(self) -> int:
        return self.values.shape[1]

    @property
    def num_covariates(self) -> int:
        return self.values.shape[2]

    def with_values(self, values: np.ndarray, observed: np.ndarray | None = None) -> "Panel":
        return replace(self, values=values, observed=self.observed if observed is None else observed)

    def hide_target_post(self, spec: "InterventionSpec") -> "Panel":
        """Mark the target's post-intervention cells as unobserved."""
        observed = self.observed.copy()
        observed[spec.target_unit, spec.t0:, :] = False
        values = self.values.copy()
        values[spec.target_unit, spec.t0:, :] = 0.0
        return self.with_values(values, observed)


@dataclass(frozen=True)
class InterventionSpec:
    target_unit: int
    t0: int
    covariate_of_interest: int = 0

    def validate(self, panel: Panel) -> None:
        U, T, K = panel.shape
        if not 0 <= self.target_unit < U:
            raise PanelError(f"target_unit {self.target_unit} outside [0, {U})")
        if not 1 <= self.t0 <= T - 1:
            raise PanelError(f"t0 {self.t0} outside [1, {T - 1}]")
        if not 0 <= self.covariate_of_interest < K:
            raise PanelError(f"covariate_of_interest {self.covariate_of_interest} outside [0, {K})")

    def donors(self, panel: Panel) -> np.ndarray:
        return np.array([u for u in range(panel.num_units) if u != self.target_unit], dtype=np.int64)


@dataclass(frozen=True)
class ScalingStats:
    minimum: np.ndarray
    maximum: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        lo = np.asarray(self.minimum, dtype=np.float64)
        hi = np.asarray(self.maximum, dtype=np.float64)
        if np.any(hi < lo):
            raise PanelError("scaling maximum below minimum")
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)
        object.__setattr__(self, "degenerate", hi == lo)

    def to_dict(self) -> dict:
        return {"minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingStats":
        return cls(np.array(d["minimum"], dtype=np.float64), np.array(d["maximum"], dtype=np.float64))


# --------------------------------------------------------------------------- io


def _time_sort_key(label: str):
    try:
        return (0, float(label))
    except ValueError:
        raise PanelError(f"time label {label!r} does not sort numerically") from None


def load_panel_csv(path: str | Path, schema: dict[str, str] | None = None) -> Panel:
    """Read a long-format ``unit,time,covariate,value`` CSV into a :class:`Panel`.

    ``schema`` maps the canonical column names to the file's own header names.
    Units keep their order of first appearance; times are sorted numerically;
    covariates keep first-appearance order.  Empty ``value`` cells, and any
    (unit, time, covariate) triple absent from the file, become unobserved.
    """
    schema = {name: name for name in CSV_HEADER} | dict(schema or {})
    path = Path(path)
    units: dict[str, int] = {}
    times: dict[str, None] = {}
    covs: dict[str, int] = {}
    cells: dict[tuple[str, str, str], float | None] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [schema[c] for c in CSV_HEADER if schema[c] not in (reader.fieldnames or ())]
        if missing:
            raise PanelError(f"{path}: missing columns {missing}")
        for row_no, row in enumerate(reader, start=2):
            u, t, k = row[schema["unit"]], row[schema["time"]], row[schema["covariate"]]
            raw = (row[schema["value"]] or "").strip()
            key = (u, t, k)
            if key in cells:
                raise PanelError(f"{path}: row {row_no}: duplicate (unit, time, covariate) {key}")
            if raw == "":
                value = None
            else:
                try:
                    value = float(raw)
                except ValueError:
                    raise PanelError(f"{path}: row {row_no}: cannot parse value {raw!r}") from None
                if not np.isfinite(value):
                    raise PanelError(f"{path}: row {row_no}: non-finite value {raw!r}")
            cells[key] = value
            units.setdefault(u, len(units))
            times.setdefault(t, None)
            covs.setdefault(k, len(covs))
    time_order = sorted(times, key=_time_sort_key)
    time_index = {t: i for i, t in enumerate(time_order)}
    values = np.zeros((len(units), len(time_order), len(covs)))
    observed = np.zeros(values.shape, dtype=bool)
    for (u, t, k), v in cells.items():
        if v is not None:
            idx = (units[u], time_index[t], covs[k])
            values[idx] = v
            observed[idx] = True
    return Panel(
        values,
        observed,
        unit_labels=tuple(units),
        time_labels=tuple(_parse_time(t) for t in time_order),
        covariate_labels=tuple(covs),
    )


def _parse_time(label: str):
    f = float(label)
    return int(f) if f.is_integer() and "." not in label else f


def write_panel_csv(panel: Panel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for u, ul in enumerate(panel.unit_labels):
            for t, tl in enumerate(panel.time_labels):
                for k, kl in enumerate(panel.covariate_labels):
                    v = repr(float(panel.values[u, t, k])) if panel.observed[u, t, k] else ""
                    writer.writerow((ul, tl, kl, v))
    return path


# ---------------------------------------------------------------------- scaling


def _fitting_region(panel: Panel, spec: InterventionSpec) -> np.ndarray:
    region = panel.observed.copy()
    region[spec.target_unit, spec.t0:, :] = False
    return region


def fit_scaling(panel: Panel, spec: InterventionSpec) -> ScalingStats:
    """Per-covariate min/max over donors (all times) and the target before ``t0``."""
    spec.validate(panel)
    region = _fitting_region(panel, spec)
    K = panel.num_covariates
    lo, hi = np.empty(K), np.empty(K)
    for k in range(K):
        vals = panel.values[:, :, k][region[:, :, k]]
        if vals.size == 0:
            raise PanelError(f"covariate {panel.covariate_labels[k]!r} has no observed entries in the fitting region")
        lo[k], hi[k] = vals.min(), vals.max()
    return ScalingStats(lo, hi)


def scale_series(series, stats: ScalingStats, covariate: int) -> np.ndarray:
    series = np.asarray(series, dtype=np.float64)
    if stats.degenerate[covariate]:
        return np.full_like(series, 0.5)
    lo, hi = stats.minimum[covariate], stats.maximum[covariate]
    return (series - lo) / (hi - lo)


def apply_scaling(panel: Panel, stats: ScalingStats) -> Panel:
    """Map each covariate to [0, 1] over the fitting region; degenerate ones become 0.5."""
    lo, hi = stats.minimum, stats.maximum
    span = np.where(stats.degenerate, 1.0, hi - lo)
    scaled = (panel.values - lo) / span
    scaled = np.where(stats.degenerate, 0.5, scaled)
    scaled = np.where(panel.observed, scaled, panel.values)
    return panel.with_values(scaled)


def invert_scaling(series, stats: ScalingStats, covariate: int) -> np.ndarray:
    series = np.asarray(series, dtype=np.float64)
    lo, hi = stats.minimum[covariate], stats.maximum[covariate]
    if stats.degenerate[covariate]:
        return np.full_like(series, lo)
    return series * (hi - lo) + lo


def impute_zeros(panel: Panel) -> Panel:
    return panel.with_values(np.where(panel.observed, panel.values, 0.0))


# -------------------------------------------------------------------- denoising


def lowrank_denoise(
    panel: Panel,
    m: int,
    spec: InterventionSpec | None = None,
    donors: Sequence[int] | None = None,
) -> Panel:
    """Replace the donor sub-tensor by its best rank-``m`` approximation.

    Donors (every unit except ``spec.target_unit``, or the explicit ``donors``
    list; unit 0 is taken as the target when neither is given) are flattened
    to ``N x (T*K)``, truncated via SVD, and reshaped back.  The target is
    copied through untouched.
    """
    U, T, K = panel.shape
    if donors is None:
        target = 0 if spec is None else spec.target_unit
        donors = [u for u in range(U) if u != target]
    donors = np.asarray(donors, dtype=np.int64)
    N = donors.size
    if not 1 <= m <= min(N, T * K):
        raise PanelError(f"rank m={m} outside [1, {min(N, T * K)}]")
    flat = panel.values[donors].reshape(N, T * K)
    f = svd(flat)
    approx = (f.u[:, :m] * f.s[:m]) @ f.vt[:m]
    values = panel.values.copy()
    values[donors] = approx.reshape(N, T, K)
    return panel.with_values(values)


# -------------------------------------------------------------------- windowing


def split_pre_post(
    panel: Panel | np.ndarray,
    spec: InterventionSpec | None,
    l_minus: int,
    l_plus: int,
    anchor: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Z_pre, Z_post)`` with shapes ``(U, l_minus, K)`` and ``(U, l_plus, K)``.

    ``Z_pre`` ends at ``anchor - 1``; ``Z_post`` starts at ``anchor``.
    """
    values = panel.values if isinstance(panel, Panel) else np.asarray(panel)
    T = values.shape[1]
    if anchor - l_minus < 0:
        raise PanelError(f"window overflow: anchor - l_minus = {anchor - l_minus} < 0")
    if anchor + l_plus > T:
        raise PanelError(f"window overflow: anchor + l_plus = {anchor + l_plus} > T = {T}")
    return values[:, anchor - l_minus:anchor, :].copy(), values[:, anchor:anchor + l_plus, :].copy()
