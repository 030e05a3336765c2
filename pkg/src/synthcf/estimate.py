"""Counterfactual estimate record and its CSV/JSON serialisation.

Shared by the Transformer inference path and the linear baselines so every
estimator writes the same ``time,predicted_value`` file plus a JSON sidecar.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["CounterfactualEstimate", "write_estimate", "read_estimate"]

ESTIMATE_HEADER = ("time", "predicted_value")


@dataclass
class CounterfactualEstimate:
    prediction: np.ndarray
    time_labels: tuple
    estimator: str
    scaled: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prediction = np.asarray(self.prediction, dtype=np.float64)
        self.time_labels = tuple(self.time_labels)
        if self.prediction.ndim != 1 or self.prediction.size != len(self.time_labels):
            raise ValueError("prediction must be 1-d and aligned with time_labels")
        if not np.all(np.isfinite(self.prediction)):
            raise ValueError("prediction contains non-finite values")

    @property
    def converged(self) -> bool:
        return bool(self.metadata.get("converged", True))


def write_estimate(estimate: CounterfactualEstimate, path: str | Path) -> tuple[Path, Path]:
    """Write ``path`` (CSV) and ``path`` with a ``.json`` suffix (metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ESTIMATE_HEADER)
        for t, v in zip(estimate.time_labels, estimate.prediction):
            writer.writerow((t, repr(float(v))))
    meta = {"estimator": estimate.estimator, **estimate.metadata}
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    return path, sidecar


def read_estimate(path: str | Path) -> CounterfactualEstimate:
    path = Path(path)
    times, preds = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            t = row["time"]
            times.append(int(t) if t.lstrip("-").isdigit() else t)
            preds.append(float(row["predicted_value"]))
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    name = meta.pop("estimator", "unknown")
    return CounterfactualEstimate(np.array(preds), tuple(times), name, metadata=meta)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
