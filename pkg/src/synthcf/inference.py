"""Sliding-window autoregressive generation and the donor attention report."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .estimate import CounterfactualEstimate
from .model import ForwardTrace, Parameters, build_decoder_mask, decoder_forward, encoder_forward, extract_attention, tokenize
from .panel import InterventionSpec, Panel, PanelError, ScalingStats, invert_scaling
from .training import decoder_inputs

__all__ = ["AttentionReport", "generate_counterfactual", "attention_report", "write_attention_csv", "read_attention_csv"]


@dataclass
class AttentionReport:
    weights: np.ndarray
    donor_labels: tuple
    time_labels: tuple

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.donor_labels), len(self.time_labels)):
            raise ValueError("attention matrix shape does not match labels")


def _generate(params: Parameters, panel: Panel, spec: InterventionSpec, capture: bool):
    spec.validate(panel)
    cfg = params.config
    l_minus, l_plus = cfg.l_minus, cfg.l_plus
    U, T, K = panel.shape
    t0, target = spec.t0, spec.target_unit
    if t0 < l_minus:
        raise PanelError(f"t0={t0} < l_minus={l_minus}; pad the panel or use a smaller pre-window")
    work = np.array(panel.values, copy=True)
    work[target, t0:] = 0.0
    donors = spec.donors(panel)
    attn = np.zeros((donors.size, T - t0)) if capture else None
    dtype = params.dtype
    anchor = t0
    with torch.no_grad():
        while anchor < T:
            block = min(l_plus, T - anchor)
            pre = torch.tensor(work[:, anchor - l_minus:anchor], dtype=dtype)
            memory = encoder_forward(tokenize(pre, anchor - l_minus, target, params), params)
            for j in range(block):
                post = decoder_inputs(work[:, anchor - l_minus:anchor], work[:, anchor:anchor + j + 1], target)
                tokens = tokenize(torch.tensor(post, dtype=dtype), anchor, target, params)
                trace = ForwardTrace(num_units=U, target_unit=np.array([target])) if capture else None
                z = decoder_forward(tokens, memory, build_decoder_mask(U, j + 1), params, trace=trace)
                h = z.view(j + 1, U, -1)[j, target]
                work[target, anchor + j] = (h @ params["W_d"]).numpy()
                if capture:
                    attn[:, anchor + j - t0] = extract_attention(trace)[:, j]
            anchor += block
    return work[target, t0:].copy(), attn


def generate_counterfactual(params: Parameters, panel: Panel, spec: InterventionSpec,
                            stats: ScalingStats | None = None, metadata: dict | None = None
                            ) -> CounterfactualEstimate:
    """Generate the target's trajectory for ``t >= t0``, one step at a time.

    ``panel`` must be preprocessed with the same scaling used for training.
    Each block of ``l_plus`` steps is decoded autoregressively from the
    previous ``l_minus`` steps; generated target values replace the target's
    history for later blocks while donors always use their own data.  With
    ``stats`` the covariate of interest is mapped back to original units.
    """
    scaled, _ = _generate(params, panel, spec, capture=False)
    k = spec.covariate_of_interest
    pred = invert_scaling(scaled[:, k], stats, k) if stats is not None else scaled[:, k].copy()
    donors = spec.donors(panel)
    missing_post = int((~panel.observed[donors, spec.t0:]).sum())
    meta = {
        "l_minus": params.config.l_minus,
        "l_plus": params.config.l_plus,
        "t0": spec.t0,
        "target_unit": panel.unit_labels[spec.target_unit],
        "covariate": panel.covariate_labels[k],
        "original_scale": stats is not None,
        "donor_missing_post_cells": missing_post,
        "converged": True,
    }
    meta.update(metadata or {})
    return CounterfactualEstimate(pred, panel.time_labels[spec.t0:], "transformer", scaled=scaled, metadata=meta)


def attention_report(params: Parameters, panel: Panel, spec: InterventionSpec) -> AttentionReport:
    """Final-layer decoder attention from each generated target token to every donor."""
    _, attn = _generate(params, panel, spec, capture=True)
    donors = spec.donors(panel)
    return AttentionReport(attn, tuple(panel.unit_labels[d] for d in donors), panel.time_labels[spec.t0:])


def write_attention_csv(report: AttentionReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("donor",) + tuple(report.time_labels))
        for label, row in zip(report.donor_labels, report.weights):
            w.writerow((label,) + tuple(repr(float(x)) for x in row))
    return path


def read_attention_csv(path: str | Path) -> AttentionReport:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    times = tuple(int(t) if t.lstrip("-").isdigit() else t for t in rows[0][1:])
    labels = tuple(r[0] for r in rows[1:])
    weights = np.array([[float(x) for x in r[1:]] for r in rows[1:]]).reshape(len(labels), len(times))
    return AttentionReport(weights, labels, times)
