"""Window sampling, teacher-forced loss, AdamW, and the pre-train / fine-tune loops.

Pre-training draws a donor as a pseudo-target and a pseudo-intervention
anchor anywhere in the panel; the true target unit never enters.
Fine-tuning always predicts the true target and restricts anchors so the
whole supervised window lies before the intervention.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .model import ModelConfig, Parameters, forward, init_parameters, is_embedding, is_norm
from .panel import InterventionSpec, Panel, PanelError

__all__ = [
    "TrainConfig",
    "TrainingWindow",
    "WindowBatch",
    "TrainLog",
    "AdamState",
    "TrainingError",
    "decoder_inputs",
    "training_loss",
    "batch_loss",
    "compute_gradients",
    "learning_rate_at",
    "adam_step",
    "sample_pretrain_window",
    "sample_finetune_window",
    "pretrain",
    "finetune",
]

logger = logging.getLogger(__name__)

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    total_iterations: int = 1000
    batch_size: int = 16
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.total_iterations < 0 or self.warmup_steps < 0 or self.batch_size < 1:
            raise ValueError("iterations and warmup must be >= 0, batch_size >= 1")
        if self.warmup_steps > self.total_iterations:
            raise ValueError("warmup_steps exceeds total_iterations")


@dataclass(frozen=True)
class TrainingWindow:
    """One supervised pseudo-intervention example.

    ``unit_ids`` lists the panel units in window order; ``target_pos`` is the
    pseudo-target's position in that order.  ``spatial_ids`` selects the
    spatial-embedding rows and defaults to ``unit_ids``.
    """

    unit_ids: np.ndarray
    target_pos: int
    anchor: int
    pre: np.ndarray
    post: np.ndarray
    loss_mask: np.ndarray
    spatial_ids: np.ndarray | None = None

    def __post_init__(self):
        if self.spatial_ids is None:
            object.__setattr__(self, "spatial_ids", self.unit_ids)

    @property
    def pseudo_target(self) -> int:
        return int(self.unit_ids[self.target_pos])

    @property
    def truth(self) -> np.ndarray:
        return self.post[self.target_pos]

    def decoder_input(self) -> np.ndarray:
        return decoder_inputs(self.pre, self.post, self.target_pos)


def decoder_inputs(pre: np.ndarray, post: np.ndarray, target_pos: int) -> np.ndarray:
    """Shift the target row right by one step so step ``t`` sees truth from steps ``< t`` only.

    The first decoder step receives the last pre-window value; donor rows are
    left as observed at their own time step.
    """
    out = np.array(post, copy=True)
    out[target_pos, 0] = pre[target_pos, -1]
    out[target_pos, 1:] = post[target_pos, :-1]
    return out


def _window(values, observed, unit_ids, target_pos, anchor, l_minus, l_plus, spatial_ids=None) -> TrainingWindow:
    sub = values[unit_ids]
    return TrainingWindow(
        unit_ids=np.asarray(unit_ids, dtype=np.int64),
        target_pos=int(target_pos),
        anchor=int(anchor),
        pre=sub[:, anchor - l_minus:anchor].copy(),
        post=sub[:, anchor:anchor + l_plus].copy(),
        loss_mask=observed[unit_ids[target_pos], anchor:anchor + l_plus].copy(),
        spatial_ids=None if spatial_ids is None else np.asarray(spatial_ids, dtype=np.int64),
    )


def sample_pretrain_window(panel: Panel, donors: Sequence[int], l_minus: int, l_plus: int,
                           rng: np.random.Generator, target_slot: int | None = None) -> TrainingWindow:
    """Uniform pseudo-target among ``donors`` and uniform anchor in ``[l_minus, T - l_plus]``.

    With ``target_slot`` the pseudo-target takes that spatial-embedding row
    (the real target's) instead of its own, so the model cannot recognise
    which donor it is predicting.
    """
    T = panel.num_times
    if T < l_minus + l_plus:
        raise PanelError(f"no valid anchor: T={T} < l_minus + l_plus = {l_minus + l_plus}")
    donors = np.asarray(donors, dtype=np.int64)
    if donors.size < 1:
        raise PanelError("pre-training needs at least one donor")
    i = int(rng.integers(donors.size))
    anchor = int(rng.integers(l_minus, T - l_plus + 1))
    spatial = None
    if target_slot is not None:
        spatial = donors.copy()
        spatial[i] = target_slot
    return _window(panel.values, panel.observed, donors, i, anchor, l_minus, l_plus, spatial)


def sample_finetune_window(panel: Panel, spec: InterventionSpec, l_minus: int, l_plus: int,
                           rng: np.random.Generator) -> TrainingWindow:
    """Anchor uniform in ``[l_minus, t0 - l_plus]``; the true target is always predicted."""
    if spec.t0 < l_minus + l_plus:
        raise PanelError(
            f"t0={spec.t0} < l_minus + l_plus = {l_minus + l_plus}; use smaller windows for fine-tuning"
        )
    anchor = int(rng.integers(l_minus, spec.t0 - l_plus + 1))
    units = np.arange(panel.num_units)
    return _window(panel.values, panel.observed, units, spec.target_unit, anchor, l_minus, l_plus)


# ---------------------------------------------------------------------- loss


def training_loss(pred, truth, loss_mask) -> tuple[torch.Tensor, bool]:
    """Masked mean squared error; returns ``(loss, skipped)`` with ``skipped`` when no entry counts."""
    truth = torch.as_tensor(truth, dtype=pred.dtype)
    mask = torch.as_tensor(loss_mask, dtype=torch.bool)
    n = int(mask.sum())
    if n == 0:
        return pred.sum() * 0.0, True
    diff = torch.where(mask, pred - truth, torch.zeros((), dtype=pred.dtype))
    return (diff * diff).sum() / n, False


@dataclass
class WindowBatch:
    pre: torch.Tensor
    post_in: torch.Tensor
    truth: torch.Tensor
    mask: torch.Tensor
    unit_ids: torch.Tensor
    target_pos: torch.Tensor
    anchor: torch.Tensor

    @classmethod
    def stack(cls, windows: Sequence[TrainingWindow], dtype=torch.float32) -> "WindowBatch":
        def t(xs):
            return torch.tensor(np.stack(xs), dtype=dtype)

        return cls(
            pre=t([w.pre for w in windows]),
            post_in=t([w.decoder_input() for w in windows]),
            truth=t([w.truth for w in windows]),
            mask=torch.tensor(np.stack([w.loss_mask for w in windows])),
            unit_ids=torch.tensor(np.stack([w.spatial_ids for w in windows])),
            target_pos=torch.tensor([w.target_pos for w in windows]),
            anchor=torch.tensor([w.anchor for w in windows]),
        )


def batch_loss(batch: WindowBatch, params: Parameters, training: bool = True,
               generator: torch.Generator | None = None) -> tuple[torch.Tensor, int]:
    """Mean of per-window masked MSEs over windows with at least one observed entry."""
    pred = forward(batch.pre, batch.post_in, batch.target_pos, batch.anchor, params, training=training,
                   unit_ids=batch.unit_ids, generator=generator)
    mask = batch.mask
    counts = mask.flatten(1).sum(dim=1)
    diff = torch.where(mask, pred - batch.truth, torch.zeros((), dtype=pred.dtype))
    per_window = (diff * diff).flatten(1).sum(dim=1) / counts.clamp(min=1)
    used = counts > 0
    n_used = int(used.sum())
    if n_used == 0:
        return pred.sum() * 0.0, 0
    return per_window[used].sum() / n_used, n_used


def compute_gradients(windows: TrainingWindow | Sequence[TrainingWindow], params: Parameters,
                      training: bool = False, generator: torch.Generator | None = None
                      ) -> tuple[float, dict[str, torch.Tensor]]:
    """Teacher-forced loss and its exact reverse-mode gradient for every parameter."""
    if isinstance(windows, TrainingWindow):
        windows = [windows]
    batch = WindowBatch.stack(windows, dtype=params.dtype)
    names = list(params)
    leaves = [params[n] for n in names]
    for p in leaves:
        p.requires_grad_(True)
    try:
        loss, _ = batch_loss(batch, params, training=training, generator=generator)
        grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    finally:
        for p in leaves:
            p.requires_grad_(False)
    out = {}
    for n, p, g in zip(names, leaves, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {n!r}")
        out[n] = g
    return float(loss.detach()), out


# ----------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def learning_rate_at(step: int, config: TrainConfig) -> float:
    """Linear warm-up to the base rate, then linear decay to zero at ``total_iterations``."""
    warm = 1.0 if config.warmup_steps == 0 else min(step / config.warmup_steps, 1.0)
    if step <= config.warmup_steps or config.total_iterations == config.warmup_steps:
        decay = 1.0
    else:
        decay = max(0.0, (config.total_iterations - step) / (config.total_iterations - config.warmup_steps))
    return config.learning_rate * warm * decay


def decays(name: str) -> bool:
    return not (is_embedding(name) or is_norm(name))


@torch.no_grad()
def adam_step(params: Parameters, grads: dict[str, torch.Tensor], state: AdamState, step: int,
              config: TrainConfig) -> float:
    """In-place AdamW update (decoupled weight decay); returns the learning rate used.

    Parameters missing from ``grads`` are left untouched.
    """
    lr = learning_rate_at(step, config)
    state.step = step
    bc1 = 1.0 - BETA1 ** step
    bc2 = 1.0 - BETA2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(BETA1).add_(g, alpha=1.0 - BETA1)
        v.mul_(BETA2).addcmul_(g, g, value=1.0 - BETA2)
        update = (m / bc1) / ((v / bc2).sqrt() + EPS)
        if config.weight_decay and decays(name):
            p.mul_(1.0 - lr * config.weight_decay)
        p.sub_(lr * update)
    return lr


# --------------------------------------------------------------------- loops


@dataclass
class TrainLog:
    iterations: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)

    def append(self, it: int, loss: float, lr: float) -> None:
        self.iterations.append(it)
        self.losses.append(loss)
        self.learning_rates.append(lr)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("iteration", "loss", "learning_rate"))
            for row in zip(self.iterations, self.losses, self.learning_rates):
                w.writerow((row[0], repr(row[1]), repr(row[2])))
        return path


def _run(params: Parameters, sampler: Callable[[np.random.Generator], TrainingWindow], config: TrainConfig,
         label: str, seed_offset: int, frozen: Sequence[str] = ()) -> tuple[Parameters, TrainLog]:
    params = params.clone()
    unknown = set(frozen) - set(params)
    if unknown:
        raise TrainingError(f"cannot freeze unknown parameters {sorted(unknown)}")
    rng = np.random.Generator(np.random.PCG64([config.seed, seed_offset]))
    gen = torch.Generator().manual_seed(int(np.random.SeedSequence([config.seed, seed_offset, 1]).generate_state(1)[0]))
    state = AdamState()
    log = TrainLog()
    names = [n for n in params if n not in frozen]
    leaves = [params[n] for n in names]
    for it in range(1, config.total_iterations + 1):
        batch = WindowBatch.stack([sampler(rng) for _ in range(config.batch_size)], dtype=params.dtype)
        for p in leaves:
            p.requires_grad_(True)
        loss, n_used = batch_loss(batch, params, training=True, generator=gen)
        if n_used == 0:
            for p in leaves:
                p.requires_grad_(False)
            log.append(it, 0.0, 0.0)
            continue
        grads = torch.autograd.grad(loss, leaves, allow_unused=True)
        for p in leaves:
            p.requires_grad_(False)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(f"{label}: non-finite loss at iteration {it}")
        gdict = {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, leaves, grads)}
        if config.grad_clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in gdict.values()))
            if norm > config.grad_clip:
                gdict = {n: g * (config.grad_clip / norm) for n, g in gdict.items()}
        lr = adam_step(params, gdict, state, it, config)
        log.append(it, value, lr)
        if it % max(1, config.total_iterations // 10) == 0:
            logger.info("%s it=%d loss=%.5f lr=%.2e", label, it, value, lr)
    return params, log


def pretrain(panel: Panel, spec: InterventionSpec, model_config: ModelConfig, config: TrainConfig,
             init: Parameters | None = None, dtype: torch.dtype = torch.float32, target_slot: bool = True
             ) -> tuple[Parameters, TrainLog]:
    """Pseudo-counterfactual pre-training on donors only.

    With ``target_slot`` (the default) each pseudo-target is embedded with
    the real target's spatial row; otherwise it keeps its own row.

    ``panel`` must already be scaled and imputed.  Returns the trained
    parameters and the per-iteration loss log.
    """
    spec.validate(panel)
    donors = spec.donors(panel)
    params = init if init is not None else init_parameters(model_config, seed=config.seed, dtype=dtype)
    l_minus, l_plus = model_config.l_minus, model_config.l_plus
    slot = spec.target_unit if target_slot else None
    return _run(params, lambda rng: sample_pretrain_window(panel, donors, l_minus, l_plus, rng, slot), config,
                "pretrain", 0)


def finetune(params: Parameters, panel: Panel, spec: InterventionSpec, config: TrainConfig,
             frozen: Sequence[str] = ("temporal_embedding",)) -> tuple[Parameters, TrainLog]:
    """Fit the target's pre-intervention trajectory with pseudo-interventions before ``t0``.

    Windows never reach past ``t0``, so the temporal-embedding rows of the
    post-period would get no gradient while the rest of the network moves.
    Freezing the table (the default) keeps every time step consistent with
    the fine-tuned weights; pass ``frozen=()`` to train everything.
    """
    spec.validate(panel)
    l_minus, l_plus = params.config.l_minus, params.config.l_plus
    if spec.t0 < l_minus + l_plus:
        raise PanelError(f"t0={spec.t0} < l_minus + l_plus = {l_minus + l_plus}; use smaller windows")
    return _run(params, lambda rng: sample_finetune_window(panel, spec, l_minus, l_plus, rng), config,
                "finetune", 1, frozen)
