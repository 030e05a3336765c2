"""Spatiotemporal encoder-decoder Transformer.

A window of shape ``(units, length, covariates)`` is flattened time-major
(token ``t * U + u`` holds unit ``u`` at step ``t``), linearly projected to
the hidden size, and tagged with learnable spatial, temporal and
target/donor embeddings.  The encoder is a fully bidirectional pre-norm
stack.  The decoder self-attention uses a block mask: a token may attend to
every unit at its own or any earlier time step, never to a later step.
The target unit's decoder states are projected back to covariate space.

Everything below is written against plain tensors so that a single
``Parameters`` mapping holds all learnable state; torch supplies the array
kernels and autograd.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "ModelConfig",
    "Parameters",
    "ForwardTrace",
    "ModelError",
    "init_parameters",
    "tokenize",
    "build_decoder_mask",
    "encoder_forward",
    "decoder_forward",
    "forward",
    "extract_attention",
    "save_checkpoint",
    "load_checkpoint",
]

MASK_FILL = -1e9
CHECKPOINT_MAGIC = b"SCFCKPT\n"
CHECKPOINT_VERSION = 1


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_units: int
    num_covariates: int
    max_time: int
    num_layers: int = 3
    num_heads: int = 1
    hidden_dim: int = 32
    ffn_dim: int | None = None
    dropout_rate: float = 0.1
    l_minus: int = 20
    l_plus: int = 10

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.l_minus < 1 or self.l_plus < 1:
            raise ValueError("l_minus and l_plus must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if min(self.num_units, self.num_covariates, self.max_time, self.num_layers, self.num_heads) < 1:
            raise ValueError("sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


_ATTN = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
_EMBEDDINGS = ("spatial_embedding", "temporal_embedding", "target_embedding")


def _attn_shapes(D: int) -> dict[str, tuple[int, ...]]:
    return {n: ((D, D) if n.startswith("w") else (D,)) for n in _ATTN}


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    D, Fd, K = config.hidden_dim, config.ffn_dim, config.num_covariates
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["W_e"] = (K, D)
    shapes["W_d"] = (D, K)
    shapes["spatial_embedding"] = (config.num_units, D)
    shapes["temporal_embedding"] = (config.max_time, D)
    shapes["target_embedding"] = (2, D)
    ffn = {"ffn.w1": (D, Fd), "ffn.b1": (Fd,), "ffn.w2": (Fd, D), "ffn.b2": (D,)}
    for i in range(config.num_layers):
        for ln in ("ln1", "ln2"):
            shapes[f"enc.{i}.{ln}.g"] = (D,)
            shapes[f"enc.{i}.{ln}.b"] = (D,)
        for n, s in _attn_shapes(D).items():
            shapes[f"enc.{i}.self.{n}"] = s
        for n, s in ffn.items():
            shapes[f"enc.{i}.{n}"] = s
    for i in range(config.num_layers):
        for ln in ("ln1", "ln2", "ln3"):
            shapes[f"dec.{i}.{ln}.g"] = (D,)
            shapes[f"dec.{i}.{ln}.b"] = (D,)
        for block in ("self", "cross"):
            for n, s in _attn_shapes(D).items():
                shapes[f"dec.{i}.{block}.{n}"] = s
        for n, s in ffn.items():
            shapes[f"dec.{i}.{n}"] = s
    return shapes


def is_embedding(name: str) -> bool:
    return name in _EMBEDDINGS


def is_norm(name: str) -> bool:
    return ".ln" in name


def is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1].startswith("b")


@dataclass
class Parameters:
    """All learnable arrays of one model, keyed by a stable dotted name."""

    config: ModelConfig
    tensors: "OrderedDict[str, torch.Tensor]"

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self) -> torch.dtype:
        return self.tensors["W_e"].dtype

    def clone(self) -> "Parameters":
        return Parameters(self.config, OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()))

    def requires_grad_(self, flag: bool = True) -> "Parameters":
        for v in self.tensors.values():
            v.requires_grad_(flag)
        return self

    def to(self, dtype: torch.dtype) -> "Parameters":
        return Parameters(self.config, OrderedDict((k, v.detach().to(dtype)) for k, v in self.tensors.items()))

    def num_parameters(self) -> int:
        return sum(v.numel() for v in self.tensors.values())


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_parameters(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32, std: float = 0.02) -> Parameters:
    """Truncated-normal (+-2 sd) weights, zero biases, unit layer-norm gains."""
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if is_norm(name):
            arr = np.ones(shape) if name.endswith(".g") else np.zeros(shape)
        elif is_bias(name) and not is_embedding(name):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape, std)
        tensors[name] = torch.tensor(arr, dtype=dtype)
    return Parameters(config, tensors)


def zero_parameters(config: ModelConfig, dtype: torch.dtype = torch.float32) -> Parameters:
    return Parameters(config, OrderedDict((n, torch.zeros(s, dtype=dtype)) for n, s in parameter_shapes(config).items()))


# ------------------------------------------------------------------ tokenising


def _as_batch(window) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(window)
    if t.ndim == 3:
        return t.unsqueeze(0), True
    if t.ndim != 4:
        raise ModelError(f"window must be (U, L, K) or (B, U, L, K), got {tuple(t.shape)}")
    return t, False


def _per_batch(value, B: int) -> torch.Tensor:
    t = torch.as_tensor(value, dtype=torch.long)
    return t.expand(B) if t.ndim == 0 else t


def tokenize(window, time_offset, target_unit, params: Parameters, unit_ids=None) -> torch.Tensor:
    """Embed a window into a flat token sequence of shape ``(B, L*U, D)``.

    ``target_unit`` is the window position that receives the target
    embedding; ``unit_ids`` maps window positions to rows of the spatial
    table (defaults to ``0..U-1``).  Scalars broadcast over the batch.
    """
    x, single = _as_batch(window)
    x = x.to(params.dtype)
    B, U, L, K = x.shape
    offsets = _per_batch(time_offset, B)
    if int(offsets.min()) < 0 or int(offsets.max()) + L > params.config.max_time:
        raise ModelError(
            f"time_offset + L = {int(offsets.max()) + L} exceeds the temporal table size {params.config.max_time}"
        )
    if unit_ids is None:
        unit_ids = torch.arange(U).expand(B, U)
    else:
        unit_ids = torch.as_tensor(unit_ids, dtype=torch.long)
        unit_ids = unit_ids.expand(B, U) if unit_ids.ndim == 1 else unit_ids
    target = _per_batch(target_unit, B)
    tok = x @ params["W_e"]  # (B, U, L, D)
    tok = tok + params["spatial_embedding"][unit_ids][:, :, None, :]
    times = offsets[:, None] + torch.arange(L)[None, :]  # (B, L)
    tok = tok + params["temporal_embedding"][times][:, None, :, :]
    is_target = (torch.arange(U)[None, :] == target[:, None]).long()  # (B, U)
    tok = tok + params["target_embedding"][is_target][:, :, None, :]
    D = tok.shape[-1]
    seq = tok.transpose(1, 2).reshape(B, L * U, D)
    return seq[0] if single else seq


def build_decoder_mask(num_units: int, l_plus: int) -> np.ndarray:
    """Boolean ``(U*l, U*l)`` mask; ``True`` where a query may attend to a key.

    Allowed iff the key's time step is not later than the query's, so whole
    ``U x U`` blocks are open on and below the block diagonal.
    """
    if num_units < 1 or l_plus < 1:
        raise ValueError("num_units and l_plus must be >= 1")
    step = np.repeat(np.arange(l_plus), num_units)
    return step[None, :] <= step[:, None]


# ------------------------------------------------------------------ layers


@dataclass
class ForwardTrace:
    """Attention weights captured during a forward pass, one entry per layer.

    Each array has shape ``(B, heads, queries, keys)`` and holds post-softmax,
    pre-dropout weights.
    """

    encoder_self: list = field(default_factory=list)
    decoder_self: list = field(default_factory=list)
    decoder_cross: list = field(default_factory=list)
    num_units: int | None = None
    target_unit: np.ndarray | None = None


def _layer_norm(x, g, b, eps: float = 1e-5):
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * g + b


def _dropout(x, rate: float, training: bool, generator: torch.Generator | None):
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def _attention(xq, xkv, params, prefix, heads, mask, rate, training, generator, sink):
    B, Lq, D = xq.shape
    Lk = xkv.shape[1]
    dh = D // heads
    q = (xq @ params[prefix + "wq"] + params[prefix + "bq"]).view(B, Lq, heads, dh).transpose(1, 2)
    k = (xkv @ params[prefix + "wk"] + params[prefix + "bk"]).view(B, Lk, heads, dh).transpose(1, 2)
    v = (xkv @ params[prefix + "wv"] + params[prefix + "bv"]).view(B, Lk, heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if mask is not None:
        scores = scores + mask
    weights = torch.softmax(scores, dim=-1)
    if sink is not None:
        sink.append(weights.detach().cpu().numpy())
    weights = _dropout(weights, rate, training, generator)
    out = (weights @ v).transpose(1, 2).reshape(B, Lq, D)
    return out @ params[prefix + "wo"] + params[prefix + "bo"]


def _ffn(x, params, prefix, rate, training, generator):
    h = F.gelu(x @ params[prefix + "ffn.w1"] + params[prefix + "ffn.b1"])
    return _dropout(h @ params[prefix + "ffn.w2"] + params[prefix + "ffn.b2"], rate, training, generator)


def _check_finite(x: torch.Tensor, where: str):
    if not torch.isfinite(x).all():
        raise ModelError(f"non-finite activations in {where}")


def encoder_forward(tokens, params: Parameters, training: bool = False, generator=None, trace: ForwardTrace | None = None):
    """Pre-norm bidirectional encoder stack; returns the memory sequence."""
    cfg = params.config
    x, single = (tokens.unsqueeze(0), True) if tokens.ndim == 2 else (tokens, False)
    for i in range(cfg.num_layers):
        p = f"enc.{i}."
        h = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = x + _attention(h, h, params, p + "self.", cfg.num_heads, None, cfg.dropout_rate, training, generator,
                           None if trace is None else trace.encoder_self)
        h = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        x = x + _ffn(h, params, p, cfg.dropout_rate, training, generator)
        _check_finite(x, f"encoder layer {i}")
    return x[0] if single else x


def _additive_mask(mask: np.ndarray, dtype) -> torch.Tensor:
    return torch.where(torch.as_tensor(mask), 0.0, MASK_FILL).to(dtype)


def decoder_forward(tokens, memory, mask: np.ndarray, params: Parameters, training: bool = False, generator=None,
                    trace: ForwardTrace | None = None):
    """Pre-norm decoder: masked self-attention, cross-attention over all of ``memory``, feed-forward."""
    cfg = params.config
    single = tokens.ndim == 2
    x = tokens.unsqueeze(0) if single else tokens
    mem = memory.unsqueeze(0) if memory.ndim == 2 else memory
    L = x.shape[1]
    if mask.shape != (L, L):
        raise ModelError(f"mask shape {mask.shape} does not match decoder length {L}")
    add = _additive_mask(mask, x.dtype)
    for i in range(cfg.num_layers):
        p = f"dec.{i}."
        h = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        x = x + _attention(h, h, params, p + "self.", cfg.num_heads, add, cfg.dropout_rate, training, generator,
                           None if trace is None else trace.decoder_self)
        h = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        x = x + _attention(h, mem, params, p + "cross.", cfg.num_heads, None, cfg.dropout_rate, training, generator,
                           None if trace is None else trace.decoder_cross)
        h = _layer_norm(x, params[p + "ln3.g"], params[p + "ln3.b"])
        x = x + _ffn(h, params, p, cfg.dropout_rate, training, generator)
        _check_finite(x, f"decoder layer {i}")
    return x[0] if single else x


def forward(pre, post, target_unit, anchor, params: Parameters, training: bool = False, unit_ids=None,
            generator: torch.Generator | None = None, trace: ForwardTrace | None = None) -> torch.Tensor:
    """Predict the target unit's rows over the decoder window.

    ``pre`` is ``(U, l_pre, K)`` ending at ``anchor - 1``; ``post`` is
    ``(U, l_post, K)`` starting at ``anchor`` and already carries the
    decoder-side target inputs (shifted truth or earlier generations).
    Both accept a leading batch axis.  Returns ``(l_post, K)``, or
    ``(B, l_post, K)`` for batched input.
    """
    pre_b, single = _as_batch(pre)
    post_b, _ = _as_batch(post)
    B, U, l_pre, K = pre_b.shape
    l_post = post_b.shape[2]
    anchors = _per_batch(anchor, B)
    target = _per_batch(target_unit, B)
    h_pre = tokenize(pre_b, anchors - l_pre, target, params, unit_ids)
    h_post = tokenize(post_b, anchors, target, params, unit_ids)
    memory = encoder_forward(h_pre, params, training, generator, trace)
    mask = build_decoder_mask(U, l_post)
    z = decoder_forward(h_post, memory, mask, params, training, generator, trace)
    if trace is not None:
        trace.num_units = U
        trace.target_unit = target.numpy().copy()
    z = z.view(B, l_post, U, -1)
    z_target = z[torch.arange(B), :, target, :]  # (B, l_post, D)
    y = z_target @ params["W_d"]
    return y[0] if single else y


def extract_attention(trace: ForwardTrace | None, batch_index: int = 0) -> np.ndarray:
    """Donor-by-time weights from the last decoder self-attention layer.

    For the target's query at decoder step ``t`` the weights on each donor's
    tokens at steps ``<= t`` are averaged (and averaged over heads).  Rows
    follow window order with the target row removed; columns are decoder
    steps.
    """
    if trace is None or not trace.decoder_self:
        raise ModelError("attention capture was not enabled for this forward pass")
    w = trace.decoder_self[-1][batch_index].mean(axis=0)  # (Lq, Lk)
    U = trace.num_units
    target = int(trace.target_unit[batch_index])
    L = w.shape[0] // U
    donors = [u for u in range(U) if u != target]
    out = np.zeros((len(donors), L))
    for t in range(L):
        q = w[t * U + target].reshape(L, U)[: t + 1]  # keys grouped (step, unit)
        out[:, t] = q[:, donors].mean(axis=0)
    return out


# ------------------------------------------------------------------ checkpoint

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def save_checkpoint(params: Parameters, path: str | Path, meta: dict | None = None) -> str:
    """Write a versioned named-tensor file and return its sha256 hex digest.

    Layout: magic line, 8-byte little-endian header length, UTF-8 JSON header
    (config, tensor names/shapes/dtypes/offsets, free-form ``meta``), then the
    raw little-endian tensor bytes in header order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, t in params.items():
        arr = t.detach().cpu().numpy().astype(_DTYPES[t.dtype], copy=False)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": _DTYPES[t.dtype], "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"version": CHECKPOINT_VERSION, "config": params.config.to_dict(), "tensors": entries,
              "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = CHECKPOINT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)
    path.write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[Parameters, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ModelError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {header.get('version')}")
    config = ModelConfig(**header["config"])
    inv = {v: k for k, v in _DTYPES.items()}
    tensors = OrderedDict()
    for e in header["tensors"]:
        start = pos + e["offset"]
        arr = np.frombuffer(data[start:start + e["nbytes"]], dtype=e["dtype"]).reshape(e["shape"])
        tensors[e["name"]] = torch.tensor(arr.copy(), dtype=inv[e["dtype"]])
    meta = dict(header.get("meta", {}))
    meta["checkpoint_id"] = hashlib.sha256(data).hexdigest()
    return Parameters(config, tensors), meta
