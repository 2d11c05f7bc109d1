"""Decoder-only transformer (GPT-2 layout, pre-LN, tied output projection)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from eslm import numcore as nc
from eslm.numcore import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_embed: int = 32
    vocab_size: int = 256
    seq_len: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_embed", "vocab_size", "seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive int, got {getattr(self, name)!r}")
        if self.d_embed % self.n_heads:
            raise ValueError(f"d_embed={self.d_embed} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dropout != 0.0:
            raise ValueError("dropout is fixed to 0 in this implementation")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class TokenBatch:
    inputs: np.ndarray  # [B, T] int
    targets: np.ndarray  # [B, T] int, inputs shifted by one
    domains: np.ndarray | None = None  # [B] domain index per sequence

    @property
    def n_tokens(self) -> int:
        return int(self.inputs.size)

    @classmethod
    def from_windows(cls, windows: np.ndarray, domains=None) -> "TokenBatch":
        """Split ``[B, T+1]`` windows into inputs and next-token targets."""
        windows = np.asarray(windows, dtype=np.int64)
        return cls(windows[:, :-1].copy(), windows[:, 1:].copy(), domains)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v, t = cfg.d_embed, cfg.vocab_size, cfg.seq_len
    shapes: dict[str, tuple[int, ...]] = {"wte": (v, d), "wpe": (t, d)}
    for i in range(cfg.n_layers):
        p = f"h.{i}."
        shapes.update({
            p + "ln_1.g": (d,), p + "ln_1.b": (d,),
            p + "attn.c_attn.w": (d, 3 * d), p + "attn.c_attn.b": (3 * d,),
            p + "attn.c_proj.w": (d, d), p + "attn.c_proj.b": (d,),
            p + "ln_2.g": (d,), p + "ln_2.b": (d,),
            p + "mlp.c_fc.w": (d, 4 * d), p + "mlp.c_fc.b": (4 * d,),
            p + "mlp.c_proj.w": (4 * d, d), p + "mlp.c_proj.b": (d,),
        })
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    return shapes


class ModelParams:
    """Named weights of one model plus its architecture."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"parameter names do not match config (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape} != expected {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def n_params(self) -> int:
        return sum(int(t.data.size) for t in self.tensors.values())

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (np.zeros_like(t.data) if t.grad is None else t.grad)
            for k, t in self.tensors.items()
        }

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config, {k: Tensor(t.data.astype(dtype), dtype=dtype) for k, t in self.items()}
        )

    def copy(self) -> "ModelParams":
        return self.astype(next(iter(self.tensors.values())).data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """normal(0, 0.02) weights; residual projections scaled by 1/sqrt(2 * n_layers)."""
    rng = np.random.default_rng(seed)
    dtype = nc.get_dtype()
    resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        elif name.endswith("c_proj.w"):
            arr = rng.normal(0.0, resid_std, size=shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = Tensor(arr.astype(dtype), dtype=dtype)
    return ModelParams(cfg, tensors)


def zero_params(cfg: ModelConfig) -> ModelParams:
    dtype = nc.get_dtype()
    return ModelParams(
        cfg, {k: Tensor(np.zeros(s, dtype=dtype), dtype=dtype) for k, s in param_shapes(cfg).items()}
    )


def _inputs_of(batch) -> np.ndarray:
    return np.asarray(batch.inputs if isinstance(batch, TokenBatch) else batch, dtype=np.int64)


def forward_logits(params: ModelParams, batch) -> Tensor:
    """Logits ``[B, T, V]``; position t only sees inputs at positions <= t."""
    cfg = params.config
    ids = _inputs_of(batch)
    if ids.ndim != 2:
        raise ValueError(f"inputs must be [B, T], got shape {ids.shape}")
    b, t = ids.shape
    if t > cfg.seq_len:
        raise ValueError(f"sequence length {t} exceeds model seq_len {cfg.seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise IndexError(f"token ids must lie in [0, {cfg.vocab_size})")
    d, nh = cfg.d_embed, cfg.n_heads
    hd = d // nh
    p = params.tensors

    x = nc.add(nc.gather_rows(p["wte"], ids), nc.gather_rows(p["wpe"], np.arange(t)))
    att_scale = 1.0 / math.sqrt(hd)
    for i in range(cfg.n_layers):
        pre = f"h.{i}."
        h = nc.layer_norm(x, p[pre + "ln_1.g"], p[pre + "ln_1.b"])
        qkv = nc.add(nc.matmul(h, p[pre + "attn.c_attn.w"]), p[pre + "attn.c_attn.b"])
        heads = []
        for j in range(3):
            part = nc.slice_last(qkv, j * d, (j + 1) * d)
            heads.append(nc.transpose(nc.reshape(part, (b, t, nh, hd)), (0, 2, 1, 3)))
        q, k, v = heads
        att = nc.scale(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), att_scale)
        y = nc.matmul(nc.causal_softmax(att), v)
        y = nc.reshape(nc.transpose(y, (0, 2, 1, 3)), (b, t, d))
        x = nc.add(x, nc.add(nc.matmul(y, p[pre + "attn.c_proj.w"]), p[pre + "attn.c_proj.b"]))

        h = nc.layer_norm(x, p[pre + "ln_2.g"], p[pre + "ln_2.b"])
        h = nc.gelu(nc.add(nc.matmul(h, p[pre + "mlp.c_fc.w"]), p[pre + "mlp.c_fc.b"]))
        x = nc.add(x, nc.add(nc.matmul(h, p[pre + "mlp.c_proj.w"]), p[pre + "mlp.c_proj.b"]))

    x = nc.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    return nc.matmul(x, nc.transpose(p["wte"], (1, 0)))


def per_token_loss(logits: Tensor, targets) -> Tensor:
    """Negative log-likelihood of each target, shape ``[B, T]``."""
    return nc.neg(nc.pick(nc.row_log_softmax(logits), np.asarray(targets)))


def per_token_entropy(logits: Tensor) -> Tensor:
    """Shannon entropy (nats) of each position's predictive distribution; not tracked."""
    return _entropy_from_logp(nc.row_log_softmax(_detached(logits)).data)


def _detached(t: Tensor) -> Tensor:
    return Tensor._wrap(t.data)


def _entropy_from_logp(logp: np.ndarray) -> Tensor:
    h = -(np.exp(logp) * logp).sum(axis=-1)
    return Tensor._wrap(np.clip(h, 0.0, math.log(logp.shape[-1])).astype(logp.dtype))


def token_stats(logits: Tensor, targets) -> tuple[Tensor, Tensor]:
    """Per-token losses (tracked) and entropies (untracked) from one log-softmax."""
    logp = nc.row_log_softmax(logits)
    losses = nc.neg(nc.pick(logp, np.asarray(targets)))
    return losses, _entropy_from_logp(logp.data)


def masked_mean_loss(losses: Tensor, mask) -> Tensor:
    """Mean loss over selected positions; accepts a SelectionMask or boolean array."""
    selected = getattr(mask, "selected", mask)
    selected = np.asarray(selected, dtype=bool).reshape(losses.shape)
    if not selected.any():
        raise ValueError("masked_mean_loss: selection is empty")
    return nc.masked_mean(losses, selected)
