"""Binary checkpoint: model weights, optimizer moments, controller and loop state.

Layout (little-endian)::

    b"ESLMCKPT"  u32 version
    blob   model config (JSON)
    u32 n, n x tensor section     parameters
    u64 optimizer step, u32 n, n x tensor section   moments ("m/<name>", "v/<name>")
    blob   controller state (JSON, empty when absent)
    u64    step counter
    blob   RNG state (JSON)
    blob   extras (JSON: FLOPs ledger and other loop bookkeeping)

    blob            = u32 byte length + bytes
    tensor section  = u16 name length, name, u32 ndim, ndim x u32 dims, float32 values
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from eslm.model import ModelConfig, ModelParams
from eslm.numcore import Tensor

CKPT_MAGIC = b"ESLMCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    moments_m: dict[str, np.ndarray] = field(default_factory=dict)
    moments_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: int = 0
    controller: dict | None = None
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def model_params(self) -> ModelParams:
        return ModelParams(
            self.config, {k: Tensor(v.copy(), dtype=np.float32) for k, v in self.params.items()}
        )


def _blob(buf, payload: bytes) -> None:
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)


def _json_blob(buf, obj) -> None:
    _blob(buf, b"" if obj is None else json.dumps(obj, sort_keys=True).encode("utf-8"))


def _tensor(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    _json_blob(buf, ckpt.config.to_dict())
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        _tensor(buf, name, arr)
    moments = [(f"m/{k}", v) for k, v in ckpt.moments_m.items()]
    moments += [(f"v/{k}", v) for k, v in ckpt.moments_v.items()]
    buf.write(struct.pack("<QI", ckpt.opt_step, len(moments)))
    for name, arr in moments:
        _tensor(buf, name, arr)
    _json_blob(buf, ckpt.controller)
    buf.write(struct.pack("<Q", ckpt.step))
    _json_blob(buf, ckpt.rng_state)
    _json_blob(buf, ckpt.extras)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def blob_json(self):
        (n,) = self.unpack("<I")
        raw = self.take(n)
        return json.loads(raw.decode("utf-8")) if raw else None

    def tensor(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<H")
        name = self.take(n).decode("utf-8")
        (ndim,) = self.unpack("<I")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        return name, arr


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = ModelConfig.from_dict(r.blob_json())
    (n,) = r.unpack("<I")
    params = dict(r.tensor() for _ in range(n))
    opt_step, n_mom = r.unpack("<QI")
    m, v = {}, {}
    for _ in range(n_mom):
        name, arr = r.tensor()
        kind, _, pname = name.partition("/")
        (m if kind == "m" else v)[pname] = arr
    controller = r.blob_json()
    (step,) = r.unpack("<Q")
    rng_state = r.blob_json() or {}
    extras = r.blob_json() or {}
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(config, params, m, v, opt_step, controller, step, rng_state, extras)


def save(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())


def from_params(params: ModelParams, **kw) -> Checkpoint:
    return Checkpoint(params.config, {k: t.data for k, t in params.items()}, **kw)
