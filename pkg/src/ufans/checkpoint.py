"""``UFNM`` model checkpoints.

Layout (little-endian)::

    b"UFNM" | u32 version | u32 n | n bytes of UTF-8 JSON config
    u32 tensor count | per tensor: u32 ndim, ndim x u32 dims, float32 payload
    u32 has_norm | [in_mean, in_std, out_mean, out_std tensors]

Tensors follow the model's parameter declaration order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dataio import NormStats
from .model import UfansConfig, UfansModel, build_model

MAGIC = b"UFNM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_tensor(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    return struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated: need {self.pos + n} bytes, have {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self) -> np.ndarray:
        ndim = self.u32()
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)


def save_checkpoint(path, model: UfansModel, in_norm: NormStats | None = None, out_norm: NormStats | None = None) -> None:
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    parts += [_pack_tensor(p.data) for p in params]
    has_norm = in_norm is not None and out_norm is not None
    parts.append(struct.pack("<I", int(has_norm)))
    if has_norm:
        parts += [_pack_tensor(a) for a in (in_norm.mean, in_norm.std, out_norm.mean, out_norm.std)]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[UfansModel, NormStats | None, NormStats | None]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a UFNM checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = UfansConfig.from_dict(json.loads(r.take(r.u32()).decode()))
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"{path}: bad config: {e}") from e
    model = build_model(cfg)
    params = model.parameters()
    n = r.u32()
    if n != len(params):
        raise CheckpointError(f"{path}: {n} tensors stored, config implies {len(params)}")
    arrays = []
    for p in params:
        a = r.tensor()
        if a.shape != p.shape:
            raise CheckpointError(f"{path}: {p.name} has shape {a.shape}, expected {p.shape}")
        arrays.append(a)
    model.set_parameters(arrays)
    in_norm = out_norm = None
    if r.u32():
        im, isd, om, osd = (r.tensor().astype(np.float64) for _ in range(4))
        in_norm, out_norm = NormStats(im, isd), NormStats(om, osd)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return model, in_norm, out_norm
