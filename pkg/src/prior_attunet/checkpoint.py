"""Flat little-endian checkpoint archive.

Layout::

    8 bytes   magic b"PATTNCKP"
    u32       format version
    u32       config length, then that many bytes of JSON (sorted keys)
    i64       epoch
    f64       best metric
    u32       tensor count
    per tensor: u32 name length, name (utf-8), u32 rank, rank x u32 dims, float32 payload

Every tensor is stored as float32, so a float32 model round-trips bit-exactly.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import Tensor

MAGIC = b"PATTNCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, Any]
    tensors: "OrderedDict[str, Tensor]"
    epoch: int = 0
    best_mdsc: float = float("nan")


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<qd", int(ckpt.epoch), float(ckpt.best_mdsc)))
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, t in ckpt.tensors.items():
        raw = name.encode()
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f4", copy=False).tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}, have {len(view) - pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = json.loads(bytes(take(cfg_len)).decode())
    epoch, best = struct.unpack("<qd", take(16))
    (count,) = struct.unpack("<I", take(4))
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        numel = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * numel), dtype="<f4").reshape(dims).copy()
        tensors[name] = torch.from_numpy(arr.astype(np.float32, copy=False))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last tensor")
    return Checkpoint(config, tensors, int(epoch), float(best))


def save(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def state_tensors(module: torch.nn.Module) -> "OrderedDict[str, Tensor]":
    """Floating-point parameters and buffers, in ``state_dict`` order."""
    return OrderedDict((k, v.detach().clone()) for k, v in module.state_dict().items() if v.is_floating_point())


def load_tensors(module: torch.nn.Module, tensors: Mapping[str, Tensor]) -> None:
    own = {k: v for k, v in module.state_dict().items() if v.is_floating_point()}
    missing = sorted(set(own) - set(tensors))
    unexpected = sorted(set(tensors) - set(own))
    if missing or unexpected:
        raise CheckpointError(f"checkpoint/model mismatch; missing {missing[:5]}, unexpected {unexpected[:5]}")
    for k, v in tensors.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise CheckpointError(f"{k}: checkpoint shape {tuple(v.shape)} != model shape {tuple(own[k].shape)}")
    with torch.no_grad():
        for k, v in tensors.items():
            own[k].copy_(v)
