"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"MOEGAPCK"
    version      u32       1
    config_len   u64       byte length of the config block
    config       bytes     canonical JSON (sorted keys, no spaces, UTF-8)
    n_tensors    u32
    repeated n_tensors times:
        name_len u32
        name     bytes     UTF-8
        rank     u32
        extents  u64 * rank
        data     f64 * prod(extents), little-endian, row-major

Tensors are written in the model's parameter order.  Loading restores every
value bit for bit.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import MoEModel, MoEModelConfig

MAGIC = b"MOEGAPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def dumps(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    cfg = canonical_json(config)
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(cfg)), cfg,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a moegap checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<Q", take(8))
    config = json.loads(bytes(take(cfg_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
    return config, tensors


def save_checkpoint(path, model: MoEModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(model.config.to_dict(), model.state_dict()))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> MoEModel:
    config, tensors = loads(Path(path).read_bytes())
    model = MoEModel(MoEModelConfig.from_dict(config))
    model.load_state_dict(tensors)
    return model
