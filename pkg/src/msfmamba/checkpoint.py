"""Named-tensor checkpoint files (``MSFW`` v1, little-endian).

Layout: ``b"MSFW"``, ``u32 version``, then records of
``u32 name_len, name (UTF-8), u32 rank, u32 dims[rank], f64 payload``.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"MSFW"
VERSION = 1


class CheckpointMismatch(ValueError):
    """Checkpoint tensors do not line up with the model's parameters."""


def save(path, tensors: Mapping[str, np.ndarray] | Iterable) -> None:
    items = tensors.items() if isinstance(tensors, Mapping) else ((p.name, p.data) for p in tensors)
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)))
        out.append(key)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an MSFW checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    result: dict[str, np.ndarray] = {}
    while pos < len(raw):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        result[name] = arr.astype(np.float64)
    return result


def mismatch_report(params, stored: Mapping[str, np.ndarray]) -> list[str]:
    """One line per parameter whose name or shape disagrees with ``stored``."""
    lines = []
    names = set()
    for p in params:
        names.add(p.name)
        if p.name not in stored:
            lines.append(f"{p.name}: missing from checkpoint (model expects {p.shape})")
        elif stored[p.name].shape != p.shape:
            lines.append(f"{p.name}: checkpoint {stored[p.name].shape} vs model {p.shape}")
    for name in stored:
        if name not in names:
            lines.append(f"{name}: present in checkpoint but not in model")
    return lines


def load_into(params, path) -> None:
    stored = load(path)
    report = mismatch_report(params, stored)
    if report:
        raise CheckpointMismatch("checkpoint does not fit model:\n  " + "\n  ".join(report))
    for p in params:
        p.data[...] = stored[p.name]
