"""Weight checkpoints.

Layout: ``b"LVCTW1"``, then one record per parameter in registration order:
u32 name length, UTF-8 name, u32 rank, rank x u32 dims, float32 values,
everything little-endian and row-major.
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

__all__ = ["CHECKPOINT_MAGIC", "CheckpointError", "dump_params", "save_params", "load_params", "read_checkpoint"]

CHECKPOINT_MAGIC = b"LVCTW1"


class CheckpointError(Exception):
    pass


def dump_params(params) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    for p in params:
        name = p.name.encode("utf-8")
        value = np.asarray(p.value)
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return buf.getvalue()


def save_params(path, params) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dump_params(params))
    os.replace(tmp, path)


def read_checkpoint(path) -> list[tuple[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    records = []
    try:
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(raw):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            value = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            records.append((name, value.astype(np.float32)))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return records


def load_params(path, params) -> None:
    """Copy checkpoint values into ``params`` (matched by name and shape)."""
    records = dict(read_checkpoint(path))
    for p in params:
        if p.name not in records:
            raise CheckpointError(f"{path}: missing parameter {p.name!r}")
        value = records[p.name]
        if value.shape != p.value.shape:
            raise CheckpointError(
                f"{path}: parameter {p.name!r} has shape {value.shape}, model expects {p.value.shape}"
            )
        p.value[...] = value
    extra = set(records) - {p.name for p in params}
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {sorted(extra)[:3]}")
