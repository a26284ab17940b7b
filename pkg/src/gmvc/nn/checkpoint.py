"""Checkpoint archive for parameters, optimizer moments, and step counter.

Layout (all little-endian):
    magic  b"GMVC"
    u32    version (currently 1)
    u32    record count
    per record:
        u32   name byte length
        ...   UTF-8 name
        u32   rank
        u64*  one dim per rank (rank 0 means a single scalar)
        f32*  payload, row-major
"""

from __future__ import annotations

import os
import struct

import numpy as np

from gmvc.errors import InvalidInput, ShapeError

MAGIC = b"GMVC"
VERSION = 1


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(fh):
    raw = fh.read(4)
    if len(raw) < 4:
        raise InvalidInput("truncated checkpoint record")
    (nlen,) = struct.unpack("<I", raw)
    name = fh.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(
        struct.unpack("<Q", fh.read(8))[0] for _ in range(rank)
    )
    count = int(np.prod(shape)) if shape else 1
    payload = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return name, payload


def save_checkpoint(path, store, optimizer=None, step: int = 0) -> None:
    """Write atomically (temp file + rename)."""
    records = []
    for name, p in store.entries.items():
        records.append((name, p.data))
    for name, arr in store.state.items():
        records.append((name, arr))
    if optimizer is not None:
        for name, arr in optimizer.m.items():
            records.append((f"optim.m.{name}", arr))
        for name, arr in optimizer.v.items():
            records.append((f"optim.v.{name}", arr))
    records.append(("meta.step", np.asarray(float(step), dtype=np.float32)))

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(records)))
        for name, arr in records:
            _write_record(fh, name, np.asarray(arr))
    os.replace(tmp, path)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise InvalidInput(f"{path}: not a checkpoint archive")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise InvalidInput(f"{path}: unsupported checkpoint version {version}")
        return dict(_read_record(fh) for _ in range(count))


def load_checkpoint(path, store, optimizer=None) -> int:
    """Restore a store (and optionally optimizer) in place; returns the step."""
    records = read_checkpoint(path)
    for name, p in store.entries.items():
        if name not in records:
            raise InvalidInput(f"{path}: missing parameter {name!r}")
        if records[name].shape != p.data.shape:
            raise ShapeError(
                f"{path}: shape mismatch for {name!r}: "
                f"{records[name].shape} vs {p.data.shape}"
            )
        p.data[...] = records[name].astype(store.dtype)
    for name, arr in store.state.items():
        if name in records:
            arr[...] = records[name].astype(store.dtype)
    step = int(records.get("meta.step", np.float32(0.0)))
    if optimizer is not None:
        for name in optimizer.m:
            key = f"optim.m.{name}"
            if key in records:
                optimizer.m[name][...] = records[key]
                optimizer.v[name][...] = records[f"optim.v.{name}"]
        optimizer.t = step
    return step
