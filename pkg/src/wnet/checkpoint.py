"""Binary checkpoint format.

Layout (little-endian)::

    b"WNET"                     magic
    u32 version
    u32 entry count
    per entry:
        u32 name length, name bytes (utf-8)
        u32 rank, rank x u32 dims
        u8 element type (0 float32, 1 float64, 2 uint8)
        raw values
    u8 adam flag (0 / 1)
    if flag == 1: u32 count, then per trainable entry:
        u32 name length, name bytes, u32 step count,
        m and v raw values (same type/shape as the entry's value)

Entries are the model's parameters, then its buffers (BatchNorm running
statistics), then a ``__config__`` uint8 entry holding the model config as JSON.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"WNET"
VERSION = 1
CONFIG_ENTRY = "__config__"
_TYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}


class CheckpointError(ValueError):
    pass


def _write_array(fh, arr: np.ndarray):
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"unsupported element type {arr.dtype}")
    fh.write(np.ascontiguousarray(arr, dtype=_TYPES[tag]).tobytes())


def encode(entries: "OrderedDict[str, np.ndarray]", adam: "OrderedDict[str, tuple] | None" = None) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        raw = name.encode()
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"{name}: unsupported element type {arr.dtype}")
        fh.write(struct.pack("<B", _TAGS[arr.dtype]))
        _write_array(fh, arr)
    fh.write(struct.pack("<B", 1 if adam else 0))
    if adam:
        fh.write(struct.pack("<I", len(adam)))
        for name, (step, m, v) in adam.items():
            if name not in entries:
                raise CheckpointError(f"Adam state for unknown entry {name}")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", step))
            _write_array(fh, m.astype(entries[name].dtype, copy=False))
            _write_array(fh, v.astype(entries[name].dtype, copy=False))
    return fh.getvalue()


def decode(blob: bytes):
    """Return ``(entries, adam)``; ``adam`` is None when the flag is unset."""
    fh = io.BytesIO(blob)

    def read(n):
        b = fh.read(n)
        if len(b) != n:
            raise CheckpointError("truncated checkpoint")
        return b

    if read(4) != MAGIC:
        raise CheckpointError("bad magic bytes, not a WNET checkpoint")
    version, count = struct.unpack("<II", read(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", read(4))
        name = read(nlen).decode()
        (rank,) = struct.unpack("<I", read(4))
        dims = struct.unpack(f"<{rank}I", read(4 * rank))
        (tag,) = struct.unpack("<B", read(1))
        if tag not in _TYPES:
            raise CheckpointError(f"{name}: unknown element type tag {tag}")
        dt = _TYPES[tag]
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(read(size * dt.itemsize), dtype=dt).reshape(dims)
        entries[name] = arr.astype(dt.newbyteorder("="))
    (flag,) = struct.unpack("<B", read(1))
    adam = None
    if flag:
        adam = OrderedDict()
        (n_adam,) = struct.unpack("<I", read(4))
        for _ in range(n_adam):
            (nlen,) = struct.unpack("<I", read(4))
            name = read(nlen).decode()
            if name not in entries:
                raise CheckpointError(f"Adam state for unknown entry {name}")
            ref = entries[name]
            (step,) = struct.unpack("<I", read(4))
            m = np.frombuffer(read(ref.nbytes), dtype=ref.dtype).reshape(ref.shape).copy()
            v = np.frombuffer(read(ref.nbytes), dtype=ref.dtype).reshape(ref.shape).copy()
            adam[name] = (step, m, v)
    if fh.read(1):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return entries, adam


def _atomic_write(path: Path, blob: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, model, include_adam: bool = False):
    """Write ``model`` (a WNet) with its config and, optionally, Adam state."""
    entries: OrderedDict[str, np.ndarray] = OrderedDict()
    params = list(model.named_parameters())
    for name, p in params:
        entries[name] = p.data
    for name, b in model.named_buffers():
        entries[name] = b
    entries[CONFIG_ENTRY] = np.frombuffer(json.dumps(model.config.to_dict(), sort_keys=True).encode(), dtype=np.uint8)
    adam = None
    if include_adam:
        adam = OrderedDict((name, (p.step_count, p.m, p.v)) for name, p in params)
    _atomic_write(Path(path), encode(entries, adam))


def load(path):
    """Rebuild a WNet from a checkpoint file, restoring Adam state when present."""
    from .model import WNet, WNetConfig

    blob = Path(path).read_bytes()
    entries, adam = decode(blob)
    if CONFIG_ENTRY not in entries:
        raise CheckpointError("checkpoint has no model config entry")
    config = WNetConfig.from_dict(json.loads(entries[CONFIG_ENTRY].tobytes().decode()))
    model = WNet(config)
    dtype = entries[next(iter(entries))].dtype
    if dtype != model.dtype():
        model.astype(dtype)
    model.load_state_dict(entries)
    if adam:
        for name, p in model.named_parameters():
            if name not in adam:
                raise CheckpointError(f"Adam state missing for {name}")
            step, m, v = adam[name]
            p.step_count, p.m, p.v = step, m, v
    return model
