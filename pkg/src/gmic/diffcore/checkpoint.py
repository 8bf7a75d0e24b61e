"""Binary parameter checkpoints.

Layout (little-endian): b"GMIC", u32 version, u32 tensor count, then per
tensor: u32 name length, UTF-8 name, u32 rank, rank x u32 dims, float32
data. Then one flag byte; when 1, per tensor in the same order: u8 present,
and if present u64 step followed by the first and second moments as float32.
Buffers are stored as ordinary named tensors and never carry Adam state.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .optim import AdamState, ParamStore

MAGIC = b"GMIC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_array(buf, a: np.ndarray):
    buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def to_bytes(store: ParamStore, include_adam: bool = True) -> bytes:
    buf = io.BytesIO()
    entries = list(store.params.items()) + list(store.buffers.items())
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, value in entries:
        arr = value if isinstance(value, np.ndarray) else value.data
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        _write_array(buf, arr)
    buf.write(struct.pack("<B", 1 if include_adam else 0))
    if include_adam:
        for name, _ in entries:
            st = store.adam.get(name)
            if st is None:
                buf.write(b"\x00")
                continue
            buf.write(b"\x01")
            buf.write(struct.pack("<Q", st.step))
            _write_array(buf, st.m)
            _write_array(buf, st.v)
    return buf.getvalue()


def save_checkpoint(path, store: ParamStore, include_adam: bool = True) -> None:
    Path(path).write_bytes(to_bytes(store, include_adam))


def _read(buf, n):
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, AdamState]]:
    """Return (arrays by name in file order, adam state by name)."""
    buf = io.BytesIO(Path(path).read_bytes())
    if _read(buf, 4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, count = struct.unpack("<II", _read(buf, 8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read(buf, 4))
        name = _read(buf, nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", _read(buf, 4))
        dims = struct.unpack(f"<{rank}I", _read(buf, 4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(_read(buf, 4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    adam: dict[str, AdamState] = {}
    (flag,) = struct.unpack("<B", _read(buf, 1))
    if flag:
        for name, arr in arrays.items():
            if _read(buf, 1) == b"\x00":
                continue
            (step,) = struct.unpack("<Q", _read(buf, 8))
            m = np.frombuffer(_read(buf, 4 * arr.size), dtype="<f4").reshape(arr.shape).astype(np.float32)
            v = np.frombuffer(_read(buf, 4 * arr.size), dtype="<f4").reshape(arr.shape).astype(np.float32)
            adam[name] = AdamState(step, m, v)
    if buf.read(1):
        raise CheckpointError(f"{path}: trailing bytes")
    return arrays, adam


def load_checkpoint(path, store: ParamStore) -> ParamStore:
    """Overwrite ``store`` in place from ``path``; names and shapes must match."""
    arrays, adam = read_checkpoint(path)
    expected = set(store.params) | set(store.buffers)
    if set(arrays) != expected:
        missing = sorted(expected - set(arrays))
        extra = sorted(set(arrays) - expected)
        raise CheckpointError(f"{path}: parameter names differ (missing {missing[:5]}, unexpected {extra[:5]})")
    for name, arr in arrays.items():
        target = store.params[name].data if name in store.params else store.buffers[name]
        if target.shape != arr.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {target.shape}")
        target[...] = arr
    store.adam = {n: s for n, s in adam.items() if n in store.params}
    return store
