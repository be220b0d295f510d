"""Binary checkpoint format.

Layout (all integers little-endian):
    magic "SDCK" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | name UTF-8 | u8 dtype (0=f32, 1=f64)
                | u8 rank | u32 x rank dims | raw little-endian row-major data

Round-trips are bit-exact; loading into a model requires an exact name,
dtype, and shape match.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"SDCK"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: "OrderedDict[str, np.ndarray] | dict[str, np.ndarray]") -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_TAGS:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name[:40]}...")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            f.write(np.ascontiguousarray(little).tobytes())


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    off = 12
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        tag, rank = struct.unpack_from("<BB", raw, off)
        off += 2
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        dtype = _TAG_DTYPES[tag]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(dims)
        off += n * dtype.itemsize
        out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def model_state(model) -> "OrderedDict[str, np.ndarray]":
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, p in model.named_parameters():
        state[name] = p.data
    for name, b in model.named_buffers():
        state[name] = b
    return state


def save_model(model, path) -> None:
    write_tensors(path, model_state(model))


def load_model(model, path) -> None:
    """Load a checkpoint into an already-built model; names/shapes/dtypes must match."""
    loaded = read_tensors(path)
    state = model_state(model)
    missing = sorted(set(state) - set(loaded))
    extra = sorted(set(loaded) - set(state))
    if missing or extra:
        raise CheckpointError(f"checkpoint mismatch: missing={missing[:5]} extra={extra[:5]}")
    for name, p in model.named_parameters():
        arr = loaded[name]
        if arr.shape != p.data.shape or arr.dtype != p.data.dtype:
            raise CheckpointError(f"{name}: checkpoint {arr.dtype}{arr.shape} vs model "
                                  f"{p.data.dtype}{p.data.shape}")
        p.data = arr
        p.grad = None
    for name, b in model.named_buffers():
        arr = loaded[name]
        if arr.shape != b.shape or arr.dtype != b.dtype:
            raise CheckpointError(f"{name}: checkpoint {arr.dtype}{arr.shape} vs model "
                                  f"{b.dtype}{b.shape}")
        b[...] = arr
