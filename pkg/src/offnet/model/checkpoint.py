"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"OFFN" | version | count | count x (name_len | name | rank | extents[rank] | float32 data)
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from .layers import Module

MAGIC = b"OFFN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: Module) -> bytes:
    named = list(model.named_parameters())
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(named)))
    for name, p in named:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return buf.getvalue()


def read_checkpoint_bytes(data: bytes) -> dict[str, np.ndarray]:
    """Decode a checkpoint into an ordered ``name -> array`` mapping."""
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic: not an OFFN checkpoint")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated checkpoint")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(view):
            raise CheckpointError("truncated checkpoint")
        name = bytes(view[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(view):
            raise CheckpointError(f"truncated data for {name}")
        out[name] = np.frombuffer(view[pos : pos + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(view):
        raise CheckpointError("trailing bytes after last parameter")
    return out


def save_checkpoint(path: str | os.PathLike, model: Module) -> None:
    data = checkpoint_bytes(model)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_state(model: Module, state: dict[str, np.ndarray]) -> None:
    """Copy arrays into ``model`` after checking names and shapes match exactly."""
    named = dict(model.named_parameters())
    missing = [n for n in named if n not in state]
    extra = [n for n in state if n not in named]
    if missing or extra:
        raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in named.items():
        if state[name].shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
    for name, p in named.items():
        p.data = state[name].copy()
        p.grad = None
        p.velocity = None


def load_checkpoint(path: str | os.PathLike, model: Module) -> Module:
    with open(path, "rb") as fh:
        load_state(model, read_checkpoint_bytes(fh.read()))
    return model
