"""The "VEMC" checkpoint container.

Layout (little-endian)::

    b"VEMC" | u32 version | u32 json_len | json | u32 n_blobs
    then per blob: u32 name_len | name | u32 ndim | u32 dims... | f32 data

The JSON block carries the model/encoder configuration plus free-form
metadata (step counter, optimizer hyper-parameters).  Blob names are
prefixed by their role, e.g. ``param/head.up.w`` or ``adam.m/head.up.w``.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Union

import numpy as np

from .diffcore import ParamStore

MAGIC = b"VEMC"
VERSION = 1
_U32 = struct.Struct("<I")

PathOrFile = Union[str, os.PathLike, BinaryIO]


class CheckpointError(ValueError):
    """Corrupt, truncated or mismatched checkpoint."""


@dataclass
class Checkpoint:
    meta: dict
    blobs: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Blobs under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.blobs.items() if k.startswith(p)}


def to_bytes(ck: Checkpoint) -> bytes:
    out = io.BytesIO()
    js = json.dumps(ck.meta, sort_keys=True).encode("utf-8")
    out.write(MAGIC)
    out.write(_U32.pack(VERSION))
    out.write(_U32.pack(len(js)))
    out.write(js)
    out.write(_U32.pack(len(ck.blobs)))
    for name, arr in ck.blobs.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")  # tobytes() is C order; keeps 0-d shapes
        out.write(_U32.pack(len(nb)))
        out.write(nb)
        out.write(_U32.pack(arr.ndim))
        for d in arr.shape:
            out.write(_U32.pack(d))
        out.write(arr.tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a VEMC checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt config block: {e}") from None
    blobs = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        ndim = r.u32()
        if ndim > 8:
            raise CheckpointError(f"blob {name!r} claims {ndim} dimensions")
        shape = tuple(r.u32() for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last blob")
    return Checkpoint(meta, blobs)


def save(ck: Checkpoint, dest: PathOrFile) -> None:
    data = to_bytes(ck)
    if hasattr(dest, "write"):
        dest.write(data)
        return
    tmp = f"{os.fspath(dest)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, dest)


def load(src: PathOrFile) -> Checkpoint:
    if hasattr(src, "read"):
        return from_bytes(src.read())
    if not os.path.exists(src):
        raise FileNotFoundError(f"checkpoint not found: {src}")
    with open(src, "rb") as fh:
        return from_bytes(fh.read())


# ---------------------------------------------------------------- stores

def store_blobs(store: ParamStore, prefix: str = "") -> dict[str, np.ndarray]:
    blobs = {f"{prefix}param/{k}": v for k, v in store.params.items()}
    blobs.update({f"{prefix}buffer/{k}": v for k, v in store.buffers.items()})
    return blobs


def load_store(store: ParamStore, ck: Checkpoint, prefix: str = "") -> None:
    """Copy checkpoint values into ``store``; names and shapes must match exactly."""
    params = ck.group(f"{prefix}param")
    buffers = ck.group(f"{prefix}buffer")
    for want, got, what in ((store.params, params, "parameter"), (store.buffers, buffers, "buffer")):
        missing = sorted(set(want) - set(got))
        extra = sorted(set(got) - set(want))
        if missing or extra:
            raise CheckpointError(f"{what} names do not match the config "
                                  f"(missing {missing[:3]}, unexpected {extra[:3]})")
        for k, v in got.items():
            if want[k].shape != v.shape:
                raise CheckpointError(f"{what} {k!r} has shape {v.shape}, config implies {want[k].shape}")
    store.set_values({k: v.astype(store.params[k].dtype) for k, v in params.items()})
    store.set_values({k: v.astype(store.buffers[k].dtype) for k, v in buffers.items()})


def optim_blobs(opt, prefix: str = "") -> dict[str, np.ndarray]:
    blobs = {f"{prefix}adam.m/{k}": v for k, v in opt.m.items()}
    blobs.update({f"{prefix}adam.v/{k}": v for k, v in opt.v.items()})
    return blobs


def load_optim(opt, ck: Checkpoint, step: int, prefix: str = "") -> None:
    m, v = ck.group(f"{prefix}adam.m"), ck.group(f"{prefix}adam.v")
    if set(m) != set(opt.m) or set(v) != set(opt.v):
        raise CheckpointError("optimizer state does not match the parameter set")
    for k in opt.m:
        opt.m[k][...] = m[k]
        opt.v[k][...] = v[k]
    opt.step = int(step)
