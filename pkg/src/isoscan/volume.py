"""Volume container, the VEMV binary format, synthetic phantoms and cropping."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"VEMV"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIIII3fB")  # magic, version, F, h, W, spacings, dtype

PathOrFile = Union[str, Path, BinaryIO]


class VolumeFormatError(ValueError):
    """Base class for malformed VEMV streams."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedError(VolumeFormatError):
    pass


class UnsupportedDtypeError(VolumeFormatError):
    pass


class ZeroDimensionError(VolumeFormatError):
    pass


@dataclass
class Volume:
    """Single-channel scalar field indexed ``(f, y, x)`` with values in [0, 1]."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ZeroDimensionError(f"volume dims must be >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (self.dims == other.dims and self.spacing == other.spacing
                and self.data.tobytes() == other.data.tobytes())


@dataclass(frozen=True)
class SubvolumeSpec:
    origin: tuple[int, int, int]
    shape: tuple[int, int, int]

    def check(self, dims) -> None:
        for o, s, d in zip(self.origin, self.shape, dims):
            if o < 0 or s < 1 or o + s > d:
                raise ValueError(f"subvolume {self} does not fit in dims {tuple(dims)}")

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.shape))


# ---------------------------------------------------------------- I/O

def to_bytes(v: Volume) -> bytes:
    f, h, w = v.dims
    header = _HEADER.pack(MAGIC, VERSION, f, h, w, *v.spacing, DTYPE_F32)
    return header + np.ascontiguousarray(v.data, dtype="<f4").tobytes()


def from_bytes(buf: bytes) -> Volume:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedError(f"header truncated: {len(buf)} < {_HEADER.size} bytes")
    _, version, f, h, w, sz, sy, sx, dtype = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VolumeFormatError(f"unsupported VEMV version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"dtype tag {dtype} not supported (only 0 = f32)")
    if 0 in (f, h, w):
        raise ZeroDimensionError(f"zero dimension in header: {(f, h, w)}")
    n = f * h * w
    need = _HEADER.size + 4 * n
    if len(buf) < need:
        raise TruncatedError(f"payload truncated: {len(buf)} < {need} bytes")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size).reshape(f, h, w)
    return Volume(data.astype(np.float32), (sz, sy, sx))


def save_volume(v: Volume, dest: PathOrFile) -> None:
    payload = to_bytes(v)
    if isinstance(dest, (str, Path)):
        Path(dest).write_bytes(payload)
    else:
        dest.write(payload)


def load_volume(src: PathOrFile) -> Volume:
    if isinstance(src, (str, Path)):
        return from_bytes(Path(src).read_bytes())
    return from_bytes(src.read())


def import_raw_u8(src: PathOrFile, dims: tuple[int, int, int],
                  spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Read a headerless uint8 stack in (f, y, x) order, rescaled by 1/255."""
    raw = Path(src).read_bytes() if isinstance(src, (str, Path)) else src.read()
    n = int(np.prod(dims))
    if len(raw) != n:
        raise TruncatedError(f"raw volume has {len(raw)} bytes, dims {dims} need {n}")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(dims).astype(np.float32) / 255.0
    return Volume(data, spacing)


def stream_roundtrip(v: Volume) -> Volume:
    buf = io.BytesIO()
    save_volume(v, buf)
    buf.seek(0)
    return load_volume(buf)


# ---------------------------------------------------------------- geometry

def crop(v: Volume, spec: SubvolumeSpec) -> Volume:
    spec.check(v.dims)
    return Volume(v.data[spec.slices()].copy(), v.spacing)


def transpose_axial_to_h(v: Volume) -> Volume:
    """Swap the section axis into the height slot: ``(F, h, W) -> (h, F, W)``."""
    sz, sy, sx = v.spacing
    return Volume(np.ascontiguousarray(v.data.swapaxes(0, 1)), (sy, sz, sx))


def transpose_h_to_axial(v: Volume) -> Volume:
    sz, sy, sx = v.spacing
    return Volume(np.ascontiguousarray(v.data.swapaxes(0, 1)), (sy, sz, sx))


# ---------------------------------------------------------------- phantom

MIN_PHANTOM_DIMS = (8, 16, 16)


def _smooth_noise(rng, dims, scale):
    coarse = [max(2, d // scale + 2) for d in dims]
    g = rng.standard_normal(coarse)
    # separable linear upsampling of a coarse lattice
    for axis, d in enumerate(dims):
        src = np.linspace(0, coarse[axis] - 1, d)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, coarse[axis] - 1)
        t = (src - lo).reshape([-1 if a == axis else 1 for a in range(3)])
        g = np.take(g, lo, axis=axis) * (1 - t) + np.take(g, hi, axis=axis) * t
    return g


def generate_phantom(dims, seed: int, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """EM-like synthetic volume: textured cytoplasm, membrane sheets and organelles.

    Pure function of ``(dims, seed)``.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < m for d, m in zip(dims, MIN_PHANTOM_DIMS)):
        raise ValueError(f"phantom dims must be >= {MIN_PHANTOM_DIMS}, got {dims}")
    rng = np.random.default_rng(seed)
    f, h, w = dims
    zz, yy, xx = np.meshgrid(np.arange(f), np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([zz, yy, xx], axis=-1).astype(np.float64)

    vol = 0.55 + 0.08 * _smooth_noise(rng, dims, 4) + 0.03 * rng.standard_normal(dims)

    # membrane sheets: thin slabs around random planes, slightly wavy
    n_sheets = int(rng.integers(2, 5))
    for _ in range(n_sheets):
        normal = rng.standard_normal(3)
        normal /= np.linalg.norm(normal)
        center = rng.uniform(0, 1, 3) * np.array(dims)
        wave = 1.5 * _smooth_noise(rng, dims, 8)
        dist = np.abs((coords - center) @ normal + wave)
        thickness = rng.uniform(0.5, 1.0)
        vol -= 0.4 * np.clip(1.0 - dist / thickness, 0.0, 1.0)

    # organelles: dark-rimmed ellipsoids with a brighter or darker lumen
    n_org = int(rng.integers(3, 7))
    for _ in range(n_org):
        center = rng.uniform(0, 1, 3) * np.array(dims)
        radii = rng.uniform(0.15, 0.35, 3) * np.array(dims) + 1.5
        r = np.sqrt((((coords - center) / radii) ** 2).sum(axis=-1))
        inside = np.clip((1.0 - r) * 4.0, 0.0, 1.0)
        rim = np.exp(-((r - 1.0) * 6.0) ** 2)
        lumen = rng.uniform(-0.3, 0.25)
        vol += lumen * inside - 0.3 * rim

    return Volume(np.clip(vol, 0.0, 1.0).astype(np.float32), spacing)
