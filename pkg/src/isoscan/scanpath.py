"""Continuous 3D scan orders and the sequence <-> volume reordering.

Every path is fully serpentine (boustrophedon at each nesting level), so
consecutive voxels are always grid neighbours.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class ScanOrder(str, enum.Enum):
    AXIAL_FIRST = "axial_first"      # f innermost
    LATERAL_FIRST = "lateral_first"  # (y, x) raster innermost


@dataclass(frozen=True)
class ScanPath:
    dims: tuple[int, int, int]
    order: ScanOrder
    reversed: bool
    perm: np.ndarray = field(repr=False, compare=False)
    inverse: np.ndarray = field(repr=False, compare=False)

    @property
    def length(self) -> int:
        return int(self.perm.size)


# Each channel chunk is scanned along these four directions.
CHUNK_DIRECTIONS: tuple[tuple[ScanOrder, bool], ...] = (
    (ScanOrder.AXIAL_FIRST, False),
    (ScanOrder.AXIAL_FIRST, True),
    (ScanOrder.LATERAL_FIRST, False),
    (ScanOrder.LATERAL_FIRST, True),
)


def _lateral_raster(h: int, w: int) -> np.ndarray:
    """Serpentine (y, x) raster as flat ``y*w + x`` indices."""
    rows = np.arange(h * w).reshape(h, w)
    rows[1::2] = rows[1::2, ::-1]
    return rows.reshape(-1)


def _serpentine_perm(dims, order: ScanOrder) -> np.ndarray:
    f, h, w = dims
    lateral = _lateral_raster(h, w)
    plane = h * w
    if order == ScanOrder.LATERAL_FIRST:
        sections = np.tile(lateral, (f, 1))
        sections[1::2] = sections[1::2, ::-1]
        return (np.arange(f)[:, None] * plane + sections).reshape(-1)
    if order == ScanOrder.AXIAL_FIRST:
        depth = np.tile(np.arange(f), (plane, 1))
        depth[1::2] = depth[1::2, ::-1]
        return (depth * plane + lateral[:, None]).reshape(-1)
    raise ValueError(f"unknown scan order {order!r}")


@lru_cache(maxsize=256)
def build_path(dims, order: ScanOrder = ScanOrder.LATERAL_FIRST, reversed: bool = False) -> ScanPath:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"scan dims must be three positive sizes, got {dims}")
    order = ScanOrder(order)
    perm = _serpentine_perm(dims, order)
    if reversed:
        perm = perm[::-1].copy()
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    perm.setflags(write=False)
    inverse.setflags(write=False)
    return ScanPath(dims, order, bool(reversed), perm, inverse)


def chunk_paths(dims) -> list[ScanPath]:
    """The four paths applied to each channel chunk, in fixed order."""
    return [build_path(tuple(dims), o, r) for o, r in CHUNK_DIRECTIONS]


def path_is_valid(perm: np.ndarray, dims) -> tuple[bool, bool]:
    """Return ``(bijective, continuous)`` for a voxel permutation."""
    n = int(np.prod(dims))
    bij = perm.size == n and np.array_equal(np.sort(perm), np.arange(n))
    coords = np.stack(np.unravel_index(np.clip(perm, 0, n - 1), dims), axis=-1)
    steps = np.abs(np.diff(coords, axis=0)).sum(axis=1)
    return bool(bij), bool(np.all(steps == 1))


# ---------------------------------------------------------------- chunks

def chunk_channels(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a channels-last feature map into its two channel halves."""
    c = f.shape[-1]
    if c % 2:
        raise ValueError(f"channel count must be even to chunk, got {c}")
    return f[..., : c // 2], f[..., c // 2:]


def unchunk(chunk1: np.ndarray, chunk2: np.ndarray) -> np.ndarray:
    return np.concatenate([chunk1, chunk2], axis=-1)


def flatten(chunk: np.ndarray, path: ScanPath) -> np.ndarray:
    """``(F, h, W, c) -> (F*h*W, c)``; sequence position i holds voxel ``perm[i]``."""
    if tuple(chunk.shape[:3]) != path.dims:
        raise ValueError(f"chunk spatial dims {chunk.shape[:3]} do not match path dims {path.dims}")
    return chunk.reshape(path.length, -1)[path.perm]


def restore(seq: np.ndarray, path: ScanPath) -> np.ndarray:
    if seq.shape[0] != path.length:
        raise ValueError(f"sequence length {seq.shape[0]} does not match path length {path.length}")
    return seq[path.inverse].reshape(path.dims + seq.shape[1:])
