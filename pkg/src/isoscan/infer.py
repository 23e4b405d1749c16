"""Tiled inference with linear blending in the overlaps."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

from .moco import MIN_ENCODE_DIMS, DegradationEncoder, encode
from .network import ReconNet
from .volume import Volume, transpose_axial_to_h, transpose_h_to_axial

DEFAULT_TILE = (16, 32, 32)
DEFAULT_OVERLAP = 8


def thread_count() -> int:
    """Worker count from ``ISOSCAN_THREADS`` (default 1)."""
    raw = os.environ.get("ISOSCAN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"ISOSCAN_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def tile_starts(n: int, tile: int, overlap: int) -> list[int]:
    """Tile origins covering ``[0, n)``; the last tile is flush with the end."""
    if tile >= n:
        return [0]
    if overlap >= tile:
        raise ValueError(f"overlap {overlap} must be smaller than tile {tile}")
    step = tile - overlap
    starts = list(range(0, n - tile, step))
    starts.append(n - tile)
    return starts


def _ramp(length: int, lo_shared: int, hi_shared: int) -> np.ndarray:
    """1-D blend weight: rises over ``lo_shared`` voxels, falls over ``hi_shared``."""
    w = np.ones(length)
    if lo_shared:
        w[:lo_shared] = np.minimum(w[:lo_shared], (np.arange(lo_shared) + 1) / (lo_shared + 1))
    if hi_shared:
        w[-hi_shared:] = np.minimum(w[-hi_shared:], (np.arange(hi_shared, 0, -1)) / (hi_shared + 1))
    return w


def tiled_apply(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, scale: int,
                tile=DEFAULT_TILE, overlap: int = DEFAULT_OVERLAP, threads: int = 1) -> np.ndarray:
    """Apply ``fn: (f, h, w) -> (f, scale*h, w)`` tile by tile and blend.

    Weights ramp linearly across the region shared with each neighbour and are
    normalised, so the blend is exact wherever the tiles agree.  Tiles may run
    on several threads; accumulation is always in tile order.
    """
    x = np.asarray(x)
    dims = x.shape
    tile = tuple(min(t, d) for t, d in zip(tile, dims))
    axes = [tile_starts(d, t, overlap) for d, t in zip(dims, tile)]
    boxes = [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]

    def run(box):
        sl = tuple(slice(o, o + t) for o, t in zip(box, tile))
        return fn(x[sl])

    if threads > 1 and len(boxes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, boxes))
    else:
        outs = [run(b) for b in boxes]

    out_dims = (dims[0], dims[1] * scale, dims[2])
    num = np.zeros(out_dims)
    den = np.zeros(out_dims)
    for box, y in zip(boxes, outs):
        ramps = []
        for ax, (o, t) in enumerate(zip(box, tile)):
            starts = axes[ax]
            i = starts.index(o)
            lo = starts[i - 1] + t - o if i > 0 else 0
            hi = o + t - starts[i + 1] if i + 1 < len(starts) else 0
            k = scale if ax == 1 else 1
            ramps.append(_ramp(t * k, lo * k, hi * k))
        w = ramps[0][:, None, None] * ramps[1][None, :, None] * ramps[2][None, None, :]
        sl = (slice(box[0], box[0] + tile[0]), slice(box[1] * scale, (box[1] + tile[1]) * scale),
              slice(box[2], box[2] + tile[2]))
        num[sl] += w * y
        den[sl] += w
    return num / den


def embedding_for(x: np.ndarray, encoder: DegradationEncoder, tile=DEFAULT_TILE) -> np.ndarray:
    """One degradation embedding for the whole input, from a centred crop of at most ``tile``."""
    dims = x.shape
    if any(d < m for d, m in zip(dims, MIN_ENCODE_DIMS)):
        raise ValueError(f"volume {dims} smaller than the encoder minimum {MIN_ENCODE_DIMS}")
    size = [min(d, max(t, m)) for d, t, m in zip(dims, tile, MIN_ENCODE_DIMS)]
    sl = tuple(slice((d - s) // 2, (d - s) // 2 + s) for d, s in zip(dims, size))
    return encode(x[sl], encoder)


def reconstruct(vol: Volume, net: ReconNet, encoder: DegradationEncoder, axis: str = "h",
                tile=DEFAULT_TILE, overlap: int = DEFAULT_OVERLAP, threads: int | None = None) -> Volume:
    """Upsample ``vol`` by the model scale along ``h`` or, via the transposes, along ``z``."""
    if axis not in ("h", "z"):
        raise ValueError(f"axis must be 'h' or 'z', got {axis!r}")
    if axis == "z":
        return transpose_h_to_axial(reconstruct(transpose_axial_to_h(vol), net, encoder, "h",
                                                tile, overlap, threads))
    threads = thread_count() if threads is None else threads
    x = vol.data.astype(net.dtype)
    d = embedding_for(x, encoder, tile)
    s = net.cfg.scale
    y = tiled_apply(lambda t: net(t, d), x, s, tile, overlap, threads)
    sz, sy, sx = vol.spacing
    return Volume(np.clip(y, 0.0, 1.0).astype(np.float32), (sz, sy / s, sx))
