"""Anisotropy simulation: blur along h, stride-s decimation, Gaussian noise."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .volume import SubvolumeSpec, Volume, crop


@dataclass(frozen=True)
class DegradationProfile:
    filter_size: int = 8
    blur_sigma: float = 4.0
    scale: int = 2
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.filter_size < 1:
            raise ValueError(f"filter_size must be >= 1, got {self.filter_size}")
        if not self.blur_sigma > 0:
            raise ValueError(f"blur_sigma must be > 0, got {self.blur_sigma}")
        if self.scale < 2:
            raise ValueError(f"scale must be >= 2, got {self.scale}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingPair:
    x: Volume
    y: Volume
    profile: DegradationProfile


def gaussian_kernel(filter_size: int, sigma: float) -> np.ndarray:
    """Centered discrete Gaussian of length ``2*ceil(f/2) + 1``, summing to 1."""
    if filter_size < 1 or not sigma > 0:
        raise ValueError(f"invalid kernel parameters f={filter_size}, sigma={sigma}")
    radius = math.ceil(filter_size / 2)
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(k * k) / (2.0 * sigma * sigma))
    g /= g.sum()
    return (g + g[::-1]) / 2.0


def blur_h(data: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate along axis 1 with reflect (edge-excluded) padding."""
    r = kernel.size // 2
    padded = np.pad(data, ((0, 0), (r, r), (0, 0)), mode="reflect")
    out = np.zeros(data.shape, dtype=np.float64)
    h = data.shape[1]
    for j, kj in enumerate(kernel):
        out += kj * padded[:, j:j + h, :]
    return out


def blur_downsample(data: np.ndarray, p: DegradationProfile) -> np.ndarray:
    """The linear part of :func:`degrade` (no noise, no clamp)."""
    data = np.asarray(data, dtype=np.float64)
    if data.shape[1] % p.scale:
        raise ValueError(f"height {data.shape[1]} not divisible by scale {p.scale}")
    return blur_h(data, gaussian_kernel(p.filter_size, p.blur_sigma))[:, ::p.scale, :]


def degrade(y: Volume, p: DegradationProfile) -> Volume:
    lr = blur_downsample(y.data, p)
    if p.noise_sigma > 0:
        lr = lr + np.random.default_rng(p.seed).normal(0.0, p.noise_sigma, lr.shape)
    sz, sy, sx = y.spacing
    return Volume(np.clip(lr, 0.0, 1.0).astype(np.float32), (sz, sy * p.scale, sx))


def make_training_pair(src: Volume, spec: SubvolumeSpec, p: DegradationProfile) -> TrainingPair:
    y = crop(src, spec)
    return TrainingPair(degrade(y, p), y, p)


def sample_moco_pair(parent: Volume, shape, seed: int, disjoint: bool = False):
    """Two equally-shaped crops of one parent at different random origins.

    With ``disjoint`` the two axial (f) ranges do not overlap.
    """
    shape = tuple(int(s) for s in shape)
    dims = parent.dims
    if any(s > d for s, d in zip(shape, dims)):
        raise ValueError(f"crop {shape} larger than parent {dims}")
    if disjoint and 2 * shape[0] > dims[0]:
        raise ValueError(f"parent depth {dims[0]} too small for two disjoint crops of depth {shape[0]}")
    if not disjoint and all(s == d for s, d in zip(shape, dims)):
        raise ValueError(f"parent {dims} too small for two distinct crops of {shape}")
    rng = np.random.default_rng(seed)
    ranges = [d - s + 1 for s, d in zip(shape, dims)]
    while True:
        if disjoint:
            f0 = int(rng.integers(0, dims[0] - 2 * shape[0] + 1))
            f1 = int(rng.integers(f0 + shape[0], dims[0] - shape[0] + 1))
            if rng.random() < 0.5:
                f0, f1 = f1, f0
            o1 = (f0,) + tuple(int(rng.integers(0, r)) for r in ranges[1:])
            o2 = (f1,) + tuple(int(rng.integers(0, r)) for r in ranges[1:])
        else:
            o1 = tuple(int(rng.integers(0, r)) for r in ranges)
            o2 = tuple(int(rng.integers(0, r)) for r in ranges)
        if o1 != o2:
            break
    return crop(parent, SubvolumeSpec(o1, shape)), crop(parent, SubvolumeSpec(o2, shape))


def nearest_upsample_h(x: np.ndarray, scale: int) -> np.ndarray:
    """Baseline: repeat each row ``scale`` times along h."""
    return np.repeat(np.asarray(x), scale, axis=1)
