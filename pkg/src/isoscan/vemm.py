"""The volume Mamba mixer: channel chunks, eight serpentine scans, adaptive fusion."""
from __future__ import annotations

import numpy as np

from .diffcore import Module, ParamStore
from .layers import (Linear, gelu, gelu_backward, linear, linear_backward, softmax,
                     softmax_backward)
from .scanpath import CHUNK_DIRECTIONS, build_path, chunk_channels, flatten, restore, unchunk
from .ssm import SelectiveSSM

N_DIRECTIONS = 4


def dwam_forward(stacked: np.ndarray, p: dict):
    """Per-(voxel, channel) softmax weighting of the four direction outputs.

    ``stacked`` is ``(4, ...)``.  A two-layer perceptron (``fc1``, GELU, ``fc2``)
    maps each 4-vector of direction values to 4 logits; the result is the
    softmax-weighted sum, so the direction axis collapses.
    """
    if stacked.shape[0] != N_DIRECTIONS:
        raise ValueError(f"expected {N_DIRECTIONS} direction tensors, got {stacked.shape[0]}")
    v = np.moveaxis(stacked, 0, -1)
    a1, s1 = linear(v, p["fc1.w"], p["fc1.b"])
    h, sg = gelu(a1)
    logits, s2 = linear(h, p["fc2.w"], p["fc2.b"])
    w, ss = softmax(logits)
    out = (w * v).sum(axis=-1)
    return out, (v, w, s1, sg, s2, ss)


def dwam_backward(saved, dout):
    v, w, s1, sg, s2, ss = saved
    dv = w * dout[..., None]
    (dlogits,) = softmax_backward(ss, v * dout[..., None])
    dh, dw2, db2 = linear_backward(s2, dlogits)
    (da1,) = gelu_backward(sg, dh)
    dv1, dw1, db1 = linear_backward(s1, da1)
    grads = {"fc1.w": dw1, "fc1.b": db1, "fc2.w": dw2, "fc2.b": db2}
    return np.moveaxis(dv + dv1, -1, 0), grads


def dwam(restored, p: dict) -> np.ndarray:
    """Fuse four equally-shaped direction tensors with perceptron params ``p``."""
    shapes = {np.shape(r) for r in restored}
    if len(restored) != N_DIRECTIONS or len(shapes) != 1:
        raise ValueError(f"dwam needs {N_DIRECTIONS} tensors of identical shape, got {shapes}")
    return dwam_forward(np.stack(restored), p)[0]


def dwam_weights(stacked: np.ndarray, p: dict) -> np.ndarray:
    return dwam_forward(stacked, p)[1][1]


def init_dwam_params(hidden: int, rng: np.random.Generator, dtype=np.float64) -> dict:
    b1, b2 = 1.0 / np.sqrt(N_DIRECTIONS), 1.0 / np.sqrt(hidden)
    return {
        "fc1.w": rng.uniform(-b1, b1, (hidden, N_DIRECTIONS)).astype(dtype),
        "fc1.b": np.zeros(hidden, dtype=dtype),
        "fc2.w": rng.uniform(-b2, b2, (N_DIRECTIONS, hidden)).astype(dtype),
        "fc2.b": np.zeros(N_DIRECTIONS, dtype=dtype),
    }


class DWAM(Module):
    def __init__(self, store: ParamStore, prefix: str, hidden: int,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__(store, prefix)
        for k, v in init_dwam_params(hidden, rng, dtype).items():
            self.param(k, v)

    def params(self) -> dict:
        return {k: self.p(k) for k in ("fc1.w", "fc1.b", "fc2.w", "fc2.b")}

    def forward(self, stacked):
        return dwam_forward(stacked, self.params())

    def backward(self, saved, dout):
        dstack, grads = dwam_backward(saved, dout)
        for k, g in grads.items():
            self.acc(k, g)
        return dstack


class VEMM(Module):
    """in-proj -> chunk -> 4 scans per chunk -> restore -> DWAM -> concat -> out-proj."""

    def __init__(self, store: ParamStore, prefix: str, channels: int, n_state: int,
                 rng: np.random.Generator, dwam_hidden: int = 16, dtype=np.float64,
                 scan_block: int | None = None, directions=CHUNK_DIRECTIONS):
        super().__init__(store, prefix)
        if channels % 2:
            raise ValueError(f"VEMM needs an even channel count, got {channels}")
        self.channels = channels
        self.directions = tuple(directions)
        half = channels // 2
        self.in_proj = Linear(store, self.child("in_proj"), channels, channels, rng, dtype=dtype)
        self.ssms = [SelectiveSSM(store, self.child(f"ssm.{i}"), half, n_state, rng, dtype, scan_block)
                     for i in range(2 * N_DIRECTIONS)]
        self.dwams = [DWAM(store, self.child(f"dwam.{k}"), dwam_hidden, rng, dtype) for k in range(2)]
        self.out_proj = Linear(store, self.child("out_proj"), channels, channels, rng, dtype=dtype)

    def paths(self, dims):
        return [build_path(tuple(dims), o, r) for o, r in self.directions]

    def forward(self, f: np.ndarray):
        if f.ndim != 4 or f.shape[-1] != self.channels:
            raise ValueError(f"expected (F, h, W, {self.channels}) features, got {f.shape}")
        paths = self.paths(f.shape[:3])
        u, s_in = self.in_proj.forward(f)
        fused, branch_saved = [], []
        for k, chunk in enumerate(chunk_channels(u)):
            outs, scans = [], []
            for d, path in enumerate(paths):
                y, s = self.ssms[k * N_DIRECTIONS + d].forward(flatten(chunk, path))
                outs.append(restore(y, path))
                scans.append(s)
            fk, sd = self.dwams[k].forward(np.stack(outs))
            fused.append(fk)
            branch_saved.append((scans, sd))
        out, s_out = self.out_proj.forward(unchunk(*fused))
        return out, (paths, s_in, branch_saved, s_out)

    def backward(self, saved, dout):
        paths, s_in, branch_saved, s_out = saved
        dcat = self.out_proj.backward(s_out, dout)
        dchunks = []
        for k, dfk in enumerate(chunk_channels(dcat)):
            scans, sd = branch_saved[k]
            dstack = self.dwams[k].backward(sd, dfk)
            dchunk = np.zeros_like(dfk)
            for d, path in enumerate(paths):
                dseq = self.ssms[k * N_DIRECTIONS + d].backward(scans[d], flatten(dstack[d], path))
                dchunk += restore(dseq, path)
            dchunks.append(dchunk)
        return self.in_proj.backward(s_in, unchunk(*dchunks))
