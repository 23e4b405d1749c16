"""Reconstruction network: shallow conv, residual Mamba groups with degradation
injection, and a pixel-shuffle head that upsamples the h axis by ``scale``."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import Module, ParamStore
from .layers import (Conv3d, DepthwiseConv3d, Linear, gelu, gelu_backward, layernorm,
                     layernorm_backward, pixel_shuffle_h, pixel_shuffle_h_backward)
from .vemm import VEMM


@dataclass
class ModelConfig:
    channels: int = 16
    n_groups: int = 4
    n_blocks: int = 4
    scale: int = 2
    state_size: int = 8
    embed_dim: int = 64
    dwam_hidden: int = 16
    scan_block: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.channels % 2 or self.channels < 2:
            raise ValueError(f"channels must be even and >= 2, got {self.channels}")
        if self.scale < 2:
            raise ValueError(f"scale must be >= 2, got {self.scale}")
        if min(self.n_groups, self.n_blocks, self.state_size, self.embed_dim, self.dwam_hidden) < 1:
            raise ValueError("group/block/state/embedding counts must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class VDIM(Module):
    """Degradation-conditioned channel affine: ``scale(d) * LN(F) + shift(d)``."""

    def __init__(self, store: ParamStore, prefix: str, channels: int, embed_dim: int, dtype):
        super().__init__(store, prefix)
        self.param("scale.w", np.zeros((channels, embed_dim), dtype=dtype))
        self.param("scale.b", np.ones(channels, dtype=dtype))
        self.param("shift.w", np.zeros((channels, embed_dim), dtype=dtype))
        self.param("shift.b", np.zeros(channels, dtype=dtype))

    def forward(self, f, d):
        if d.shape != (self.p("scale.w").shape[1],):
            raise ValueError(f"embedding length {d.shape} does not match {self.p('scale.w').shape[1]}")
        gamma = self.p("scale.w") @ d + self.p("scale.b")
        beta = self.p("shift.w") @ d + self.p("shift.b")
        xhat, s_ln = layernorm(f)
        return gamma * xhat + beta, (d, gamma, xhat, s_ln)

    def backward(self, saved, dout):
        d, gamma, xhat, s_ln = saved
        axes = tuple(range(dout.ndim - 1))
        dgamma = (dout * xhat).sum(axis=axes)
        dbeta = dout.sum(axis=axes)
        self.acc("scale.w", np.outer(dgamma, d))
        self.acc("scale.b", dgamma)
        self.acc("shift.w", np.outer(dbeta, d))
        self.acc("shift.b", dbeta)
        (df,) = layernorm_backward(s_ln, dout * gamma)
        dd = dgamma @ self.p("scale.w") + dbeta @ self.p("shift.w")
        return df, dd


class ConvFFN(Module):
    """pointwise C->2C, depthwise 3x3x3, GELU, pointwise 2C->C."""

    def __init__(self, store, prefix, channels, rng, dtype):
        super().__init__(store, prefix)
        self.fc1 = Linear(store, self.child("fc1"), channels, 2 * channels, rng, dtype=dtype)
        self.dw = DepthwiseConv3d(store, self.child("dw"), 2 * channels, rng, dtype=dtype)
        self.fc2 = Linear(store, self.child("fc2"), 2 * channels, channels, rng, dtype=dtype)

    def forward(self, f):
        a, s1 = self.fc1.forward(f)
        b, s2 = self.dw.forward(a)
        c, sg = gelu(b)
        out, s3 = self.fc2.forward(c)
        return out, (s1, s2, sg, s3)

    def backward(self, saved, dout):
        s1, s2, sg, s3 = saved
        dc = self.fc2.backward(s3, dout)
        (db,) = gelu_backward(sg, dc)
        da = self.dw.backward(s2, db)
        return self.fc1.backward(s1, da)


class RVMB(Module):
    """``x1 = f + VEMM(VDIM(f, d))``; ``out = x1 + ConvFFN(VDIM(x1, d))``."""

    def __init__(self, store, prefix, cfg: ModelConfig, rng, dtype):
        super().__init__(store, prefix)
        c = cfg.channels
        self.vdim1 = VDIM(store, self.child("vdim1"), c, cfg.embed_dim, dtype)
        self.vemm = VEMM(store, self.child("vemm"), c, cfg.state_size, rng,
                         cfg.dwam_hidden, dtype, cfg.scan_block)
        self.vdim2 = VDIM(store, self.child("vdim2"), c, cfg.embed_dim, dtype)
        self.ffn = ConvFFN(store, self.child("ffn"), c, rng, dtype)

    def forward(self, f, d):
        a, sv1 = self.vdim1.forward(f, d)
        m, sm = self.vemm.forward(a)
        x1 = f + m
        b, sv2 = self.vdim2.forward(x1, d)
        c, sf = self.ffn.forward(b)
        return x1 + c, (sv1, sm, sv2, sf)

    def backward(self, saved, dout):
        sv1, sm, sv2, sf = saved
        db = self.ffn.backward(sf, dout)
        dx1, dd2 = self.vdim2.backward(sv2, db)
        dx1 = dx1 + dout
        da = self.vemm.backward(sm, dx1)
        df, dd1 = self.vdim1.backward(sv1, da)
        return df + dx1, dd1 + dd2


class RVMG(Module):
    """``n_blocks`` RVMBs, a 3x3x3 conv, and a group-level residual."""

    def __init__(self, store, prefix, cfg: ModelConfig, rng, dtype):
        super().__init__(store, prefix)
        self.blocks = [RVMB(store, self.child(f"blocks.{i}"), cfg, rng, dtype)
                       for i in range(cfg.n_blocks)]
        self.conv = Conv3d(store, self.child("conv"), cfg.channels, cfg.channels, rng, dtype)

    def forward(self, f, d):
        x, saved = f, []
        for blk in self.blocks:
            x, s = blk.forward(x, d)
            saved.append(s)
        y, sc = self.conv.forward(x)
        return f + y, (saved, sc)

    def backward(self, saved, dout):
        bsaved, sc = saved
        dx = self.conv.backward(sc, dout)
        dd = 0.0
        for blk, s in zip(reversed(self.blocks), reversed(bsaved)):
            dx, ddb = blk.backward(s, dx)
            dd = dd + ddb
        return dx + dout, dd


class ReconstructHead(Module):
    """``(fs + fd)`` -> conv C->s*C -> pixel shuffle along h -> conv C->1."""

    def __init__(self, store, prefix, cfg: ModelConfig, rng, dtype):
        super().__init__(store, prefix)
        self.scale = cfg.scale
        self.up = Conv3d(store, self.child("up"), cfg.channels, cfg.scale * cfg.channels, rng, dtype)
        self.out = Conv3d(store, self.child("out"), cfg.channels, 1, rng, dtype)

    def forward(self, fs, fd):
        if fs.shape != fd.shape:
            raise ValueError(f"shallow/deep feature shapes differ: {fs.shape} vs {fd.shape}")
        a, su = self.up.forward(fs + fd)
        b, sp = pixel_shuffle_h(a, self.scale)
        y, so = self.out.forward(b)
        return y[..., 0], (su, sp, so)

    def backward(self, saved, dy):
        su, sp, so = saved
        db = self.out.backward(so, dy[..., None])
        (da,) = pixel_shuffle_h_backward(sp, db)
        dsum = self.up.backward(su, da)
        return dsum, dsum


class ReconNet(Module):
    """Full model: ``(F, h, W)`` volume and an embedding -> ``(F, s*h, W)`` volume."""

    def __init__(self, cfg: ModelConfig, dtype=np.float64):
        super().__init__(ParamStore(), "")
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        self.shallow = Conv3d(self.store, "shallow.", 1, cfg.channels, rng, dtype)
        self.groups = [RVMG(self.store, f"groups.{g}.", cfg, rng, dtype) for g in range(cfg.n_groups)]
        self.head = ReconstructHead(self.store, "head.", cfg, rng, dtype)

    def num_parameters(self) -> int:
        return self.store.num_parameters()

    def forward(self, x: np.ndarray, d: np.ndarray):
        x = np.asarray(x, dtype=self.dtype)
        d = np.asarray(d, dtype=self.dtype)
        if x.ndim != 3:
            raise ValueError(f"expected a (F, h, W) volume, got shape {x.shape}")
        fs, ss = self.shallow.forward(x[..., None])
        f, sg = fs, []
        for g in self.groups:
            f, s = g.forward(f, d)
            sg.append(s)
        y, sh = self.head.forward(fs, f)
        return y, (ss, sg, sh)

    def __call__(self, x, d) -> np.ndarray:
        return self.forward(x, d)[0]

    def backward(self, saved, dy):
        ss, sg, sh = saved
        dfs, df = self.head.backward(sh, dy)
        dd = np.zeros(self.cfg.embed_dim, dtype=dy.dtype)
        for g, s in zip(reversed(self.groups), reversed(sg)):
            df, ddg = g.backward(s, df)
            dd = dd + ddg
        dx = self.shallow.backward(ss, dfs + df)
        return dx[..., 0], dd
