"""Degradation representation learning with momentum contrast.

The encoder is eight identical residual blocks (3x3x3 conv -> batch norm ->
ReLU, input added after the ReLU), global average pooling and a linear map to
an L2-normalised embedding.  The key encoder is an exponential moving average
of the query encoder and never receives gradients.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import Module, ParamStore
from .layers import (Conv3d, Linear, batchnorm, batchnorm_backward, l2_normalize,
                     l2_normalize_backward, relu, relu_backward)
from .optim import OptimState, adam_step

MIN_ENCODE_DIMS = (4, 8, 8)


@dataclass
class EncoderConfig:
    channels: int = 16
    n_blocks: int = 8
    embed_dim: int = 64
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class DegradationEncoder(Module):
    def __init__(self, cfg: EncoderConfig, dtype=np.float64):
        super().__init__(ParamStore(), "")
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        c = cfg.channels
        self.convs = []
        for i in range(cfg.n_blocks):
            # block 0 sees the single input channel; its skip broadcasts over channels.
            # No conv bias: batch norm removes it.
            self.convs.append(Conv3d(self.store, f"blocks.{i}.conv.", 1 if i == 0 else c, c, rng,
                                     dtype, bias=False))
            self.param(f"blocks.{i}.bn.gamma", np.ones(c, dtype=dtype))
            self.param(f"blocks.{i}.bn.beta", np.zeros(c, dtype=dtype))
            self.store.add_buffer(f"blocks.{i}.bn.mean", np.zeros(c, dtype=dtype))
            self.store.add_buffer(f"blocks.{i}.bn.var", np.ones(c, dtype=dtype))
        self.fc = Linear(self.store, "fc.", c, cfg.embed_dim, rng, dtype=dtype)

    def forward(self, x: np.ndarray, train: bool = False):
        """``x``: ``(B, F, h, W)`` batch or a single ``(F, h, W)`` volume."""
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or any(d < m for d, m in zip(x.shape[1:], MIN_ENCODE_DIMS)):
            raise ValueError(f"encoder input must be >= {MIN_ENCODE_DIMS} per volume, got {x.shape}")
        h = x[..., None]
        saved = []
        for i, conv in enumerate(self.convs):
            a, sc = conv.forward(h)
            bn_prefix = f"blocks.{i}.bn."
            b, sb = batchnorm(a, self.p(bn_prefix + "gamma"), self.p(bn_prefix + "beta"),
                              self.store.buffers[bn_prefix + "mean"],
                              self.store.buffers[bn_prefix + "var"], train)
            r, sr = relu(b)
            h = r + h
            saved.append((sc, sb, sr))
        pooled = h.mean(axis=(1, 2, 3))
        z, sf = self.fc.forward(pooled)
        e, sn = l2_normalize(z)
        if single:
            e = e[0]
        return e, (saved, h.shape, sf, sn, single)

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)[0]

    def backward(self, saved, de):
        blocks, hshape, sf, sn, single = saved
        if single:
            de = de[None]
        (dz,) = l2_normalize_backward(sn, de)
        dpooled = self.fc.backward(sf, dz)
        n_vox = hshape[1] * hshape[2] * hshape[3]
        dh = np.broadcast_to(dpooled[:, None, None, None, :] / n_vox, hshape).copy()
        for i in reversed(range(len(self.convs))):
            sc, sb, sr = blocks[i]
            (db,) = relu_backward(sr, dh)
            da, dgamma, dbeta = batchnorm_backward(sb, db)
            self.acc(f"blocks.{i}.bn.gamma", dgamma)
            self.acc(f"blocks.{i}.bn.beta", dbeta)
            dprev = self.convs[i].backward(sc, da)
            skip = dh.sum(axis=-1, keepdims=True) if i == 0 else dh
            dh = dprev + skip
        dx = dh[..., 0]
        return dx[0] if single else dx


def encode(x: np.ndarray, encoder: DegradationEncoder) -> np.ndarray:
    """Eval-mode embedding (unit norm) of one subvolume."""
    return encoder.forward(x, train=False)[0]


# ---------------------------------------------------------------- contrastive

def info_nce(q: np.ndarray, k: np.ndarray, tau: float):
    """Summed InfoNCE over the batch; negatives for row i are keys j != i.

    Returns ``(loss, dq, dk)``.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 2 or q.shape != k.shape:
        raise ValueError(f"q and k must be matching (N, L) arrays, got {q.shape}, {k.shape}")
    if q.shape[0] < 2:
        raise ValueError("InfoNCE needs a batch of at least 2")
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    logits = q @ k.T / tau
    mx = logits.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    loss = float(np.sum(lse - np.diag(logits)))
    p = np.exp(logits - lse[:, None])
    dlogits = p - np.eye(q.shape[0])
    return loss, dlogits @ k / tau, dlogits.T @ q / tau


@dataclass
class MocoState:
    query: DegradationEncoder
    key: DegradationEncoder
    momentum: float = 0.999
    tau: float = 0.07

    def __post_init__(self):
        if not 0 <= self.momentum <= 1:
            raise ValueError(f"momentum must be in [0, 1], got {self.momentum}")
        if not self.tau > 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")


def make_moco(cfg: EncoderConfig, momentum=0.999, tau=0.07, dtype=np.float64) -> MocoState:
    q = DegradationEncoder(cfg, dtype)
    key = DegradationEncoder(cfg, dtype)
    key.store.set_values(q.store.params)
    key.store.set_values(q.store.buffers)
    return MocoState(q, key, momentum, tau)


def momentum_update(state: MocoState) -> MocoState:
    """``key <- m*key + (1-m)*query`` for every learnable parameter."""
    m = state.momentum
    for name, qw in state.query.store.params.items():
        kw = state.key.store.params[name]
        kw *= m
        kw += (1.0 - m) * qw
    return state


def moco_train_step(pairs, state: MocoState, opt: OptimState, lr: float) -> float:
    """One contrastive step on a batch of ``(query_subvol, key_subvol)`` pairs."""
    xq = np.stack([np.asarray(a.data if hasattr(a, "data") else a) for a, _ in pairs])
    xk = np.stack([np.asarray(b.data if hasattr(b, "data") else b) for _, b in pairs])
    q, saved = state.query.forward(xq, train=True)
    k, _ = state.key.forward(xk, train=True)
    loss, dq, _ = info_nce(q, k, state.tau)
    state.query.store.zero_grads()
    state.query.backward(saved, dq.astype(state.query.dtype))
    adam_step(state.query.store.params, state.query.store.grads, opt, lr)
    momentum_update(state)
    return loss


def separation(embeddings: np.ndarray, labels) -> tuple[float, float]:
    """Mean cosine similarity within and across labels (diagonal excluded)."""
    e = np.asarray(embeddings, dtype=np.float64)
    e = e / np.linalg.norm(e, axis=1, keepdims=True)
    sim = e @ e.T
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    return float(sim[same & off].mean()), float(sim[~same].mean())
