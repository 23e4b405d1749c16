"""Two-stage training: contrastive degradation encoder, then the reconstruction
network conditioned on the frozen encoder.

All randomness is derived from ``(seed, stream, index)`` through
:class:`numpy.random.SeedSequence`, so a run is reproducible and can be resumed
from any checkpoint without replaying the data pipeline.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .degradation import (DegradationProfile, degrade, nearest_upsample_h, sample_moco_pair)
from .losses import psnr, ssim, total_loss_and_grad
from .moco import DegradationEncoder, EncoderConfig, MocoState, encode, make_moco, moco_train_step
from .network import ModelConfig, ReconNet
from .optim import OptimState, Schedule, adam_init, adam_step, lr_at
from .volume import SubvolumeSpec, Volume, crop, generate_phantom, load_volume

log = logging.getLogger(__name__)

# seed streams
_MOCO, _TRAIN, _VAL, _MOCO_EVAL = 0, 1, 2, 3


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class DegradationRanges:
    """Profiles are drawn from these ranges; stage 1 uses their four corners."""
    blur_sigma: tuple[float, float] = (1.0, 4.0)
    noise_sigma: tuple[float, float] = (0.0, 0.02)
    filter_size: int = 8
    scale: int = 2

    def __post_init__(self):
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)
        self.noise_sigma = tuple(float(v) for v in self.noise_sigma)
        if not 0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ValueError(f"bad blur range {self.blur_sigma}")
        if not 0 <= self.noise_sigma[0] <= self.noise_sigma[1]:
            raise ValueError(f"bad noise range {self.noise_sigma}")

    def corners(self) -> list[tuple[float, float]]:
        return [(b, n) for b in self.blur_sigma for n in self.noise_sigma]

    def profile(self, blur: float, noise: float, seed: int) -> DegradationProfile:
        return DegradationProfile(self.filter_size, blur, self.scale, noise, seed)

    def sample(self, rng: np.random.Generator) -> DegradationProfile:
        b = float(rng.uniform(*self.blur_sigma))
        n = float(rng.uniform(*self.noise_sigma))
        return self.profile(b, n, int(rng.integers(2 ** 31)))


@dataclass
class MocoSection:
    steps: int = 500
    lr: float = 1e-3
    warmup_steps: int = 0
    momentum: float = 0.999
    tau: float = 0.07
    parent_dims: tuple[int, int, int] = (8, 32, 32)
    crop: tuple[int, int, int] = (4, 8, 16)
    checkpoint_every: int = 0


@dataclass
class Stage2Section:
    epochs: int = 200
    steps_per_epoch: int = 50
    batch_size: int = 2
    crop: tuple[int, int, int] = (8, 32, 32)
    val_crops: int = 8


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    degradation: DegradationRanges = field(default_factory=DegradationRanges)
    schedule: Schedule = field(default_factory=Schedule)
    moco: MocoSection = field(default_factory=MocoSection)
    stage2: Stage2Section = field(default_factory=Stage2Section)
    seed: int = 0
    data: dict = field(default_factory=dict)
    output_dir: str = "runs"
    dtype: str = "float32"

    def __post_init__(self):
        if self.model.scale != self.degradation.scale:
            raise ValueError(f"model scale {self.model.scale} != degradation scale {self.degradation.scale}")
        if self.model.embed_dim != self.encoder.embed_dim:
            raise ValueError("model and encoder embedding lengths differ")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sub = {"model": ModelConfig, "encoder": EncoderConfig, "degradation": DegradationRanges,
               "schedule": Schedule, "moco": MocoSection, "stage2": Stage2Section}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for k, typ in sub.items():
            if k in d:
                fields = typ.__dataclass_fields__
                bad = set(d[k]) - set(fields)
                if bad:
                    raise ValueError(f"unknown keys in {k}: {sorted(bad)}")
                vals = {f: tuple(v) if isinstance(v, list) else v for f, v in d[k].items()}
                d[k] = typ(**vals)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2 ** 31))


# ---------------------------------------------------------------- data

def source_volume(cfg: TrainConfig, dims, rng: np.random.Generator) -> Volume:
    """A ``dims``-sized isotropic sample: a fresh phantom or a random crop of a data volume."""
    paths = cfg.data.get("volumes") or []
    if not paths:
        return generate_phantom(tuple(dims), _child_seed(rng))
    src = load_volume(paths[int(rng.integers(len(paths)))])
    if any(d > s for d, s in zip(dims, src.dims)):
        raise ValueError(f"data volume {src.dims} smaller than crop {tuple(dims)}")
    origin = tuple(int(rng.integers(0, s - d + 1)) for d, s in zip(dims, src.dims))
    return crop(src, SubvolumeSpec(origin, tuple(dims)))


def moco_batch(cfg: TrainConfig, step: int, stream: int = _MOCO):
    """One ``(query, key)`` pair per corner profile, seeded by the step index."""
    pairs = []
    for j, (blur, noise) in enumerate(cfg.degradation.corners()):
        rng = _rng(cfg.seed, stream, step, j)
        parent = degrade(source_volume(cfg, cfg.moco.parent_dims, rng),
                         cfg.degradation.profile(blur, noise, _child_seed(rng)))
        pairs.append(sample_moco_pair(parent, cfg.moco.crop, _child_seed(rng)))
    return pairs


def training_sample(cfg: TrainConfig, index: int, stream: int = _TRAIN):
    """``(x, y, profile)`` for sample ``index``: x is the degraded version of y."""
    rng = _rng(cfg.seed, stream, index)
    y = source_volume(cfg, cfg.stage2.crop, rng)
    p = cfg.degradation.sample(rng)
    return degrade(y, p).data, y.data, p


def validation_set(cfg: TrainConfig):
    return [training_sample(cfg, i, _VAL) for i in range(cfg.stage2.val_crops)]


# ---------------------------------------------------------------- stage 1

@dataclass
class Stage1Result:
    state: MocoState
    opt: OptimState
    losses: list[float]
    checkpoint: str | None


def save_moco(path, cfg: TrainConfig, state: MocoState, opt: OptimState) -> None:
    blobs = ckpt.store_blobs(state.query.store)
    blobs.update(ckpt.store_blobs(state.key.store, "key."))
    blobs.update(ckpt.optim_blobs(opt))
    meta = {"kind": "encoder", "encoder": cfg.encoder.to_dict(), "step": opt.step,
            "momentum": state.momentum, "tau": state.tau, "train": cfg.to_dict()}
    ckpt.save(ckpt.Checkpoint(meta, blobs), path)


def load_encoder(path, dtype=np.float32) -> DegradationEncoder:
    """Query encoder from a stage-1 checkpoint, shape-checked against its config."""
    ck = ckpt.load(path)
    if ck.meta.get("kind") != "encoder":
        raise ckpt.CheckpointError(f"{path} is not an encoder checkpoint")
    enc = DegradationEncoder(EncoderConfig.from_dict(ck.meta["encoder"]), dtype)
    ckpt.load_store(enc.store, ck)
    return enc


def _moco_lr(cfg: TrainConfig, step: int) -> float:
    m = cfg.moco
    return lr_at(step, Schedule(m.lr, m.warmup_steps, max(m.steps, m.warmup_steps + 1)))


def train_stage1(cfg: TrainConfig, resume: str | None = None, steps: int | None = None,
                 write: bool = True) -> Stage1Result:
    """Contrastive pre-training of the degradation encoder.

    ``steps`` caps the number of steps run in this call (the schedule still
    spans ``cfg.moco.steps``), which is how partial runs and resumes are tested.
    """
    dtype = np.dtype(cfg.dtype)
    state = make_moco(cfg.encoder, cfg.moco.momentum, cfg.moco.tau, dtype)
    opt = adam_init(state.query.store)
    if resume:
        ck = ckpt.load(resume)
        ckpt.load_store(state.query.store, ck)
        ckpt.load_store(state.key.store, ck, "key.")
        ckpt.load_optim(opt, ck, ck.meta["step"])
    end = cfg.moco.steps if steps is None else min(cfg.moco.steps, opt.step + steps)
    out = cfg.output_dir
    if write:
        os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "moco_loss.csv")
    losses = []
    fh = open(csv_path, "a" if resume else "w", newline="") if write else None
    try:
        writer = csv.writer(fh) if fh else None
        if writer and not resume:
            writer.writerow(["step", "lr", "loss", "psnr_val", "ssim_val"])
        while opt.step < end:
            step = opt.step
            lr = _moco_lr(cfg, step)
            loss = moco_train_step(moco_batch(cfg, step), state, opt, lr)
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            losses.append(loss)
            if writer:
                writer.writerow([step, f"{lr:.6g}", f"{loss:.8g}", "", ""])
            every = cfg.moco.checkpoint_every
            if write and every and opt.step % every == 0:
                save_moco(os.path.join(out, f"encoder_step{opt.step}.vemc"), cfg, state, opt)
    finally:
        if fh:
            fh.close()
    path = None
    if write:
        path = os.path.join(out, "encoder.vemc")
        save_moco(path, cfg, state, opt)
    return Stage1Result(state, opt, losses, path)


# ---------------------------------------------------------------- stage 2

@dataclass
class Stage2Result:
    net: ReconNet
    opt: OptimState
    losses: list[float]
    val: list[dict]
    checkpoint: str | None
    encoder_checksum: str


def save_model(path, cfg: TrainConfig, net: ReconNet, opt: OptimState | None = None,
               extra: dict | None = None) -> None:
    blobs = ckpt.store_blobs(net.store)
    if opt is not None:
        blobs.update(ckpt.optim_blobs(opt))
    meta = {"kind": "network", "model": net.cfg.to_dict(),
            "step": opt.step if opt is not None else 0, "train": cfg.to_dict() if cfg else None}
    meta.update(extra or {})
    ckpt.save(ckpt.Checkpoint(meta, blobs), path)


def load_model(path, dtype=np.float32) -> tuple[ReconNet, ckpt.Checkpoint]:
    ck = ckpt.load(path)
    if ck.meta.get("kind") != "network":
        raise ckpt.CheckpointError(f"{path} is not a network checkpoint")
    try:
        mcfg = ModelConfig.from_dict(ck.meta["model"])
    except (KeyError, TypeError, ValueError) as e:
        raise ckpt.CheckpointError(f"bad model config in {path}: {e}") from None
    net = ReconNet(mcfg, dtype)
    ckpt.load_store(net.store, ck)
    return net, ck


def evaluate_model(net: ReconNet, encoder: DegradationEncoder, samples) -> dict:
    """Mean PSNR/SSIM of the model and of nearest-neighbour upsampling."""
    rows = []
    for x, y, _ in samples:
        pred = np.clip(net(x, encode(x, encoder)), 0.0, 1.0)
        nn = nearest_upsample_h(x, net.cfg.scale)
        rows.append((psnr(y, pred), ssim(y, pred), psnr(y, nn), ssim(y, nn)))
    a = np.array(rows, dtype=np.float64)
    return dict(zip(("psnr", "ssim", "psnr_nn", "ssim_nn"), a.mean(axis=0).tolist()))


def train_stage2(cfg: TrainConfig, encoder_path: str, resume: str | None = None,
                 steps: int | None = None, validate: bool = True, write: bool = True) -> Stage2Result:
    """Train the reconstruction network with the encoder frozen."""
    if not os.path.exists(encoder_path):
        raise FileNotFoundError(f"encoder checkpoint not found: {encoder_path}")
    dtype = np.dtype(cfg.dtype)
    encoder = load_encoder(encoder_path, dtype)
    enc_sum = encoder.store.checksum()
    net = ReconNet(cfg.model, dtype)
    opt = adam_init(net.store)
    if resume:
        net, ck = load_model(resume, dtype)
        opt = adam_init(net.store)
        ckpt.load_optim(opt, ck, ck.meta["step"])
    s2 = cfg.stage2
    total = s2.epochs * s2.steps_per_epoch
    end = total if steps is None else min(total, opt.step + steps)
    out = cfg.output_dir
    if write:
        os.makedirs(out, exist_ok=True)
    val_set = validation_set(cfg) if validate else None
    losses, val = [], []
    fh = open(os.path.join(out, "loss.csv"), "a" if resume else "w", newline="") if write else None
    try:
        writer = csv.writer(fh) if fh else None
        if writer and not resume:
            writer.writerow(["step", "lr", "loss", "psnr_val", "ssim_val"])
        t0 = time.time()
        while opt.step < end:
            step = opt.step
            lr = lr_at(step / s2.steps_per_epoch, cfg.schedule)
            loss = _stage2_step(cfg, net, encoder, opt, step, lr)
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            # the encoder never receives cotangents and never changes
            assert encoder.store.grads_all_zero(), "frozen encoder accumulated gradients"
            losses.append(loss)
            row = [step, f"{lr:.6g}", f"{loss:.8g}", "", ""]
            epoch_end = opt.step % s2.steps_per_epoch == 0
            if epoch_end or opt.step == end:
                if val_set is not None:
                    m = evaluate_model(net, encoder, val_set)
                    m["step"] = opt.step
                    val.append(m)
                    row[3:] = [f"{m['psnr']:.6g}", f"{m['ssim']:.6g}"]
                    log.info("step %d loss %.5f val psnr %.3f ssim %.4f (%.1fs)", opt.step, loss,
                             m["psnr"], m["ssim"], time.time() - t0)
                if write and epoch_end:
                    save_model(os.path.join(out, f"model_epoch{opt.step // s2.steps_per_epoch}.vemc"),
                               cfg, net, opt)
            if writer:
                writer.writerow(row)
    finally:
        if fh:
            fh.close()
    if encoder.store.checksum() != enc_sum:
        raise AssertionError("encoder parameters changed during stage 2")
    path = None
    if write:
        path = os.path.join(out, "model.vemc")
        save_model(path, cfg, net, opt)
    return Stage2Result(net, opt, losses, val, path, enc_sum)


def _stage2_step(cfg, net, encoder, opt, step, lr) -> float:
    bs = cfg.stage2.batch_size
    net.store.zero_grads()
    total = 0.0
    for b in range(bs):
        x, y, _ = training_sample(cfg, step * bs + b)
        d = encode(x, encoder)
        yhat, saved = net.forward(x, d)
        loss, dyhat = total_loss_and_grad(y, yhat)
        total += loss / bs
        net.backward(saved, (dyhat / bs).astype(net.dtype))
    adam_step(net.store.params, net.store.grads, opt, lr)
    return total


def step_loss(cfg: TrainConfig, net: ReconNet, encoder: DegradationEncoder, step: int) -> float:
    """Stage-2 loss of the batch for ``step`` without updating anything."""
    bs = cfg.stage2.batch_size
    total = 0.0
    for b in range(bs):
        x, y, _ = training_sample(cfg, step * bs + b)
        yhat = net(x, encode(x, encoder))
        total += total_loss_and_grad(y, yhat)[0] / bs
    return total
