"""Two-phase training: momentum SGD with weight decay, stepwise / exponential
learning-rate schedules, and truncated BPTT with state carried across the
windows of one video.

Phase 1 trains a frame-level baseline (backbone + head). Phase 2 copies that
backbone and head into a ConvLSTM variant, freezes the backbone and trains the
ConvLSTM and head on consecutive windows of each video.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .convlstm import StateCarrier
from .data import PresenceDataset
from .models import Model, ModelConfig, compute_class_weights, copy_parameters, patch_mask, preprocess, weighted_bce_loss
from .nn import BackboneConfig
from .tensor import make_rng

log = logging.getLogger(__name__)

AUGMENTATIONS = ("patch_mask", "rotation", "horizontal_flip")


class NonFiniteGradient(FloatingPointError):
    """A gradient contained NaN or inf; the update was not applied."""


@dataclass(frozen=True)
class StepSchedule:
    lr0: float
    gamma: float = 0.1
    period: int = 50


@dataclass(frozen=True)
class ExpSchedule:
    """lr0 * exp(-lam * step) with lam chosen so the rate halves every ``half_life`` steps."""

    lr0: float
    half_life: float = 20.0

    @property
    def lam(self):
        return math.log(2.0) / self.half_life


def lr_at(schedule, step):
    if step < 0:
        raise ValueError("step must be >= 0")
    if isinstance(schedule, StepSchedule):
        return schedule.lr0 * schedule.gamma ** (step // schedule.period)
    if isinstance(schedule, ExpSchedule):
        return schedule.lr0 * math.exp(-schedule.lam * step)
    raise TypeError(f"unknown schedule {schedule!r}")


def schedule_to_dict(s):
    if s is None:
        return None
    kind = "step" if isinstance(s, StepSchedule) else "exp"
    return {"kind": kind, **{k: getattr(s, k) for k in s.__dataclass_fields__}}


def schedule_from_dict(d):
    if d is None:
        return None
    d = dict(d)
    kind = d.pop("kind")
    return StepSchedule(**d) if kind == "step" else ExpSchedule(**d)


@dataclass
class OptimizerConfig:
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def sgd_momentum_step(param, lr, cfg: OptimizerConfig):
    """v <- mu v + g + wd w;  w <- w - lr v. Raises :class:`NonFiniteGradient`
    (leaving the parameter untouched) when the gradient is not finite."""
    if param.frozen:
        return param
    if not np.all(np.isfinite(param.grad)):
        raise NonFiniteGradient(f"non-finite gradient in {param.name}; step aborted")
    param.velocity *= cfg.momentum
    param.velocity += param.grad
    if cfg.weight_decay:
        param.velocity += cfg.weight_decay * param.value
    if param.mask is not None:
        param.velocity *= param.mask
    param.value -= lr * param.velocity
    return param


@dataclass
class PhasePlan:
    epochs: int
    lr_head: object
    lr_backbone: object = None
    weight_decay: float = 1e-4
    augment: tuple = ("patch_mask", "rotation", "horizontal_flip")

    def __post_init__(self):
        bad = set(self.augment) - set(AUGMENTATIONS)
        if bad:
            raise ValueError(f"unknown augmentation(s) {sorted(bad)}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "lr_head": schedule_to_dict(self.lr_head),
            "lr_backbone": schedule_to_dict(self.lr_backbone),
            "weight_decay": self.weight_decay,
            "augment": list(self.augment),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["epochs"], schedule_from_dict(d["lr_head"]), schedule_from_dict(d["lr_backbone"]),
                   d["weight_decay"], tuple(d["augment"]))


@dataclass
class TrainPlan:
    phase1: PhasePlan
    phase2: PhasePlan
    unroll_T: int = 16
    batch: int = 16
    momentum: float = 0.9
    patch: int = 16
    patch_p: float = 0.5
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if not 1 <= self.batch <= 16:
            raise ValueError("batch must lie in 1..16")
        if self.unroll_T < 1:
            raise ValueError("unroll_T must be >= 1")
        extra = set(self.phase2.augment) - {"patch_mask"}
        if extra:
            raise ValueError(f"phase 2 allows patch masking only, got {sorted(extra)}")

    def to_dict(self):
        return {
            "phase1": self.phase1.to_dict(),
            "phase2": self.phase2.to_dict(),
            "unroll_T": self.unroll_T,
            "batch": self.batch,
            "momentum": self.momentum,
            "patch": self.patch,
            "patch_p": self.patch_p,
            "backbone": self.backbone.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(PhasePlan.from_dict(d["phase1"]), PhasePlan.from_dict(d["phase2"]), d["unroll_T"], d["batch"],
                   d["momentum"], d["patch"], d["patch_p"], BackboneConfig(**d["backbone"]))


DESK_BACKBONE = BackboneConfig(stages=[(1, 16, 2), (1, 24, 2), (1, 32, 1), (1, 32, 1)], stem_channels=8, input_downsample=2)

PRESETS = {
    "paper": TrainPlan(
        PhasePlan(160, StepSchedule(1e-3), StepSchedule(1e-1), 1e-4),
        PhasePlan(120, ExpSchedule(1e-3), None, 1e-5, ("patch_mask",)),
    ),
    "desk": TrainPlan(
        PhasePlan(12, StepSchedule(2e-2, period=8), StepSchedule(2e-2, period=8), 1e-4),
        PhasePlan(8, ExpSchedule(1e-2, half_life=4), None, 1e-5, ("patch_mask",)),
        backbone=DESK_BACKBONE,
    ),
}


def get_plan(preset, **overrides):
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    return replace(PRESETS[preset], **overrides)


def _state_digest(state):
    if state is None:
        return None
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(state.hidden).tobytes())
    h.update(np.ascontiguousarray(state.cell).tobytes())
    return h.hexdigest()[:16]


@dataclass
class TrainResult:
    model: Model
    log: list
    class_weights: np.ndarray
    pixel_mean: np.ndarray
    state_trace: list = field(default_factory=list)
    baseline: Model | None = None


def _augment(x, rng, aug, masked, plan, downsample):
    """Per-frame augmentation of a preprocessed (n, C, H, W) batch. The mean
    pixel maps to zero after preprocessing, so masked patches are filled with 0."""
    x = x.copy()
    n = x.shape[0]
    if "horizontal_flip" in aug:
        flip = rng.random(n) < 0.5
        x[flip] = x[flip][..., ::-1]
    if "rotation" in aug:
        # 180 degrees keeps the frame shape for non-square frames
        rot = rng.random(n) < 0.5
        x[rot] = x[rot][..., ::-1, ::-1]
    if masked and "patch_mask" in aug:
        x = patch_mask(x, rng, patch=max(1, plan.patch // downsample), p=plan.patch_p)
    return x


def _step_all(params, lr_for, opt):
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in {p.name}; step aborted")
    for p in params:
        sgd_momentum_step(p, lr_for(p), opt)


def _record(logbook, sink, **rec):
    logbook.append(rec)
    if sink is not None:
        sink.write(json.dumps(rec, sort_keys=True) + "\n")
        sink.flush()


def _prepare(dataset, pixel_mean, downsample):
    out = []
    for v in dataset.videos():
        out.append((v.id, preprocess(v.frames, downsample, pixel_mean), v.labels))
    return out


def train_phase1(model, videos, weights, plan, rng, logbook, sink=None):
    ph = plan.phase1
    cfg = model.config
    opt = OptimizerConfig(plan.momentum, ph.weight_decay)
    frames = np.concatenate([x for _, x, _ in videos])
    labels = np.concatenate([y for _, _, y in videos])
    ds = cfg.backbone.input_downsample
    params = model.trainable_parameters()
    for epoch in range(ph.epochs):
        t0 = time.perf_counter()
        lr_h = lr_at(ph.lr_head, epoch)
        lr_b = lr_at(ph.lr_backbone or ph.lr_head, epoch)
        order = rng.permutation(len(frames))
        total, batches = 0.0, 0
        for s in range(0, len(order), plan.batch):
            idx = np.sort(order[s:s + plan.batch])
            x = _augment(frames[idx], rng, ph.augment, cfg.masked, plan, ds)
            model.zero_grad()
            _, logits, _ = model.forward(x)
            loss, d = weighted_bce_loss(logits, labels[idx], weights)
            model.backward(d)
            _step_all(params, lambda p: lr_b if p.group == "backbone" else lr_h, opt)
            total += loss
            batches += 1
        _record(logbook, sink, phase=1, epoch=epoch, lr_backbone=lr_b, lr_head=lr_h, loss=total / max(batches, 1))
        log.info("phase 1 epoch %d loss %.5f (%.1fs)", epoch, total / max(batches, 1), time.perf_counter() - t0)


def train_phase2(model, videos, weights, plan, rng, logbook, sink=None, trace=None):
    ph = plan.phase2
    cfg = model.config
    opt = OptimizerConfig(plan.momentum, ph.weight_decay)
    model.freeze_backbone()
    params = model.trainable_parameters()
    ds = cfg.backbone.input_downsample
    T = plan.unroll_T
    fh, fw = cfg.backbone.feature_size(videos[0][1].shape[2] * ds, videos[0][1].shape[3] * ds)
    for epoch in range(ph.epochs):
        t0 = time.perf_counter()
        lr = lr_at(ph.lr_head, epoch)
        carrier = StateCarrier()
        total, batches = 0.0, 0
        for vi in rng.permutation(len(videos)):
            vid, frames, labels = videos[vi]
            for s in range(0, len(frames), T):
                x = _augment(frames[s:s + T], rng, ph.augment, cfg.masked, plan, ds)
                state = carrier.initial(vid, s, model.cl.zero_state(1, fh, fw))
                model.zero_grad()
                _, logits, final = model.forward(x, state)
                loss, d = weighted_bce_loss(logits, labels[s:s + T], weights)
                model.backward(d)
                _step_all(params, lambda p: lr, opt)
                if trace is not None:
                    trace.append((int(epoch), vid, int(s), _state_digest(state), _state_digest(final)))
                carrier.store(vid, s + len(x) - 1, final)
                total += loss
                batches += 1
        _record(logbook, sink, phase=2, epoch=epoch, lr_backbone=0.0, lr_head=lr, loss=total / max(batches, 1))
        log.info("phase 2 epoch %d loss %.5f (%.1fs)", epoch, total / max(batches, 1), time.perf_counter() - t0)


def baseline_config(config: ModelConfig):
    """The frame-level model that phase 1 trains for ``config``."""
    if not config.has_cl:
        return config
    return replace(config, variant="R+C_M1_mask")


def train(dataset: PresenceDataset, config: ModelConfig, plan: TrainPlan, seed=0, init=None, sink=None, trace=False):
    """Train ``config`` on the labels-only ``dataset``.

    ``init``: an already trained baseline :class:`Model` to start phase 2
    from (skips phase 1). ``sink``: optional text stream receiving one JSON
    record per epoch. Returns a :class:`TrainResult`.
    """
    if not isinstance(dataset, PresenceDataset):
        raise TypeError("train() accepts a labels-only PresenceDataset")
    rng = make_rng(seed)
    labels = dataset.all_labels()
    weights = compute_class_weights(labels).w
    pixel_mean = dataset.pixel_mean()
    videos = _prepare(dataset, pixel_mean, config.backbone.input_downsample)
    logbook = []
    base_cfg = baseline_config(config)
    if init is None:
        base = Model(base_cfg, seed=seed)
        train_phase1(base, videos, weights, plan, rng, logbook, sink)
    else:
        base = init
        if base.config.to_dict()["backbone"] != config.backbone.to_dict():
            raise ValueError("initial model backbone does not match the requested configuration")
    result = TrainResult(base, logbook, weights, pixel_mean, baseline=base)
    if config.has_cl:
        model = Model(config, seed=seed + 1)
        copy_parameters(base, model, groups=("backbone", "head") if config.cl_placement != "replace" else ("backbone",))
        train_phase2(model, videos, weights, plan, rng, logbook, sink, result.state_trace if trace else None)
        result.model = model
    return result
