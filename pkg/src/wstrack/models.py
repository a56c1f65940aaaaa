"""Model configurations: residual backbone, 1x1 localization head, optional
ConvLSTM placement, wildcat pooling, weighted presence loss, class weights,
patch-mask augmentation and checkpoints."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .convlstm import ConvLSTM, ConvLSTMState
from .nn import Backbone, BackboneConfig, Conv2d
from .tensor import DTYPE, ShapeError, load_tensor, make_rng, save_tensor, sigmoid

TOOL_NAMES = ("Grasper", "Bipolar", "Hook", "Scissors", "Clipper", "Irrigator", "SpecimenBag")
NUM_CLASSES = len(TOOL_NAMES)

# variant -> (multimap m, patch-mask augmentation, ConvLSTM placement)
VARIANTS = {
    "R+C_M1": (1, False, None),
    "R+C_M1_mask": (1, True, None),
    "R+C_M4": (4, False, None),
    "R+C_M4_mask": (4, True, None),
    "R+C+CL": (1, True, "after"),
    "R+CL+C": (1, True, "before"),
    "R+CL": (1, True, "replace"),
}
BASELINES = tuple(v for v, spec in VARIANTS.items() if spec[2] is None)
CL_VARIANTS = tuple(v for v, spec in VARIANTS.items() if spec[2] is not None)


@dataclass
class WildcatConfig:
    k_plus: int = 1
    k_minus: int = 1
    alpha: float = 0.6

    def __post_init__(self):
        if self.k_plus < 1 or self.k_minus < 1:
            raise ValueError("wildcat k_plus and k_minus must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("wildcat alpha must lie in [0, 1]")


@dataclass
class ModelConfig:
    variant: str = "R+C_M1_mask"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    multimap_m: int = 4
    pooling: WildcatConfig = field(default_factory=WildcatConfig)
    cl_hidden: int | None = None
    cl_skip: bool = True
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")

    @property
    def m(self):
        return self.multimap_m if VARIANTS[self.variant][0] > 1 else 1

    @property
    def masked(self):
        return VARIANTS[self.variant][1]

    @property
    def cl_placement(self):
        return VARIANTS[self.variant][2]

    @property
    def has_cl(self):
        return self.cl_placement is not None

    @property
    def map_kind(self):
        return "spatio-temporal" if self.cl_placement in ("after", "replace") else "spatial"

    def to_dict(self):
        return {
            "variant": self.variant,
            "backbone": self.backbone.to_dict(),
            "multimap_m": self.multimap_m,
            "pooling": {"k_plus": self.pooling.k_plus, "k_minus": self.pooling.k_minus, "alpha": self.pooling.alpha},
            "cl_hidden": self.cl_hidden,
            "cl_skip": self.cl_skip,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            variant=d["variant"],
            backbone=BackboneConfig(**d["backbone"]),
            multimap_m=d["multimap_m"],
            pooling=WildcatConfig(**d["pooling"]),
            cl_hidden=d.get("cl_hidden"),
            cl_skip=d.get("cl_skip", True),
            num_classes=d.get("num_classes", NUM_CLASSES),
        )


@dataclass
class HeatMapStack:
    maps: np.ndarray
    frame_index: int
    kind: str


def wildcat_pool(maps, cfg: WildcatConfig):
    """Per-channel score = mean of the k_plus largest values + alpha * mean of
    the k_minus smallest values. ``maps``: (N, C, h, w). Returns ``(scores, cache)``."""
    maps = np.asarray(maps, dtype=DTYPE)
    if maps.ndim == 3:
        maps = maps[None]
    n, c, h, w = maps.shape
    if cfg.k_plus + cfg.k_minus > h * w:
        raise ValueError(f"wildcat: k_plus + k_minus = {cfg.k_plus + cfg.k_minus} exceeds {h * w} pixels")
    flat = maps.reshape(n, c, h * w)
    order = np.argsort(flat, axis=-1, kind="stable")
    top = order[..., -cfg.k_plus:]
    bot = order[..., :cfg.k_minus]
    scores = np.take_along_axis(flat, top, -1).mean(-1) + cfg.alpha * np.take_along_axis(flat, bot, -1).mean(-1)
    return scores, (maps.shape, top, bot, cfg)


def wildcat_backward(d_scores, cache):
    shape, top, bot, cfg = cache
    n, c, h, w = shape
    d = np.zeros((n, c, h * w))
    np.put_along_axis(d, top, (d_scores / cfg.k_plus)[..., None], -1)
    # top and bottom index sets are disjoint since k_plus + k_minus <= pixels
    np.put_along_axis(d, bot, (cfg.alpha * d_scores / cfg.k_minus)[..., None], -1)
    return d.reshape(shape)


def multimap_reduce(maps, m):
    """Average each consecutive group of ``m`` channels: (N, m*C, h, w) -> (N, C, h, w)."""
    n, mc, h, w = maps.shape
    if m < 1 or mc % m:
        raise ShapeError(f"multimap_reduce: {mc} channels not divisible by m={m}")
    if m == 1:
        return maps
    return maps.reshape(n, mc // m, m, h, w).mean(axis=2)


def multimap_reduce_backward(d_out, m):
    if m == 1:
        return d_out
    return np.repeat(d_out / m, m, axis=1)


def presence_from_logits(logits):
    """Probabilities and presence decisions; present iff prob >= 0.5 iff logit >= 0."""
    logits = np.asarray(logits, dtype=DTYPE)
    return sigmoid(logits), logits >= 0


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


@dataclass
class ClassWeights:
    w: np.ndarray
    median_freq: float
    freqs: np.ndarray


def compute_class_weights(labels):
    """Median-frequency class weights from a (frames, classes) binary label matrix."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"labels must be (frames, classes), got {labels.shape}")
    freqs = labels.astype(np.int64).sum(axis=0)
    missing = [TOOL_NAMES[c] if c < NUM_CLASSES else str(c) for c in np.flatnonzero(freqs == 0)]
    if missing:
        raise ValueError(f"class coverage: no positive training frames for {', '.join(missing)}")
    med = float(np.median(freqs))
    return ClassWeights(w=med / freqs.astype(DTYPE), median_freq=med, freqs=freqs)


def weighted_bce_loss(logits, labels, weights):
    """Class-weighted binary cross-entropy on logits.

    Per class c: (1/N) sum_n [ W_c y softplus(-z) + (1 - y) softplus(z) ],
    summed over classes; the weight scales only the positive-label term.
    Returns ``(loss, d_logits)``.
    """
    z = np.asarray(logits, dtype=DTYPE)
    y = np.asarray(labels)
    if z.ndim == 1:
        z, y = z[None], y[None]
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} vs labels {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    y = y.astype(DTYPE)
    w = weights.w if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=DTYPE)
    n = z.shape[0]
    pos = w * y * _softplus(-z)
    neg = (1.0 - y) * _softplus(z)
    loss = float((pos + neg).sum() / n)
    s = sigmoid(z)
    d = (-w * y * (1.0 - s) + (1.0 - y) * s) / n
    return loss, d


def patch_mask(frame, rng, patch=16, p=0.5, fill=None):
    """Replace each cell of a ``patch`` x ``patch`` grid with ``fill`` (per-channel
    mean pixel) with probability ``p``. ``frame``: (C, H, W) or (N, C, H, W)."""
    x = np.array(frame, dtype=DTYPE, copy=True)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    n, c, h, w = x.shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} larger than frame {h}x{w}")
    fill = np.zeros(c) if fill is None else np.broadcast_to(np.asarray(fill, dtype=DTYPE), (c,))
    gh, gw = -(-h // patch), -(-w // patch)
    hit = rng.random((n, gh, gw)) < p
    pix = np.repeat(np.repeat(hit, patch, axis=1), patch, axis=2)[:, :h, :w]
    x = np.where(pix[:, None], fill[None, :, None, None], x)
    return x[0] if squeeze else x


class Model:
    """Backbone + head + optional ConvLSTM + wildcat pooling."""

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        rng = make_rng(seed)
        self.backbone = Backbone(config.backbone, rng)
        feat_c = config.backbone.out_channels
        nc = config.num_classes
        placement = config.cl_placement
        self.cl = None
        head_in = feat_c
        if placement == "before":
            hidden = config.cl_hidden or feat_c
            self.cl = ConvLSTM(feat_c, hidden, rng, skip=config.cl_skip)
            head_in = hidden
        self.head = None
        if placement != "replace":
            self.head = Conv2d(head_in, config.m * nc, 1, rng, padding=0, name="head", group="head")
        if placement == "after":
            self.cl = ConvLSTM(nc, nc, rng, skip=config.cl_skip, channel_independent=True)
        elif placement == "replace":
            self.cl = ConvLSTM(feat_c, nc, rng, skip=False, channel_independent=True, init_scale=1.0)
        self.backbone_frozen = False
        self._pool_cache = None
        self._seq_shape = None

    def parameters(self):
        ps = list(self.backbone.parameters())
        if self.head is not None:
            ps += self.head.parameters()
        if self.cl is not None:
            ps += self.cl.parameters()
        return ps

    def trainable_parameters(self):
        return [p for p in self.parameters() if not (self.backbone_frozen and p.group == "backbone")]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def freeze_backbone(self, frozen=True):
        self.backbone_frozen = frozen
        for p in self.backbone.parameters():
            p.frozen = frozen

    def initial_state(self, h, w):
        if self.cl is None:
            return None
        return self.cl.zero_state(1, h, w)

    def forward(self, x, state=None, keep=True):
        """``x``: (T, C, H, W) preprocessed frames. For ConvLSTM variants T is
        time within one video; otherwise frames are independent.

        Returns ``(maps, logits, new_state)`` with maps (T, classes, h', w')."""
        cfg = self.config
        if x.ndim != 4:
            raise ShapeError(f"model input must be (T, C, H, W), got {x.shape}")
        if self.cl is None and state is not None:
            raise ValueError(f"variant {cfg.variant} has no ConvLSTM; a recurrent state cannot be supplied")
        feats = self.backbone.forward(x, keep=keep and not self.backbone_frozen)
        t = feats.shape[0]
        h, w = feats.shape[2:]
        if self.cl is not None and state is None:
            state = self.initial_state(h, w)
        placement = cfg.cl_placement
        if placement == "before":
            z, state = self.cl.forward(feats[:, None], state, keep)
            maps = multimap_reduce(self.head.forward(z[:, 0], keep), cfg.m)
        elif placement == "after":
            a = multimap_reduce(self.head.forward(feats, keep), cfg.m)
            out, state = self.cl.forward(a[:, None], state, keep)
            maps = out[:, 0]
        elif placement == "replace":
            out, state = self.cl.forward(feats[:, None], state, keep)
            maps = out[:, 0]
        else:
            maps = multimap_reduce(self.head.forward(feats, keep), cfg.m)
        logits, self._pool_cache = wildcat_pool(maps, cfg.pooling)
        self._seq_shape = (t, h, w)
        return maps, logits, state

    def activation_pattern(self):
        """Digest of the piecewise-linear switches taken by the last forward
        (ReLU signs, wildcat selections). Valid between forward and backward."""
        h = hashlib.sha256()
        h.update(np.packbits(self.backbone._stem_out > 0).tobytes())
        for b in self.backbone.blocks:
            h.update(np.packbits(b._a1 > 0).tobytes())
            h.update(np.packbits(b._out > 0).tobytes())
        _, top, bot, _ = self._pool_cache
        h.update(np.sort(top, axis=-1).tobytes())
        h.update(np.sort(bot, axis=-1).tobytes())
        return h.hexdigest()

    def backward(self, d_logits):
        cfg = self.config
        d_maps = wildcat_backward(d_logits, self._pool_cache)
        placement = cfg.cl_placement
        if placement == "before":
            dz = self.head.backward(multimap_reduce_backward(d_maps, cfg.m))
            d_feats = self.cl.backward(dz[:, None])[:, 0]
        elif placement == "after":
            da = self.cl.backward(d_maps[:, None])[:, 0]
            d_feats = self.head.backward(multimap_reduce_backward(da, cfg.m), need_input_grad=not self.backbone_frozen)
        elif placement == "replace":
            d_feats = self.cl.backward(d_maps[:, None])[:, 0]
        else:
            d_feats = self.head.backward(multimap_reduce_backward(d_maps, cfg.m), need_input_grad=not self.backbone_frozen)
        if not self.backbone_frozen:
            self.backbone.backward(d_feats)
        self._pool_cache = None

    def map_size(self, frame_h, frame_w):
        return self.config.backbone.feature_size(frame_h, frame_w)


def preprocess(frames, downsample=1, pixel_mean=None, scale=64.0):
    """uint8/float frames (T, H, W, 3) -> float64 (T, 3, H/d, W/d), mean-centred."""
    x = np.asarray(frames, dtype=DTYPE)
    if x.ndim == 3:
        x = x[None]
    x = x.transpose(0, 3, 1, 2)
    if pixel_mean is not None:
        x = x - np.asarray(pixel_mean, dtype=DTYPE)[None, :, None, None]
    if downsample > 1:
        t, c, h, w = x.shape
        h2, w2 = h // downsample, w // downsample
        x = x[:, :, :h2 * downsample, :w2 * downsample].reshape(t, c, h2, downsample, w2, downsample).mean(axis=(3, 5))
    return np.ascontiguousarray(x / scale)


def save_checkpoint(model: Model, path, seed, epoch, extra=None):
    """Directory checkpoint: ``manifest.json`` plus one tensor blob per parameter."""
    os.makedirs(os.path.join(path, "params"), exist_ok=True)
    entries = []
    for i, p in enumerate(model.parameters()):
        fname = f"params/{i:03d}_{p.name}.t4"
        save_tensor(os.path.join(path, fname), p.value)
        entries.append({"name": p.name, "shape": list(p.shape), "file": fname})
    manifest = {
        "format": "wstrack-checkpoint/1",
        "variant": model.config.variant,
        "config": model.config.to_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "params": entries,
    }
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_checkpoint(path):
    """Returns ``(model, manifest)``."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    model = Model(ModelConfig.from_dict(manifest["config"]), seed=manifest["seed"])
    params = model.parameters()
    if len(params) != len(manifest["params"]):
        raise ValueError(f"checkpoint has {len(manifest['params'])} tensors, model expects {len(params)}")
    for p, entry in zip(params, manifest["params"]):
        if p.name != entry["name"] or list(p.shape) != entry["shape"]:
            raise ValueError(f"checkpoint tensor {entry['name']} {entry['shape']} does not match {p.name} {list(p.shape)}")
        p.value[...] = load_tensor(os.path.join(path, entry["file"]), p.shape)
    return model, manifest


def copy_parameters(src: Model, dst: Model, groups=("backbone", "head")):
    """Copy parameters of the given groups between models with equal layouts."""
    by_name = {p.name: p for p in src.parameters()}
    for p in dst.parameters():
        if p.group in groups and p.name in by_name:
            q = by_name[p.name]
            if q.shape != p.shape:
                raise ShapeError(f"cannot copy {p.name}: {q.shape} vs {p.shape}")
            p.value[...] = q.value
