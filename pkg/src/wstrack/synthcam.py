"""Deterministic synthetic laparoscopy-like video benchmark.

Each video shows up to seven class-distinct tools (a grey shaft entering from
the frame border and a coloured, textured tip) moving along smooth random
walks, entering and leaving the view, passing under opaque tissue occluders,
sometimes motion-blurred, with occasional all-blank segments where the scope
is withdrawn. Per-frame presence labels follow the visibility rule: class c is
present iff some instance of c shows at least ``visibility`` of its tip area.
Ground-truth tip boxes are written under ``eval/`` only.

On-disk layout::

    root/manifest.json
    root/videos/<vid>/frames/000000.ppm ...
    root/videos/<vid>/labels.csv        frame_id,b0,...,b6
    root/eval/<vid>/boxes.csv           frame_id,class_id,x,y,w,h[,instance]
"""
from __future__ import annotations

import json
import os
import shutil
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import NUM_CLASSES, TOOL_NAMES

# tip colour per class (RGB) and a darker texture colour
TIP_COLORS = np.array(
    [
        (40, 200, 60),    # Grasper: green fork
        (40, 80, 230),    # Bipolar: blue striped ellipse
        (230, 210, 40),   # Hook: yellow hook
        (40, 210, 210),   # Scissors: cyan crossed blades
        (210, 50, 200),   # Clipper: magenta notched block
        (235, 235, 235),  # Irrigator: white tube
        (240, 130, 30),   # SpecimenBag: orange chequered bag
    ],
    dtype=np.float64,
)
TEXTURE_SHADE = 0.72
SHAFT_COLOR = np.array((120.0, 122.0, 128.0))
TISSUE_COLOR = np.array((168.0, 72.0, 70.0))
OCCLUDER_COLOR = np.array((196.0, 120.0, 110.0))
SKEW_RATIOS = (1, 2, 4, 4, 4, 8, 16)


@dataclass
class SceneConfig:
    width: int = 160
    height: int = 120
    num_classes: int = NUM_CLASSES
    presence_rates: tuple = (0.5, 0.3, 0.45, 0.25, 0.25, 0.3, 0.25)
    mean_on_frames: float = 40.0
    velocity_max: float = 3.0
    entry_speed: float = 4.0
    tip_scale: float = 1.0
    occluder_rate: float = 0.02
    occluder_frames: tuple = (8, 20)
    blur_prob: float = 0.05
    blank_rate: float = 0.004
    blank_frames: tuple = (6, 14)
    visibility: float = 0.2
    noise_sigma: float = 3.0
    multi_instance: bool = False
    presence_schedule: str = "random"
    fps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ValueError("frame dims must be >= 32")
        if not 1 <= self.num_classes <= NUM_CLASSES:
            raise ValueError(f"num_classes must be in 1..{NUM_CLASSES}")
        for name in ("occluder_rate", "blur_prob", "blank_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if any(not 0.0 < r < 1.0 for r in self.presence_rates[: self.num_classes]):
            raise ValueError("presence rates must lie in (0, 1)")
        if not 0.0 < self.visibility <= 1.0:
            raise ValueError("visibility must lie in (0, 1]")
        if self.presence_schedule not in ("random", "skewed"):
            raise ValueError("presence_schedule must be 'random' or 'skewed'")
        self.presence_rates = tuple(float(r) for r in self.presence_rates)
        self.occluder_frames = tuple(self.occluder_frames)
        self.blank_frames = tuple(self.blank_frames)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class GTBox:
    class_id: int
    x: int
    y: int
    w: int
    h: int
    instance: int = 0


@dataclass
class SynthVideo:
    frames: np.ndarray               # (T, H, W, 3) uint8
    presence: np.ndarray             # (T, classes) bool
    gt_boxes: list                   # per frame: list[GTBox]
    visible_fraction: np.ndarray = field(default=None)  # (T, instances)
    fps: int = 1


def tip_mask(shape_id, u, v, scale=1.0):
    """Tip footprint in tool-local coordinates (u along the shaft, pointing to
    the tip end; v across). Returns ``(mask, textured)`` boolean arrays."""
    u = u / scale
    v = v / scale
    au, av = np.abs(u), np.abs(v)
    if shape_id == 0:  # fork: two prongs joined at the back
        m = (au <= 12) & (((av >= 2.5) & (av <= 7.5)) | ((u <= -6) & (av <= 7.5)))
        tex = m & (u > 8)
    elif shape_id == 1:  # striped ellipse
        m = (u / 12.0) ** 2 + (v / 7.0) ** 2 <= 1.0
        tex = m & (np.floor((u + 12) / 3.0) % 2 == 1)
    elif shape_id == 2:  # hook: bar plus a side hook at the end
        m = ((au <= 12) & (av <= 3.5)) | ((u >= 7) & (u <= 12) & (v >= -3.5) & (v <= 8))
        tex = m & (u >= 7)
    elif shape_id == 3:  # crossed blades
        m = (au <= 12) & ((np.abs(v - 0.55 * u) <= 3.0) | (np.abs(v + 0.55 * u) <= 3.0))
        tex = m & (u > 0)
    elif shape_id == 4:  # notched block
        m = (au <= 11) & (av <= 7) & ~((u >= 5) & (av <= 2))
        tex = m & (av >= 5)
    elif shape_id == 5:  # long tube with rings
        m = (au <= 14) & (av <= 4)
        tex = m & (np.floor((u + 14) / 4.0) % 2 == 0)
    else:  # chequered bag
        m = u ** 2 + v ** 2 <= 12.0 ** 2
        tex = m & ((np.floor((u + 12) / 4.0) + np.floor((v + 12) / 4.0)) % 2 == 0)
    return m, tex


class _Tool:
    """Kinematic state of one tool instance."""

    def __init__(self, class_id, instance, cfg, rng):
        self.class_id = class_id
        self.instance = instance
        self.cfg = cfg
        self.state = "off"
        self.tip = np.zeros(2)
        self.vel = np.zeros(2)
        self.anchor = np.zeros(2)
        self.target = np.zeros(2)
        rate = cfg.presence_rates[class_id]
        self.q_off = 1.0 / cfg.mean_on_frames
        self.q_on = self.q_off * rate / (1.0 - rate)

    def _random_anchor(self, rng):
        w, h = self.cfg.width, self.cfg.height
        edge = rng.integers(0, 4)
        margin = 60.0
        if edge == 0:
            return np.array([rng.uniform(0, w), h + margin])
        if edge == 1:
            return np.array([-margin, rng.uniform(0.3 * h, h)])
        if edge == 2:
            return np.array([w + margin, rng.uniform(0.3 * h, h)])
        return np.array([rng.uniform(0, w), -margin])

    def _interior_point(self, rng):
        w, h = self.cfg.width, self.cfg.height
        return np.array([rng.uniform(0.18 * w, 0.82 * w), rng.uniform(0.18 * h, 0.82 * h)])

    def enter(self, rng, instant=False):
        self.anchor = self._random_anchor(rng)
        self.target = self._interior_point(rng)
        self.vel = np.zeros(2)
        if instant:
            self.tip = self.target.copy()
            self.state = "on"
        else:
            # start just outside the frame on the line from anchor to target
            d = self.target - self.anchor
            s = np.linspace(0.0, 1.0, 401)
            pts = self.anchor[None] + s[:, None] * d[None]
            inside = (pts[:, 0] >= 0) & (pts[:, 0] < self.cfg.width) & (pts[:, 1] >= 0) & (pts[:, 1] < self.cfg.height)
            s_in = s[np.argmax(inside)]
            self.tip = self.anchor + d * max(0.0, s_in - 14.0 / np.hypot(*d))
            self.state = "entering"

    def step(self, rng, allow_switch=True):
        cfg = self.cfg
        if self.state == "off":
            if allow_switch and rng.random() < self.q_on:
                self.enter(rng)
            return
        if self.state == "entering":
            d = self.target - self.tip
            dist = np.hypot(*d)
            if dist <= cfg.entry_speed:
                self.tip = self.target.copy()
                self.state = "on"
            else:
                self.tip = self.tip + d / dist * cfg.entry_speed
            return
        if self.state == "exiting":
            d = self.anchor - self.tip
            dist = np.hypot(*d)
            self.tip = self.tip + d / dist * cfg.entry_speed
            if not self._near_frame():
                self.state = "off"
            return
        # on: smooth bounded random walk
        self.vel = 0.85 * self.vel + rng.normal(0.0, 0.6, 2)
        speed = np.hypot(*self.vel)
        if speed > cfg.velocity_max:
            self.vel *= cfg.velocity_max / speed
        self.tip = self.tip + self.vel
        lo = np.array([0.12 * cfg.width, 0.12 * cfg.height])
        hi = np.array([0.88 * cfg.width, 0.88 * cfg.height])
        for k in range(2):
            if self.tip[k] < lo[k]:
                self.tip[k] = 2 * lo[k] - self.tip[k]
                self.vel[k] = abs(self.vel[k])
            elif self.tip[k] > hi[k]:
                self.tip[k] = 2 * hi[k] - self.tip[k]
                self.vel[k] = -abs(self.vel[k])
        if allow_switch and rng.random() < self.q_off:
            self.state = "exiting"

    def _near_frame(self):
        pad = 20.0
        x, y = self.tip
        return -pad <= x <= self.cfg.width + pad and -pad <= y <= self.cfg.height + pad

    @property
    def active(self):
        return self.state != "off"

    def local_coords(self, xs, ys):
        d = self.tip - self.anchor
        n = np.hypot(*d)
        ax = d / n if n > 0 else np.array([1.0, 0.0])
        rx, ry = xs - self.tip[0], ys - self.tip[1]
        u = rx * ax[0] + ry * ax[1]
        v = -rx * ax[1] + ry * ax[0]
        return u, v


def _background(cfg, rng):
    h, w = cfg.height, cfg.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    field_ = np.zeros((h, w))
    for _ in range(4):
        fx, fy = rng.uniform(0.01, 0.05, 2)
        ph = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (fx * xs + fy * ys) + ph)
    field_ /= 4.0
    cy, cx = (h - 1) / 2, (w - 1) / 2
    vignette = 1.0 - 0.35 * (((ys - cy) / cy) ** 2 + ((xs - cx) / cx) ** 2) / 2
    base = TISSUE_COLOR[None, None, :] * (1.0 + 0.18 * field_[..., None])
    return base * vignette[..., None]


def _motion_blur(img, length):
    k = np.ones(length) / length
    pad = length // 2
    padded = np.pad(img, ((0, 0), (pad, length - 1 - pad), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for i in range(length):
        out += k[i] * padded[:, i:i + img.shape[1]]
    return out


def _skewed_windows(frames, num_classes, rng):
    if frames % 16:
        raise ValueError("skewed presence schedule needs frames_per_video divisible by 16")
    unit = frames // 16
    wins = []
    for c in range(num_classes):
        length = SKEW_RATIOS[c] * unit
        start = int(rng.integers(0, frames - length + 1))
        wins.append((start, start + length))
    return wins


def generate_video(cfg: SceneConfig, seed: int, frames: int) -> SynthVideo:
    """Render one video deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    skewed = cfg.presence_schedule == "skewed"
    bg = _background(cfg, rng)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # window around the tip centre to measure its full (unclipped) area
    r = int(np.ceil(20 * cfg.tip_scale))
    wys, wxs = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)

    tools = [_Tool(c, 0, cfg, rng) for c in range(cfg.num_classes)]
    if cfg.multi_instance:
        tools.append(_Tool(0, 1, cfg, rng))
    order = rng.permutation(len(tools))
    windows = _skewed_windows(frames, cfg.num_classes, rng) if skewed else None
    if skewed:
        # fixed, non-overlapping home cells so every scheduled tip is fully visible
        cells = [(0.2, 0.25), (0.5, 0.25), (0.8, 0.25), (0.2, 0.75), (0.5, 0.75), (0.8, 0.75), (0.5, 0.5)]
        homes = [np.array([fx * w, fy * h]) for fx, fy in cells]
    else:
        for t in tools:
            # warm start so the first frames already show a stationary mix
            if rng.random() < cfg.presence_rates[t.class_id]:
                t.enter(rng, instant=True)

    out_frames = np.empty((frames, h, w, 3), dtype=np.uint8)
    presence = np.zeros((frames, cfg.num_classes), dtype=bool)
    vis = np.zeros((frames, len(tools)))
    boxes = []
    occluders = []
    blank_left = 0
    for fi in range(frames):
        if skewed:
            for t in tools:
                s, e = windows[t.class_id]
                if s <= fi < e:
                    t.state = "on"
                    t.anchor = np.array([homes[t.class_id][0], h + 60.0])
                    jitter = rng.uniform(-1, 1, 2)
                    t.tip = homes[t.class_id] + jitter
                else:
                    t.state = "off"
        elif fi > 0:
            for t in tools:
                t.step(rng)

        if not skewed:
            if blank_left == 0 and rng.random() < cfg.blank_rate:
                blank_left = int(rng.integers(cfg.blank_frames[0], cfg.blank_frames[1] + 1))
            if rng.random() < cfg.occluder_rate:
                occluders.append({
                    "c": rng.uniform([0, 0], [w, h]),
                    "r": rng.uniform(14, 28, 2),
                    "v": rng.normal(0, 0.8, 2),
                    "left": int(rng.integers(cfg.occluder_frames[0], cfg.occluder_frames[1] + 1)),
                })
        img = bg * rng.uniform(0.92, 1.08)
        owner = np.full((h, w), -1, dtype=np.int64)     # index of the tool tip painted at a pixel
        full_area = np.zeros(len(tools))
        # all shafts first, then all tips, so tips are only hidden by tips and occluders
        locals_ = {}
        for ti in order:
            t = tools[ti]
            if not t.active:
                continue
            u, v = t.local_coords(xs, ys)
            locals_[ti] = (u, v)
            shaft = (u < -8 * cfg.tip_scale) & (np.abs(v) <= 3.5 * cfg.tip_scale)
            shade = 0.85 + 0.15 * np.cos(v / 3.5)
            img[shaft] = SHAFT_COLOR * shade[shaft][:, None]
        for ti in order:
            t = tools[ti]
            if not t.active:
                continue
            u, v = locals_[ti]
            tip, tex = tip_mask(t.class_id, u, v, cfg.tip_scale)
            col = TIP_COLORS[t.class_id]
            img[tip] = col
            img[tex] = col * TEXTURE_SHADE
            owner[tip] = ti
            eu, ev = t.local_coords(wxs + t.tip[0], wys + t.tip[1])
            full_area[ti] = tip_mask(t.class_id, eu, ev, cfg.tip_scale)[0].sum()
        alive = []
        for oc in occluders:
            rx = (xs - oc["c"][0]) / oc["r"][0]
            ry = (ys - oc["c"][1]) / oc["r"][1]
            occ = rx ** 2 + ry ** 2 <= 1.0
            img[occ] = OCCLUDER_COLOR * (0.9 + 0.1 * np.cos(3 * rx[occ]))[:, None]
            owner[occ] = -1
            oc["c"] = oc["c"] + oc["v"]
            oc["left"] -= 1
            if oc["left"] > 0:
                alive.append(oc)
        occluders = alive
        blank = blank_left > 0
        if blank:
            img = np.full((h, w, 3), 18.0)
            owner[:] = -1
            blank_left -= 1
        elif not skewed and rng.random() < cfg.blur_prob:
            img = _motion_blur(img, int(rng.integers(3, 8)))
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
        out_frames[fi] = np.clip(np.rint(img), 0, 255).astype(np.uint8)

        frame_boxes = []
        for ti, t in enumerate(tools):
            if not t.active or full_area[ti] == 0:
                continue
            visible = owner == ti
            area = int(visible.sum())
            vis[fi, ti] = area / full_area[ti]
            if area > 0 and area >= cfg.visibility * full_area[ti]:
                presence[fi, t.class_id] = True
                rows = np.flatnonzero(visible.any(axis=1))
                cols = np.flatnonzero(visible.any(axis=0))
                frame_boxes.append(GTBox(t.class_id, int(cols[0]), int(rows[0]),
                                         int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1), t.instance))
        frame_boxes.sort(key=lambda b: (b.class_id, b.instance))
        boxes.append(frame_boxes)
    return SynthVideo(out_frames, presence, boxes, vis, cfg.fps)


def split_counts(n_videos, ratios=(40, 10, 30)):
    """Train/val/test counts proportional to ``ratios``, each at least one when possible."""
    total = sum(ratios)
    counts = [max(1, int(round(n_videos * r / total))) for r in ratios]
    while sum(counts) > n_videos:
        counts[int(np.argmax(counts))] -= 1
    while sum(counts) < n_videos:
        counts[0] += 1
    return tuple(counts)


def video_seed(master_seed, index):
    return int(np.random.SeedSequence(master_seed, spawn_key=(index,)).generate_state(1, np.uint32)[0])


def write_ppm(path, img):
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    pos += 1
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3).copy()


def write_video(root, vid, video: SynthVideo):
    fdir = os.path.join(root, "videos", vid, "frames")
    os.makedirs(fdir, exist_ok=True)
    for i, frame in enumerate(video.frames):
        write_ppm(os.path.join(fdir, f"{i:06d}.ppm"), frame)
    with open(os.path.join(root, "videos", vid, "labels.csv"), "w") as fh:
        for i, row in enumerate(video.presence):
            fh.write(",".join([str(i)] + [str(int(b)) for b in row]) + "\n")
    edir = os.path.join(root, "eval", vid)
    os.makedirs(edir, exist_ok=True)
    multi = any(b.instance for fb in video.gt_boxes for b in fb)
    with open(os.path.join(edir, "boxes.csv"), "w") as fh:
        for i, fb in enumerate(video.gt_boxes):
            for b in fb:
                fields = [i, b.class_id, b.x, b.y, b.w, b.h] + ([b.instance] if multi else [])
                fh.write(",".join(str(v) for v in fields) + "\n")


def generate(cfg: SceneConfig, root, n_videos, frames_per_video, splits=None, overwrite=False, min_frames=16):
    """Render ``n_videos`` videos to ``root`` and write the manifest.

    ``splits``: optional (train, val, test) counts; defaults to the 40/10/30
    proportion. Returns the manifest dict.
    """
    if frames_per_video < min_frames:
        raise ValueError(f"frames_per_video must be >= {min_frames} (the unroll length)")
    if os.path.exists(root) and os.listdir(root):
        if not overwrite:
            raise FileExistsError(f"{root} exists and is not empty; pass overwrite to replace it")
        shutil.rmtree(root)
    counts = split_counts(n_videos) if splits is None else tuple(splits)
    if sum(counts) != n_videos:
        raise ValueError(f"split counts {counts} do not sum to {n_videos}")
    os.makedirs(root, exist_ok=True)
    names = ("train", "val", "test")
    videos = []
    idx = 0
    for split, count in zip(names, counts):
        for _ in range(count):
            vid = f"v{idx:03d}"
            s = video_seed(cfg.seed, idx)
            video = generate_video(cfg, s, frames_per_video)
            write_video(root, vid, video)
            videos.append({"id": vid, "split": split, "seed": s, "frames": frames_per_video})
            idx += 1
    manifest = {
        "format": "wstrack-synthcam/1",
        "classes": list(TOOL_NAMES[: cfg.num_classes]),
        "config": cfg.to_dict(),
        "videos": videos,
        "splits": {n: [v["id"] for v in videos if v["split"] == n] for n in names},
    }
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def read_manifest(root):
    path = os.path.join(root, "manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    for key in ("videos", "splits"):
        if key not in manifest:
            raise ValueError(f"{path}: manifest missing '{key}'")
    return manifest
