"""Labels-only dataset access for training and inference.

Nothing in this module can read ground-truth boxes: every file access goes
through :func:`open_training_file`, which refuses paths inside the dataset's
``eval/`` subtree.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .synthcam import read_ppm


class FirewallError(PermissionError):
    """Raised when the training path tries to read evaluation-only data."""


def _inside(path, folder):
    path = os.path.realpath(path)
    folder = os.path.realpath(folder)
    return os.path.commonpath([path, folder]) == folder


def open_training_file(root, path, mode="r"):
    if _inside(path, os.path.join(root, "eval")):
        raise FirewallError(f"training code may not read evaluation data: {path}")
    return open(path, mode)


def read_labels(path, num_classes=7, root=None):
    """Parse a labels file (``frame_id,b0,...``) into a (frames, classes) bool array."""
    rows = []
    opener = (lambda p: open_training_file(root, p)) if root else open
    with opener(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != num_classes + 1:
                raise ValueError(f"{path}:{lineno}: expected {num_classes + 1} fields, got {len(parts)}")
            try:
                fid = int(parts[0])
                bits = [int(p) for p in parts[1:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-integer field in {line!r}") from None
            if fid != len(rows):
                raise ValueError(f"{path}:{lineno}: frame id {fid} out of order (expected {len(rows)})")
            if any(b not in (0, 1) for b in bits):
                raise ValueError(f"{path}:{lineno}: labels must be 0 or 1")
            rows.append(bits)
    return np.array(rows, dtype=bool).reshape(-1, num_classes)


@dataclass
class VideoView:
    """Frames and presence labels of one video (no boxes)."""

    id: str
    frames: np.ndarray
    labels: np.ndarray


class PresenceDataset:
    """Read-only, labels-only view of a generated dataset split."""

    def __init__(self, root, split="train", num_classes=7):
        self.root = root
        self.split = split
        self.num_classes = num_classes
        with open_training_file(root, os.path.join(root, "manifest.json")) as fh:
            self.manifest = json.load(fh)
        if split not in self.manifest.get("splits", {}):
            raise ValueError(f"split {split!r} not in manifest")
        self.video_ids = list(self.manifest["splits"][split])
        self._cache = {}

    def __len__(self):
        return len(self.video_ids)

    def video(self, vid) -> VideoView:
        if vid not in self._cache:
            vdir = os.path.join(self.root, "videos", vid)
            labels = read_labels(os.path.join(vdir, "labels.csv"), self.num_classes, root=self.root)
            fdir = os.path.join(vdir, "frames")
            names = sorted(n for n in os.listdir(fdir) if n.endswith(".ppm"))
            if len(names) != len(labels):
                raise ValueError(f"{vid}: {len(names)} frames but {len(labels)} label rows")
            frames = []
            for n in names:
                p = os.path.join(fdir, n)
                if _inside(p, os.path.join(self.root, "eval")):
                    raise FirewallError(p)
                frames.append(read_ppm(p))
            self._cache[vid] = VideoView(vid, np.stack(frames), labels)
        return self._cache[vid]

    def videos(self):
        return [self.video(v) for v in self.video_ids]

    def all_labels(self):
        return np.concatenate([self.video(v).labels for v in self.video_ids])

    def pixel_mean(self):
        """Mean RGB pixel over every frame of the split."""
        total = np.zeros(3)
        count = 0
        for v in self.videos():
            total += v.frames.reshape(-1, 3).sum(axis=0, dtype=np.float64)
            count += v.frames.shape[0] * v.frames.shape[1] * v.frames.shape[2]
        return total / count
