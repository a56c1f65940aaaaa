"""Frame-to-frame identity maintenance over per-class detections.

Two modes:

``baseline_iou``
    A detection extends its class's live track when its IoU with the track's
    last box reaches ``iou_gate``; among several candidates the one whose
    centre is closest to the previous box wins. A class without a live track
    births one from its best detection. Unmatched detections of a class that
    has a live track are discarded, and a track with no match dies.
``convlstm_continuity``
    A class's track lives exactly as long as the class keeps being detected;
    a gap kills it and a later detection births a new identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .localizer import Bbox

MODES = ("baseline_iou", "convlstm_continuity")


def _xywh(b):
    return b.as_tuple() if isinstance(b, Bbox) else tuple(b)


def iou(a, b, exact=False):
    """Intersection over union of two (x, y, w, h) boxes covering
    [x, x + w) x [y, y + h). ``exact`` returns a ``Fraction``."""
    ax, ay, aw, ah = _xywh(a)
    bx, by, bw, bh = _xywh(b)
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    inter = iw * ih if iw > 0 and ih > 0 else 0
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return Fraction(0) if exact else 0.0
    if exact:
        return Fraction(inter) / Fraction(union)
    return inter / union


@dataclass
class TrackerConfig:
    iou_gate: float = 0.5
    mode: str = "baseline_iou"
    max_misses: int = 0

    def __post_init__(self):
        if not 0.0 < self.iou_gate <= 1.0:
            raise ValueError("iou_gate must lie in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.max_misses < 0:
            raise ValueError("max_misses must be >= 0")


@dataclass
class Track:
    id: int
    tool: int
    birth_frame: int
    boxes: dict = field(default_factory=dict)
    status: str = "alive"
    death_frame: int | None = None
    misses: int = 0

    @property
    def last_frame(self):
        return max(self.boxes)

    @property
    def last_box(self):
        return self.boxes[self.last_frame]


def _center_dist(a, b):
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def _pixel_order(det):
    return (det.box.y, det.box.x, det.peak)


class Tracker:
    """Per-video tracker; feed frames in order through :meth:`step`."""

    def __init__(self, cfg: TrackerConfig | None = None):
        self.cfg = cfg or TrackerConfig()
        self.live: dict[int, Track] = {}
        self.tracks: list[Track] = []
        self._next_id = 1
        self.frame = None

    def _birth(self, det, frame):
        t = Track(self._next_id, det.tool, frame, {frame: det.box})
        self._next_id += 1
        self.live[det.tool] = t
        self.tracks.append(t)
        return t

    def _select(self, track, candidates):
        prev = track.last_box
        return min(candidates, key=lambda d: (_center_dist(d.box, prev), -d.confidence, _pixel_order(d)))

    def step(self, frame, detections):
        """Process one frame. Returns ``(track_ids, events)`` where
        ``track_ids[i]`` is the id assigned to ``detections[i]`` (-1 when the
        detection is discarded) and ``events`` lists ``(kind, track_id, frame)``."""
        if self.frame is not None and frame <= self.frame:
            raise ValueError(f"frames must increase: got {frame} after {self.frame}")
        self.frame = frame
        ids = [-1] * len(detections)
        events = []
        by_class: dict[int, list[int]] = {}
        for i, d in enumerate(detections):
            by_class.setdefault(d.tool, []).append(i)
        for tool in sorted(set(by_class) | set(self.live)):
            idx = by_class.get(tool, [])
            dets = [detections[i] for i in idx]
            track = self.live.get(tool)
            chosen = None
            if track is not None and dets:
                if self.cfg.mode == "baseline_iou":
                    cands = [d for d in dets if iou(d.box, track.last_box) >= self.cfg.iou_gate]
                else:
                    cands = dets
                if cands:
                    chosen = self._select(track, cands)
                    track.boxes[frame] = chosen.box
                    track.misses = 0
                    events.append(("extend", track.id, frame))
            elif track is None and dets:
                chosen = min(dets, key=lambda d: (-d.confidence, _pixel_order(d)))
                track = self._birth(chosen, frame)
                events.append(("birth", track.id, frame))
            if chosen is not None:
                for i in idx:
                    if detections[i] is chosen:
                        ids[i] = track.id
                        break
            elif track is not None:
                track.misses += 1
                if track.misses > self.cfg.max_misses:
                    track.status = "dead"
                    track.death_frame = track.last_frame
                    del self.live[tool]
                    events.append(("death", track.id, frame))
            for i in idx:
                if ids[i] == -1:
                    events.append(("discard", -1, frame))
        return ids, events

    def finish(self):
        """Close every live track at the last processed frame."""
        for tool in sorted(self.live):
            t = self.live[tool]
            t.status = "dead"
            t.death_frame = t.last_frame
        self.live.clear()
        return self.tracks
