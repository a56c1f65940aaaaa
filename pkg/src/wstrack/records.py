"""Text record formats shared by the command-line tools.

tracks file   one detection per line:
              video_id,frame_id,class_id,track_id,confidence,x,y,w,h
              (track_id -1 marks a detection the tracker discarded)
scores file   video_id,frame_id,p0,...,p6  (per-class presence probabilities)
GT boxes      eval/<video>/boxes.csv: frame_id,class_id,x,y,w,h[,instance]
"""
from __future__ import annotations

import os
from dataclasses import dataclass


class RecordError(ValueError):
    """Malformed record file; the message carries ``path:line``."""


@dataclass(frozen=True)
class TrackRecord:
    video_id: str
    frame_id: int
    class_id: int
    track_id: int
    confidence: float
    x: int
    y: int
    w: int
    h: int

    @property
    def box(self):
        return (self.x, self.y, self.w, self.h)


def format_track(r: TrackRecord) -> str:
    return f"{r.video_id},{r.frame_id},{r.class_id},{r.track_id},{r.confidence!r},{r.x},{r.y},{r.w},{r.h}"


def parse_track(line, where="<string>"):
    parts = line.strip().split(",")
    if len(parts) != 9:
        raise RecordError(f"{where}: expected 9 fields, got {len(parts)}")
    try:
        rec = TrackRecord(parts[0], int(parts[1]), int(parts[2]), int(parts[3]), float(parts[4]),
                          int(parts[5]), int(parts[6]), int(parts[7]), int(parts[8]))
    except ValueError as exc:
        raise RecordError(f"{where}: {exc}") from None
    if rec.w < 1 or rec.h < 1:
        raise RecordError(f"{where}: box extents must be positive")
    if not 0.0 <= rec.confidence <= 1.0:
        raise RecordError(f"{where}: confidence {rec.confidence} outside [0, 1]")
    return rec


def write_tracks(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(format_track(r) + "\n")


def read_tracks(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                out.append(parse_track(line, f"{path}:{lineno}"))
    return out


def write_scores(path, rows):
    """``rows``: iterable of (video_id, frame_id, probabilities)."""
    with open(path, "w") as fh:
        for vid, fid, probs in rows:
            fh.write(",".join([vid, str(fid)] + [repr(float(p)) for p in probs]) + "\n")


def read_scores(path, num_classes=7):
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != num_classes + 2:
                raise RecordError(f"{path}:{lineno}: expected {num_classes + 2} fields, got {len(parts)}")
            try:
                out[(parts[0], int(parts[1]))] = [float(p) for p in parts[2:]]
            except ValueError as exc:
                raise RecordError(f"{path}:{lineno}: {exc}") from None
    return out


def read_gt_boxes(root, video_id):
    """Evaluation-only ground truth: dict frame_id -> list of (class_id, box, instance)."""
    path = os.path.join(root, "eval", video_id, "boxes.csv")
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) not in (6, 7):
                raise RecordError(f"{path}:{lineno}: expected 6 or 7 fields, got {len(parts)}")
            try:
                vals = [int(p) for p in parts]
            except ValueError as exc:
                raise RecordError(f"{path}:{lineno}: {exc}") from None
            inst = vals[6] if len(vals) == 7 else 0
            out.setdefault(vals[0], []).append((vals[1], tuple(vals[2:6]), inst))
    return out
