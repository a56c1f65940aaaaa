"""Inference, tracking and evaluation over a dataset split."""
from __future__ import annotations

import os
from fractions import Fraction

import numpy as np

from .convlstm import StateCarrier
from .data import PresenceDataset, read_labels
from .localizer import extract_detection
from .metrics import (GTObject, Hypothesis, MotAccumulator, localization_accuracy, match_frame,
                      mean_average_precision, mota, motp, start_sequence)
from .models import preprocess
from .records import TrackRecord, read_gt_boxes
from .tensor import sigmoid
from .tracker import Tracker, TrackerConfig

DEFAULT_THETAS = (0.3, 0.5, 0.7)


def infer_video(model, frames, pixel_mean, window=16):
    """Heat maps (N, classes, h, w) and logits (N, classes) for one video.

    ConvLSTM variants run consecutive windows with the state carried across
    them, exactly as in training; frame-level models ignore ``window`` except
    for batching."""
    ds = model.config.backbone.input_downsample
    x = preprocess(frames, ds, pixel_mean)
    maps, logits = [], []
    carrier = StateCarrier()
    for s in range(0, len(x), window):
        chunk = x[s:s + window]
        state = None
        if model.cl is not None:
            fh, fw = model.map_size(frames.shape[1], frames.shape[2])
            state = carrier.initial("video", s, model.cl.zero_state(1, fh, fw))
        m, z, final = model.forward(chunk, state, keep=False)
        if model.cl is not None:
            carrier.store("video", s + len(chunk) - 1, final)
        maps.append(m)
        logits.append(z)
    return np.concatenate(maps), np.concatenate(logits)


def tracker_mode(model):
    return "convlstm_continuity" if model.config.has_cl else "baseline_iou"


def track_video(video_id, maps, logits, frame_dims, mode="baseline_iou", radius=12, min_area=9, iou_gate=0.5):
    """Localise every present class in every frame and link detections.

    Returns ``(records, detections)``: tracks-file records (track id -1 for
    discarded detections) and the per-frame list of ``(class_id, box)``."""
    tracker = Tracker(TrackerConfig(iou_gate=iou_gate, mode=mode))
    probs = sigmoid(logits)
    records = []
    detections = {}
    for f in range(len(maps)):
        dets = []
        for c in range(maps.shape[1]):
            if logits[f, c] >= 0.0:
                d = extract_detection(maps[f, c], frame_dims, float(probs[f, c]), c, radius=radius, min_area=min_area)
                if d is not None:
                    d.mask = None
                    dets.append(d)
        ids, _ = tracker.step(f, dets)
        detections[f] = [(d.tool, d.box.as_tuple()) for d in dets]
        for d, tid in zip(dets, ids):
            b = d.box
            records.append(TrackRecord(video_id, f, d.tool, tid, d.confidence, b.x, b.y, b.w, b.h))
    tracker.finish()
    return records, detections


def run_split(model, root, split, pixel_mean, window=16, radius=12, min_area=9):
    """Inference + tracking over every video of a split.

    Returns ``(track_records, score_rows)``."""
    ds = PresenceDataset(root, split, model.config.num_classes)
    records, scores = [], []
    for vid in ds.video_ids:
        v = ds.video(vid)
        maps, logits = infer_video(model, v.frames, pixel_mean, window)
        recs, _ = track_video(vid, maps, logits, v.frames.shape[1:3], tracker_mode(model), radius, min_area)
        records += recs
        probs = sigmoid(logits)
        scores += [(vid, f, probs[f]) for f in range(len(probs))]
    return records, scores


def _videos_of(manifest, split, records):
    if split is not None:
        return list(manifest["splits"][split])
    return sorted({r.video_id for r in records})


def evaluate(root, manifest, records, scores=None, split="test", thetas=DEFAULT_THETAS, num_classes=7, exact=False):
    """Report dict: presence AP, localization accuracy and MOTP / MOTA per theta.

    ``records``: tracks-file records; ``scores``: dict (video, frame) ->
    probabilities, or ``None`` to skip AP. With ``exact`` every metric is a
    ``Fraction``. Evaluation reads ground-truth boxes and therefore lives
    outside the training path."""
    videos = _videos_of(manifest, split, records)
    by_frame = {}
    for r in records:
        by_frame.setdefault((r.video_id, r.frame_id), []).append(r)
    gt = {}
    labels = {}
    for vid in videos:
        lab = read_labels(os.path.join(root, "videos", vid, "labels.csv"), num_classes)
        labels[vid] = lab
        boxes = read_gt_boxes(root, vid)
        for f in range(len(lab)):
            gt[(vid, f)] = boxes.get(f, [])
    report = {"videos": videos}
    if scores is not None:
        s = np.array([scores[(vid, f)] for vid in videos for f in range(len(labels[vid]))])
        y = np.concatenate([labels[v] for v in videos])
        per, mean = mean_average_precision(s, y, exact)
        report["ap"] = {"per_class": per, "mean": mean}
    dets = {k: [(r.class_id, r.box) for r in v] for k, v in by_frame.items()}
    per_loc = localization_accuracy(dets, {k: [(c, b) for c, b, _ in v] for k, v in gt.items()}, num_classes,
                                    exact=exact)
    report["localization"] = {"per_class": per_loc, "mean": _mean(per_loc, exact)}
    mot = {}
    for theta in thetas:
        acc = MotAccumulator(theta=theta, exact=exact)
        for vid in videos:
            start_sequence(acc)
            for f in range(len(labels[vid])):
                g = [GTObject((c, inst), c, b) for c, b, inst in gt[(vid, f)]]
                h = [Hypothesis(r.track_id, r.class_id, r.box) for r in by_frame.get((vid, f), []) if r.track_id >= 0]
                match_frame(g, h, acc)
        p, a = motp(acc), mota(acc)
        mot[f"{theta:g}"] = {
            "motp": p if p is None or exact else float(p),
            "mota": a if a is None or exact else float(a),
            "fp": acc.fp, "fn": acc.fn, "idsw": acc.idsw, "gt": acc.gt, "matches": acc.matches,
        }
    report["mot"] = mot
    report["mean_mota"] = _mean([m["mota"] for m in mot.values()], exact)
    return report


def _mean(values, exact):
    valid = [v for v in values if v is not None]
    if not valid:
        return None
    return sum(valid, Fraction(0)) / len(valid) if exact else float(np.mean(valid))
