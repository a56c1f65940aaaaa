"""Presence AP, localization accuracy at IoU >= 0.5, and CLEAR MOT (MOTP/MOTA).

Matching never crosses tool classes. Per frame and class, correspondences from
earlier frames are kept while their IoU stays >= theta; the rest are assigned
by maximum total IoU (Hungarian method) among pairs with IoU >= theta.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tracker import iou


@dataclass(frozen=True)
class GTObject:
    id: object
    tool: int
    box: tuple


@dataclass(frozen=True)
class Hypothesis:
    id: int
    tool: int
    box: tuple


@dataclass
class FrameEvents:
    gt: int = 0
    matches: int = 0
    fp: int = 0
    fn: int = 0
    idsw: int = 0
    iou_sum: object = 0.0


@dataclass
class MotAccumulator:
    """Running CLEAR MOT tallies. ``exact`` keeps IoUs as ``Fraction``."""

    theta: float = 0.5
    exact: bool = False
    fp: int = 0
    fn: int = 0
    idsw: int = 0
    gt: int = 0
    matches: int = 0
    iou_sum: object = None
    last_match: dict = field(default_factory=dict)
    frames: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie in (0, 1)")
        if self.iou_sum is None:
            self.iou_sum = Fraction(0) if self.exact else 0.0


def _assign(gts, hyps, theta, exact, fixed):
    """Maximum-total-IoU matching between unfixed gts and hyps, IoU >= theta."""
    used_g = {g for g, _ in fixed}
    used_h = {h for _, h in fixed}
    gi = [i for i in range(len(gts)) if i not in used_g]
    hi = [j for j in range(len(hyps)) if j not in used_h]
    if not gi or not hi:
        return []
    vals = [[iou(gts[i].box, hyps[j].box, exact) for j in hi] for i in gi]
    weight = np.array([[float(v) if v >= theta else 0.0 for v in row] for row in vals])
    rows, cols = linear_sum_assignment(weight, maximize=True)
    return [(gi[r], hi[c]) for r, c in zip(rows, cols) if vals[r][c] >= theta]


def match_frame(gt, hyp, acc: MotAccumulator):
    """Add one frame of ground truth and hypotheses to ``acc``.

    ``gt``: iterable of :class:`GTObject`; ``hyp``: iterable of :class:`Hypothesis`.
    Returns the frame's :class:`FrameEvents`.
    """
    gt = list(gt)
    hyp = list(hyp)
    ids = [g.id for g in gt]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate ground-truth ids in one frame: {ids}")
    ev = FrameEvents(gt=len(gt), iou_sum=Fraction(0) if acc.exact else 0.0)
    for tool in sorted({g.tool for g in gt} | {h.tool for h in hyp}):
        gts = [g for g in gt if g.tool == tool]
        hyps = [h for h in hyp if h.tool == tool]
        fixed = []
        hyp_index = {h.id: j for j, h in enumerate(hyps)}
        for i, g in enumerate(gts):
            prev = acc.last_match.get(g.id)
            j = hyp_index.get(prev)
            if j is not None and j not in {h for _, h in fixed}:
                if iou(g.box, hyps[j].box, acc.exact) >= acc.theta:
                    fixed.append((i, j))
        pairs = fixed + _assign(gts, hyps, acc.theta, acc.exact, fixed)
        for i, j in pairs:
            g, h = gts[i], hyps[j]
            prev = acc.last_match.get(g.id)
            if prev is not None and prev != h.id:
                ev.idsw += 1
            acc.last_match[g.id] = h.id
            ev.iou_sum += iou(g.box, h.box, acc.exact)
        ev.matches += len(pairs)
        ev.fp += len(hyps) - len(pairs)
        ev.fn += len(gts) - len(pairs)
    acc.fp += ev.fp
    acc.fn += ev.fn
    acc.idsw += ev.idsw
    acc.gt += ev.gt
    acc.matches += ev.matches
    acc.iou_sum += ev.iou_sum
    acc.frames.append(ev)
    return ev


def start_sequence(acc: MotAccumulator):
    """Forget correspondences before evaluating the next, unrelated video."""
    acc.last_match.clear()


def motp(acc: MotAccumulator):
    """Mean IoU over all matches, ``None`` when nothing matched."""
    if acc.matches == 0:
        return None
    return acc.iou_sum / acc.matches


def mota(acc: MotAccumulator):
    """1 - (FP + FN + IDSW) / GT, ``None`` without ground truth."""
    if acc.gt == 0:
        return None
    errors = acc.fp + acc.fn + acc.idsw
    if acc.exact:
        return 1 - Fraction(errors, acc.gt)
    return 1.0 - errors / acc.gt


def precision_recall(scores, labels, exact=False):
    """PR points of a confidence-descending sweep, tied scores grouped.

    Returns ``(recall, precision)`` arrays (lists of ``Fraction`` with ``exact``)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tp, fp = tp[last], fp[last]
    if exact:
        pos = int(labels.sum())
        return ([Fraction(int(t), pos) for t in tp], [Fraction(int(t), int(t + f)) for t, f in zip(tp, fp)])
    return tp / labels.sum(), tp / (tp + fp)


def average_precision(scores, labels, exact=False):
    """Area under the PR curve with the monotone precision envelope:
    sum over sweep points of (r_k - r_{k-1}) * max precision at recall >= r_k.
    ``None`` when there is no positive label."""
    labels = np.asarray(labels).astype(bool)
    if labels.sum() == 0:
        return None
    recall, precision = precision_recall(scores, labels, exact)
    if exact:
        ap, prev, best = Fraction(0), Fraction(0), Fraction(0)
        envelope = []
        for p in reversed(precision):
            best = max(best, p)
            envelope.append(best)
        for r, p in zip(recall, reversed(envelope)):
            ap += (r - prev) * p
            prev = r
        return ap
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    dr = np.diff(np.r_[0.0, recall])
    return float(np.sum(dr * envelope))


def mean_average_precision(scores, labels, exact=False):
    """Per-class AP over (frames, classes) arrays and their mean over classes
    with at least one positive. Returns ``(per_class, mean)``."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    per = [average_precision(scores[:, c], labels[:, c], exact) for c in range(scores.shape[1])]
    valid = [a for a in per if a is not None]
    if not valid:
        return per, None
    return per, (sum(valid, Fraction(0)) / len(valid) if exact else float(np.mean(valid)))


def localization_accuracy(detections, gt_boxes, num_classes, threshold=0.5, exact=False):
    """Per class, the fraction of GT instances with a same-class detection of
    IoU >= ``threshold`` in the same frame (a ``Fraction`` with ``exact``).

    ``detections`` / ``gt_boxes``: dict mapping a frame key to a list of
    ``(class_id, box)``. Classes with no GT instance get ``None``.
    """
    hits = np.zeros(num_classes, dtype=np.int64)
    total = np.zeros(num_classes, dtype=np.int64)
    for key, gts in gt_boxes.items():
        dets = detections.get(key, [])
        for cls, box in gts:
            total[cls] += 1
            if any(c == cls and iou(box, b) >= threshold for c, b in dets):
                hits[cls] += 1
    if exact:
        return [None if total[c] == 0 else Fraction(int(hits[c]), int(total[c])) for c in range(num_classes)]
    return [None if total[c] == 0 else float(hits[c] / total[c]) for c in range(num_classes)]
