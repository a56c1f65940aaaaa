"""Heat-map channel -> bounding box: bilinear upsampling, grey closing with a
disc, Otsu threshold, and the 8-connected component around the peak."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import bilinear_resize

OTSU_BINS = 256


@dataclass(frozen=True)
class Bbox:
    x: int
    y: int
    w: int
    h: int

    @property
    def center(self):
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h)


@dataclass
class Detection:
    tool: int
    box: Bbox
    confidence: float
    mask: np.ndarray | None = None
    peak: tuple = (0, 0)


def disc_footprint(radius):
    r = np.arange(-radius, radius + 1)
    return r[:, None] ** 2 + r[None, :] ** 2 <= radius * radius


def close_disc(img, radius=12):
    """Grey-level closing (dilation then erosion) with a discrete disc of the
    given radius. Pixels outside the map are ignored by both passes, so the
    result is extensive and idempotent."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    img = np.ascontiguousarray(img, dtype=np.float64)
    return kernels.erode_disc(kernels.dilate_disc(img, radius), radius)


def _histogram(img):
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return None, lo, hi
    bins = np.floor((img - lo) / (hi - lo) * OTSU_BINS).astype(np.int64)
    np.clip(bins, 0, OTSU_BINS - 1, out=bins)
    return np.bincount(bins.ravel(), minlength=OTSU_BINS), lo, hi


def otsu_cut(hist):
    """Cut index k in 1..len-1 (class 0 = bins < k) maximising the between-class
    variance w0*w1*(mu0-mu1)^2 of bin indices; the first maximum wins.

    Counts must be integers; the comparison runs in exact integer arithmetic
    so near-ties are resolved the same way on every platform."""
    arr = np.asarray(hist)
    if not np.array_equal(arr, np.round(arr)) or (arr < 0).any():
        raise ValueError("histogram counts must be non-negative integers")
    h = [int(v) for v in arr.ravel()]
    total_n = sum(h)
    total_s = sum(i * v for i, v in enumerate(h))
    n0 = s0 = 0
    best_num, best_den, best_k = -1, 1, 1
    for k in range(1, len(h)):
        n0 += h[k - 1]
        s0 += (k - 1) * h[k - 1]
        n1, s1 = total_n - n0, total_s - s0
        if n0 == 0 or n1 == 0:
            continue
        # w0 w1 (mu0 - mu1)^2 = (s0 n1 - s1 n0)^2 / (n0 n1 N^2)
        num, den = (s0 * n1 - s1 * n0) ** 2, n0 * n1
        if num * best_den > best_num * den:
            best_num, best_den, best_k = num, den, k
    return best_k


def otsu_threshold(img):
    """Otsu threshold in map units, or ``None`` for a constant map."""
    hist, lo, hi = _histogram(np.asarray(img, dtype=np.float64))
    if hist is None:
        return None
    return lo + otsu_cut(hist) * (hi - lo) / OTSU_BINS


def connected_component(binary, seed):
    """Maximal 8-connected True region containing ``seed`` (row, col); empty
    when the seed pixel is False."""
    b = np.ascontiguousarray(binary, dtype=np.uint8)
    return np.asarray(kernels.flood_fill8(b, int(seed[0]), int(seed[1])), dtype=bool)


def tight_box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Bbox(int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def extract_detection(channel, frame_dims, confidence, tool, radius=12, min_area=9, all_components=False):
    """Localise one class in one frame.

    ``channel``: 2-D heat map; ``frame_dims``: (H, W). Returns a
    :class:`Detection` (or, with ``all_components``, a list ordered peak-first
    of every component above the threshold), or ``None`` when the channel has
    no positive value, is constant, or the peak component is below ``min_area``.
    """
    h, w = frame_dims
    if not np.max(channel) > 0:
        # no positive evidence for the class anywhere
        return [] if all_components else None
    up = bilinear_resize(np.asarray(channel, dtype=np.float64)[None, None], h, w)[0, 0]
    closed = close_disc(up, radius)
    thr = otsu_threshold(closed)
    if thr is None:
        return [] if all_components else None
    binary = closed >= thr
    peak = np.unravel_index(int(np.argmax(up)), up.shape)
    found = []
    remaining = binary.copy()
    seed = peak
    while True:
        if not remaining[seed]:
            break
        mask = connected_component(remaining, seed)
        if mask.sum() >= min_area:
            found.append(Detection(tool, tight_box(mask), float(confidence), mask, (int(seed[0]), int(seed[1]))))
        if not all_components:
            break
        remaining &= ~mask
        if not remaining.any():
            break
        masked = np.where(remaining, closed, -np.inf)
        seed = np.unravel_index(int(np.argmax(masked)), masked.shape)
    if all_components:
        return found
    return found[0] if found else None
