"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Results are bit-identical to the compiled versions (same accumulation order in
``col2im``; max/min are exact).
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy import ndimage


def im2col(xp, kh, kw, stride, oh, ow):
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(c, kh, kw, n, oh, ow),
        strides=(s1, s2, s3, s0, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(c * kh * kw, n * oh * ow)


def col2im(cols, n, c, hp, wp, kh, kw, stride, oh, ow):
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    blocks = cols.reshape(c, kh, kw, n, oh, ow)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + stride * (oh - 1) + 1:stride, kj:kj + stride * (ow - 1) + 1:stride] += (
                blocks[:, ki, kj].transpose(1, 0, 2, 3)
            )
    return out


def disc_half_widths(radius):
    """Half-width of the disc row at each vertical offset -radius..radius."""
    dys = np.arange(-radius, radius + 1)
    hw = np.floor(np.sqrt(radius * radius - dys * dys)).astype(int)
    hw[(hw + 1) ** 2 + dys ** 2 <= radius * radius] += 1
    hw[hw ** 2 + dys ** 2 > radius * radius] -= 1
    return hw


def _disc_rank(img, radius, take_max):
    op = np.maximum if take_max else np.minimum
    h, w = img.shape
    runs = np.empty((radius + 1, h, w))
    runs[0] = img
    for k in range(1, radius + 1):
        cur = runs[k - 1].copy()
        if k < w:
            cur[:, k:] = op(cur[:, k:], img[:, :-k])
            cur[:, :-k] = op(cur[:, :-k], img[:, k:])
        runs[k] = cur
    out = img.copy()
    for dy, hw in zip(range(-radius, radius + 1), disc_half_widths(radius)):
        if dy < 0:
            if -dy >= h:
                continue
            out[-dy:] = op(out[-dy:], runs[hw, :h + dy])
        elif dy > 0:
            if dy >= h:
                continue
            out[:-dy] = op(out[:-dy], runs[hw, dy:])
        else:
            out = op(out, runs[hw])
    return out


def dilate_disc(img, radius):
    return _disc_rank(np.ascontiguousarray(img, dtype=np.float64), radius, True)


def erode_disc(img, radius):
    return _disc_rank(np.ascontiguousarray(img, dtype=np.float64), radius, False)


def flood_fill8(binary, sy, sx):
    binary = np.asarray(binary, dtype=bool)
    if not binary[sy, sx]:
        return np.zeros_like(binary)
    labels, _ = ndimage.label(binary, structure=np.ones((3, 3), dtype=bool))
    return labels == labels[sy, sx]
