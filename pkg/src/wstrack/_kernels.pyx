# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: im2col/col2im, disc morphology, 8-connected flood fill.

Every routine here has a numpy twin in ``_fallback`` that produces bit-identical
results; ``wstrack.kernels`` picks one of the two at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, int kh, int kw, int stride, int oh, int ow):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t npos = oh * ow
    cols_arr = np.empty((c * kh * kw, n * npos), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t b, ch, ki, kj, i, j, row, col0, yi
    for ch in range(c):
        for ki in range(kh):
            for kj in range(kw):
                row = (ch * kh + ki) * kw + kj
                for b in range(n):
                    col0 = b * npos
                    for i in range(oh):
                        yi = i * stride + ki
                        for j in range(ow):
                            cols[row, col0 + i * ow + j] = xp[b, ch, yi, j * stride + kj]
    return cols_arr


def col2im(const double[:, ::1] cols, int n, int c, int hp, int wp,
           int kh, int kw, int stride, int oh, int ow):
    out_arr = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t npos = oh * ow
    cdef Py_ssize_t b, ch, ki, kj, i, j, row, col0, yi
    # (ki, kj) outermost per channel: matches the fallback's accumulation order
    for ch in range(c):
        for ki in range(kh):
            for kj in range(kw):
                row = (ch * kh + ki) * kw + kj
                for b in range(n):
                    col0 = b * npos
                    for i in range(oh):
                        yi = i * stride + ki
                        for j in range(ow):
                            out[b, ch, yi, j * stride + kj] += cols[row, col0 + i * ow + j]
    return out_arr


cdef inline Py_ssize_t _half_width(int radius, int dy):
    cdef Py_ssize_t hw = <Py_ssize_t> sqrt(<double> (radius * radius - dy * dy))
    # guard against sqrt rounding at perfect squares
    while (hw + 1) * (hw + 1) + dy * dy <= radius * radius:
        hw += 1
    while hw * hw + dy * dy > radius * radius:
        hw -= 1
    return hw


def _disc_rank(const double[:, ::1] img, int radius, bint take_max):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef Py_ssize_t k, y, x, dy, yy
    cdef double v, a, bb
    # runs[k, y, x] = extreme of img[y, x-k .. x+k] clipped to the row
    runs_arr = np.empty((radius + 1, h, w), dtype=np.float64)
    cdef double[:, :, ::1] runs = runs_arr
    for y in range(h):
        for x in range(w):
            runs[0, y, x] = img[y, x]
    for k in range(1, radius + 1):
        for y in range(h):
            for x in range(w):
                v = runs[k - 1, y, x]
                if x - k >= 0:
                    a = img[y, x - k]
                    if take_max:
                        if a > v:
                            v = a
                    elif a < v:
                        v = a
                if x + k < w:
                    bb = img[y, x + k]
                    if take_max:
                        if bb > v:
                            v = bb
                    elif bb < v:
                        v = bb
                runs[k, y, x] = v
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    hws_arr = np.empty(2 * radius + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] hws = hws_arr
    for dy in range(-radius, radius + 1):
        hws[dy + radius] = _half_width(radius, <int> dy)
    for y in range(h):
        for x in range(w):
            v = img[y, x]
            for dy in range(-radius, radius + 1):
                yy = y + dy
                if yy < 0 or yy >= h:
                    continue
                a = runs[hws[dy + radius], yy, x]
                if take_max:
                    if a > v:
                        v = a
                elif a < v:
                    v = a
            out[y, x] = v
    return out_arr


def dilate_disc(const double[:, ::1] img, int radius):
    return _disc_rank(img, radius, True)


def erode_disc(const double[:, ::1] img, int radius):
    return _disc_rank(img, radius, False)


def flood_fill8(const unsigned char[:, ::1] binary, Py_ssize_t sy, Py_ssize_t sx):
    cdef Py_ssize_t h = binary.shape[0], w = binary.shape[1]
    mask_arr = np.zeros((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] mask = mask_arr
    if not binary[sy, sx]:
        return mask_arr.astype(bool)
    stack_arr = np.empty(h * w, dtype=np.intp)
    cdef Py_ssize_t[::1] stack = stack_arr
    cdef Py_ssize_t top = 0, p, y, x, ny, nx, dy, dx
    stack[top] = sy * w + sx
    top += 1
    mask[sy, sx] = 1
    while top > 0:
        top -= 1
        p = stack[top]
        y = p // w
        x = p - y * w
        for dy in range(-1, 2):
            ny = y + dy
            if ny < 0 or ny >= h:
                continue
            for dx in range(-1, 2):
                nx = x + dx
                if nx < 0 or nx >= w:
                    continue
                if binary[ny, nx] and not mask[ny, nx]:
                    mask[ny, nx] = 1
                    stack[top] = ny * w + nx
                    top += 1
    return mask_arr.astype(bool)
