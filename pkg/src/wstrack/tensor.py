"""Dense float64 tensor core: convolution, resizing, activations, gradient check,
and the binary tensor format used by checkpoints.

Arrays are plain ``numpy.ndarray`` in (batch, channel, row, col) layout. Each
layer has an explicit forward and backward; there is no graph engine.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded stream: numpy's PCG64 bit generator with the default seed sequence."""
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass(eq=False)
class Parameter:
    """A trainable array with its gradient and momentum buffer.

    ``mask`` (optional, same shape) pins entries to zero: the value and the
    gradient are both multiplied by it.
    """

    value: np.ndarray
    name: str = ""
    group: str = "head"
    mask: np.ndarray | None = None
    frozen: bool = False
    grad: np.ndarray = field(init=False)
    velocity: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=DTYPE)
            if self.mask.shape != self.value.shape:
                raise ShapeError(f"{self.name}: mask {self.mask.shape} != value {self.value.shape}")
            self.value *= self.mask
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def accumulate(self, g):
        if self.mask is not None:
            g = g * self.mask
        self.grad += g


def _check4(x, what):
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected a 4-D (n, c, h, w) array, got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad(x, padding):
    if padding == 0:
        return np.ascontiguousarray(x, dtype=DTYPE)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, kernel, bias, stride=1, padding=0):
    """Convolution returning ``(out, cols)``; ``cols`` can be fed back to the
    backward pass to skip recomputing the patch matrix."""
    _check4(x, "conv2d input")
    _check4(kernel, "conv2d kernel")
    n, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    if ic != c:
        raise ShapeError(f"conv2d: kernel expects {ic} input channels, input has {c} (input {x.shape}, kernel {kernel.shape})")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({oc},)")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    cols = kernels.im2col(_pad(x, padding), kh, kw, stride, oh, ow)
    out = kernel.reshape(oc, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    out = out.reshape(oc, n, oh, ow).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding.

    >>> x = np.arange(4.0).reshape(1, 1, 2, 2)
    >>> conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))[0, 0]
    array([[0., 1.],
           [2., 3.]])
    """
    return conv2d_forward(x, kernel, bias, stride, padding)[0]


def conv2d_backward(upstream, x, kernel, stride=1, padding=0, cols=None):
    """Gradients of :func:`conv2d` w.r.t. input, kernel and bias."""
    _check4(upstream, "conv2d_backward upstream")
    n, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if upstream.shape != (n, oc, oh, ow):
        raise ShapeError(f"conv2d_backward: upstream {upstream.shape} != forward output {(n, oc, oh, ow)}")
    if cols is None:
        cols = kernels.im2col(_pad(x, padding), kh, kw, stride, oh, ow)
    dy = upstream.transpose(1, 0, 2, 3).reshape(oc, -1)
    kernel_grad = (dy @ cols.T).reshape(kernel.shape)
    bias_grad = dy.sum(axis=1)
    dcols = np.ascontiguousarray(kernel.reshape(oc, -1).T @ dy)
    dxp = kernels.col2im(dcols, n, c, h + 2 * padding, w + 2 * padding, kh, kw, stride, oh, ow)
    if padding:
        dxp = dxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(dxp), kernel_grad, bias_grad


def _resize_axis(size_in, size_out):
    # corner-aligned: output i samples source coordinate i * (in - 1) / (out - 1)
    if size_out == 1 or size_in == 1:
        pos = np.zeros(size_out)
    else:
        pos = np.arange(size_out) * ((size_in - 1) / (size_out - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, size_in - 1)
    hi = np.minimum(lo + 1, size_in - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize(x, out_h, out_w):
    """Bilinear resize with corner-aligned sampling (first and last samples of
    each axis coincide with the source corners)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output size must be positive, got {out_h}x{out_w}")
    x = np.asarray(x, dtype=DTYPE)
    _check4(x, "bilinear_resize input")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    y0, y1, fy = _resize_axis(h, out_h)
    x0, x1, fx = _resize_axis(w, out_w)
    fy = fy[:, None]
    top = x[:, :, y0][..., x0] * (1 - fx) + x[:, :, y0][..., x1] * fx
    bot = x[:, :, y1][..., x0] * (1 - fx) + x[:, :, y1][..., x1] * fx
    out = top * (1 - fy) + bot * fy
    # convex combination; clip rounding spill so the output stays in the source range
    lo = x.min(axis=(2, 3), keepdims=True)
    hi = x.max(axis=(2, 3), keepdims=True)
    return np.clip(out, lo, hi)


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


def activation(x, kind):
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(upstream, out, kind):
    """Backward of :func:`activation` expressed through its output."""
    if kind == "sigmoid":
        return upstream * out * (1.0 - out)
    if kind == "tanh":
        return upstream * (1.0 - out * out)
    if kind == "relu":
        return upstream * (out > 0)
    raise ValueError(f"unknown activation {kind!r}")


class GradCheckError(RuntimeError):
    pass


def grad_check(loss_fn, params, eps=1e-3, max_coords=None, rng=None, region=None, stats=None):
    """Compare analytic gradients with central finite differences.

    ``loss_fn()`` must return the scalar loss and leave analytic gradients in
    ``param.grad`` for every entry of ``params`` (it is responsible for zeroing
    them first). Derivatives are estimated with the 5-point central stencil.

    ``region()``, when given, is called after every ``loss_fn()`` and returns a
    hashable signature of the piecewise-smooth region (ReLU signs, max/min
    selections). A coordinate whose stencil leaves the region of the
    unperturbed point is retried with a stencil 4x and 16x narrower; if it
    still crosses, the coordinate sits on a kink and is skipped and counted in
    ``stats["skipped"]`` (``stats["checked"]`` counts the rest, and
    ``stats["per_param"][name]`` the checked coordinates of each parameter).

    Returns the max over checked coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = loss_fn()
    if not np.isfinite(base):
        raise GradCheckError(f"non-finite loss {base}")
    base_region = region() if region is not None else None
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    checked = skipped = 0
    per_param = {}
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if p.mask is not None:
            idx = idx[p.mask.reshape(-1) != 0]
        if max_coords is not None and idx.size > max_coords:
            idx = np.sort((rng or make_rng(0)).choice(idx, size=max_coords, replace=False))
        for i in idx:
            orig = flat[i]
            # shrink the stencil up to twice before giving up on a kink
            for h in (eps, eps / 4, eps / 16):
                vals = []
                crossed = False
                for step in (2 * h, h, -h, -2 * h):
                    flat[i] = orig + step
                    vals.append(loss_fn())
                    if region is not None and region() != base_region:
                        crossed = True
                flat[i] = orig
                if not np.all(np.isfinite(vals)):
                    raise GradCheckError(f"non-finite loss while perturbing {p.name}[{i}]")
                if not crossed:
                    break
            if crossed:
                skipped += 1
                continue
            numeric = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
            a = ga.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
            checked += 1
            per_param[p.name] = per_param.get(p.name, 0) + 1
    loss_fn()  # leave grads consistent with the unperturbed point
    if stats is not None:
        stats["checked"] = stats.get("checked", 0) + checked
        stats["skipped"] = stats.get("skipped", 0) + skipped
        for k, v in per_param.items():
            stats.setdefault("per_param", {})[k] = stats.get("per_param", {}).get(k, 0) + v
    return worst


# Binary tensor format: 16-byte little-endian header then raw data.
#   magic b"WST4" | uint32 dtype code | 4 x uint16 dims
MAGIC = b"WST4"
_DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
_CODE_OF = {v: k for k, v in _DTYPE_CODES.items()}


def tensor_to_bytes(arr):
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = _CODE_OF.get(np.dtype(dt))
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 4:
        raise ShapeError(f"at most 4 dims supported, got {arr.shape}")
    dims = (1,) * (4 - arr.ndim) + arr.shape
    if any(d > 0xFFFF or d < 1 for d in dims):
        raise ShapeError(f"dims must be in 1..65535, got {arr.shape}")
    header = MAGIC + struct.pack("<I4H", code, *dims)
    return header + np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()


def tensor_from_bytes(buf, shape=None):
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise ValueError("not a tensor blob (bad magic)")
    code, *dims = struct.unpack("<I4H", buf[4:16])
    if code not in _DTYPE_CODES:
        raise ValueError(f"unknown dtype code {code}")
    dt = _DTYPE_CODES[code]
    count = int(np.prod(dims))
    if len(buf) != 16 + count * dt.itemsize:
        raise ValueError(f"tensor blob length {len(buf)} does not match header dims {dims}")
    arr = np.frombuffer(buf, dtype=dt, offset=16, count=count).reshape(dims).copy()
    return arr.reshape(shape) if shape is not None else arr


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path, shape=None):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read(), shape)
