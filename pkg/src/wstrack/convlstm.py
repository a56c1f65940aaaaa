"""Convolutional LSTM: cell step, unrolled window with truncated BPTT, and the
state carrier that links consecutive windows of one video.

Gate order in the stacked kernels is (input, forget, cell candidate, output).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import (
    DTYPE,
    Parameter,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    sigmoid,
)

log = logging.getLogger(__name__)

GATES = ("i", "f", "g", "o")


@dataclass
class ConvLSTMState:
    hidden: np.ndarray
    cell: np.ndarray

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ShapeError(f"hidden {self.hidden.shape} and cell {self.cell.shape} differ")

    @classmethod
    def zeros(cls, n, channels, h, w):
        return cls(np.zeros((n, channels, h, w), dtype=DTYPE), np.zeros((n, channels, h, w), dtype=DTYPE))

    @property
    def shape(self):
        return self.hidden.shape

    def detach(self):
        """Copy with no tie to the window that produced it."""
        return ConvLSTMState(self.hidden.copy(), self.cell.copy())


@dataclass
class ConvLSTMCellParams:
    """Stacked gate kernels.

    input_kernel: (4*hc, in_c, k, k); hidden_kernel: (4*hc, hc, k, k); bias: (4*hc,).
    """

    input_kernel: np.ndarray
    hidden_kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        four_hc, hc = self.hidden_kernel.shape[:2]
        if four_hc != 4 * hc:
            raise ShapeError(f"hidden kernel {self.hidden_kernel.shape} must be (4*hc, hc, k, k)")
        if self.input_kernel.shape[0] != four_hc or self.input_kernel.shape[2:] != self.hidden_kernel.shape[2:]:
            raise ShapeError(f"input kernel {self.input_kernel.shape} incompatible with hidden kernel {self.hidden_kernel.shape}")
        if self.bias.shape != (four_hc,):
            raise ShapeError(f"bias {self.bias.shape} != ({four_hc},)")

    @property
    def hidden_channels(self):
        return self.hidden_kernel.shape[1]

    @property
    def input_channels(self):
        return self.input_kernel.shape[1]

    @property
    def kernel_size(self):
        return self.hidden_kernel.shape[2]

    def gate(self, name):
        """Per-gate view ``(input_kernel, hidden_kernel, bias)``."""
        k = GATES.index(name)
        hc = self.hidden_channels
        sl = slice(k * hc, (k + 1) * hc)
        return self.input_kernel[sl], self.hidden_kernel[sl], self.bias[sl]

    @classmethod
    def zeros(cls, in_c, hidden_c, k=3):
        return cls(
            np.zeros((4 * hidden_c, in_c, k, k)),
            np.zeros((4 * hidden_c, hidden_c, k, k)),
            np.zeros(4 * hidden_c),
        )


def _check_inputs(x, state, params):
    if x.ndim != 4:
        raise ShapeError(f"convlstm input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    hc = params.hidden_channels
    if c != params.input_channels:
        raise ShapeError(f"convlstm input has {c} channels, params expect {params.input_channels}")
    if state.shape != (n, hc, h, w):
        raise ShapeError(f"state shape {state.shape} does not match input {x.shape} with {hc} hidden channels")


def _gates_from_preact(z, hc):
    i = sigmoid(z[:, :hc])
    f = sigmoid(z[:, hc:2 * hc])
    g = np.tanh(z[:, 2 * hc:3 * hc])
    o = sigmoid(z[:, 3 * hc:])
    return i, f, g, o


def _step(zx, state, params):
    """One step given the precomputed input contribution ``zx`` (bias included)."""
    hc = params.hidden_channels
    pad = params.kernel_size // 2
    zh, hcols = conv2d_forward(state.hidden, params.hidden_kernel, None, 1, pad)
    i, f, g, o = _gates_from_preact(zx + zh, hc)
    cell = f * state.cell + i * g
    tc = np.tanh(cell)
    hidden = o * tc
    cache = (state, hcols, i, f, g, o, tc)
    return ConvLSTMState(hidden, cell), cache


def cell_step(x, state, params):
    """Single ConvLSTM step. Returns ``(output, new_state)`` with output = hidden."""
    _check_inputs(x, state, params)
    pad = params.kernel_size // 2
    zx, _ = conv2d_forward(x, params.input_kernel, params.bias, 1, pad)
    new, _ = _step(zx, state, params)
    return new.hidden, new


@dataclass
class UnrollCache:
    xs: np.ndarray
    xcols: np.ndarray
    steps: list
    params: ConvLSTMCellParams


def unroll(xs, init, params, keep=True):
    """Run the cell over ``xs`` (sequence of (n, c, h, w) arrays, or a 5-D array
    with time first). Returns ``(outputs, final_state, cache)``; ``outputs`` has
    shape (T, n, hc, h, w)."""
    xs = np.asarray(xs, dtype=DTYPE)
    if xs.ndim != 5 or xs.shape[0] == 0:
        raise ShapeError(f"unroll needs a non-empty sequence of 4-D inputs, got shape {xs.shape}")
    t_len, n, c, h, w = xs.shape
    _check_inputs(xs[0], init, params)
    pad = params.kernel_size // 2
    outputs = np.empty((t_len, n, params.hidden_channels, h, w))
    state = init
    steps = []
    xcols = []
    for t in range(t_len):
        # one convolution per timestep: a batched product over the whole
        # window may round differently with the window length
        zx, cols = conv2d_forward(xs[t], params.input_kernel, params.bias, 1, pad)
        state, cache = _step(zx, state, params)
        outputs[t] = state.hidden
        if keep:
            steps.append(cache)
            xcols.append(cols)
    cache = UnrollCache(xs, np.concatenate(xcols, axis=1), steps, params) if keep else None
    return outputs, state, cache


def unroll_backward(d_outputs, cache, d_final=None):
    """Backpropagate through the unrolled window.

    ``d_outputs``: gradient w.r.t. every output, shape (T, n, hc, h, w).
    ``d_final``: optional gradient w.r.t. the final state (hidden, cell).
    Returns ``(d_xs, grads, d_init)`` where ``grads`` maps
    input_kernel/hidden_kernel/bias to arrays. Truncation happens at the caller:
    ``d_init`` is simply not propagated further.
    """
    params = cache.params
    t_len, n, c, h, w = cache.xs.shape
    hc = params.hidden_channels
    pad = params.kernel_size // 2
    if d_outputs.shape != (t_len, n, hc, h, w):
        raise ShapeError(f"d_outputs {d_outputs.shape} != {(t_len, n, hc, h, w)}")
    dh_next = np.zeros((n, hc, h, w)) if d_final is None else d_final.hidden.copy()
    dc_next = np.zeros((n, hc, h, w)) if d_final is None else d_final.cell.copy()
    dz_all = np.empty((t_len, n, 4 * hc, h, w))
    d_hidden_kernel = np.zeros_like(params.hidden_kernel)
    for t in range(t_len - 1, -1, -1):
        prev, hcols, i, f, g, o, tc = cache.steps[t]
        dh = d_outputs[t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dz_all[t]
        dz[:, :hc] = dc * g * i * (1.0 - i)
        dz[:, hc:2 * hc] = dc * prev.cell * f * (1.0 - f)
        dz[:, 2 * hc:3 * hc] = dc * i * (1.0 - g * g)
        dz[:, 3 * hc:] = do * o * (1.0 - o)
        dh_prev, dwh, _ = conv2d_backward(dz, prev.hidden, params.hidden_kernel, 1, pad, hcols)
        d_hidden_kernel += dwh
        dh_next = dh_prev
        dc_next = dc * f
    dxs, d_input_kernel, d_bias = conv2d_backward(
        dz_all.reshape(t_len * n, 4 * hc, h, w),
        cache.xs.reshape(t_len * n, c, h, w),
        params.input_kernel,
        1,
        pad,
        cache.xcols,
    )
    grads = {"input_kernel": d_input_kernel, "hidden_kernel": d_hidden_kernel, "bias": d_bias}
    return dxs.reshape(t_len, n, c, h, w), grads, ConvLSTMState(dh_next, dc_next)


def diagonal_mask(out_c, in_c, k, gates=4):
    """Mask restricting a stacked gate kernel to per-channel (depthwise) links."""
    mask = np.zeros((gates * out_c, in_c, k, k))
    for gi in range(gates):
        for ch in range(out_c):
            mask[gi * out_c + ch, ch] = 1.0
    return mask


class ConvLSTM:
    """ConvLSTM unit with trainable parameters and an optional additive skip
    (output = hidden + input) when input and hidden widths agree.

    ``channel_independent`` keeps each hidden channel's recurrence to itself
    (and each input channel to its own hidden channel when widths agree), so a
    per-tool map never mixes with another tool's map.
    """

    def __init__(self, in_c, hidden_c, rng, k=3, skip=True, channel_independent=False, forget_bias=1.0, init_scale=0.1):
        self.in_c, self.hidden_c, self.k = in_c, hidden_c, k
        self.skip = skip and in_c == hidden_c
        std_x = init_scale * np.sqrt(1.0 / (in_c * k * k))
        std_h = init_scale * np.sqrt(1.0 / (hidden_c * k * k))
        bias = np.zeros(4 * hidden_c)
        bias[hidden_c:2 * hidden_c] = forget_bias
        in_mask = hid_mask = None
        if channel_independent:
            hid_mask = diagonal_mask(hidden_c, hidden_c, k)
            if in_c == hidden_c:
                in_mask = diagonal_mask(hidden_c, in_c, k)
        self.input_kernel = Parameter(rng.standard_normal((4 * hidden_c, in_c, k, k)) * std_x, "cl.input_kernel", "cl", mask=in_mask)
        self.hidden_kernel = Parameter(rng.standard_normal((4 * hidden_c, hidden_c, k, k)) * std_h, "cl.hidden_kernel", "cl", mask=hid_mask)
        self.bias = Parameter(bias, "cl.bias", "cl")
        self._cache = None

    def parameters(self):
        return [self.input_kernel, self.hidden_kernel, self.bias]

    def cell_params(self):
        return ConvLSTMCellParams(self.input_kernel.value, self.hidden_kernel.value, self.bias.value)

    def zero_state(self, n, h, w):
        return ConvLSTMState.zeros(n, self.hidden_c, h, w)

    def forward(self, xs, state, keep=True):
        """xs: (T, n, c, h, w). Returns outputs (T, n, hidden_c, h, w) and final state."""
        outputs, final, cache = unroll(xs, state, self.cell_params(), keep)
        if self.skip:
            outputs = outputs + xs
        self._cache = cache
        return outputs, final

    def backward(self, d_outputs):
        dxs, grads, _ = unroll_backward(d_outputs, self._cache)
        if self.skip:
            dxs = dxs + d_outputs
        self.input_kernel.accumulate(grads["input_kernel"])
        self.hidden_kernel.accumulate(grads["hidden_kernel"])
        self.bias.accumulate(grads["bias"])
        self._cache = None
        return dxs


class StateCarrier:
    """Carries the final state of one window into the next window of the same
    video; resets to zeros at a video boundary or on a frame-index gap."""

    def __init__(self):
        self._video = None
        self._next_frame = None
        self._state = None
        self.resets = 0

    def initial(self, video_id, first_frame, zero_state):
        """Initial state for a window of ``video_id`` starting at ``first_frame``."""
        if self._state is None or video_id != self._video:
            if self._state is not None:
                log.debug("state reset: video %s -> %s", self._video, video_id)
            self.resets += 1
            return zero_state
        if first_frame != self._next_frame:
            log.warning(
                "state reset: video %s window starts at frame %d, expected %d",
                video_id, first_frame, self._next_frame,
            )
            self.resets += 1
            return zero_state
        if self._state.shape != zero_state.shape:
            log.warning("state reset: shape %s != %s", self._state.shape, zero_state.shape)
            self.resets += 1
            return zero_state
        return self._state

    def store(self, video_id, last_frame, state):
        self._video = video_id
        self._next_frame = last_frame + 1
        self._state = state.detach()

    def clear(self):
        self._video = self._next_frame = self._state = None


def propagate_state(final, prev_video, prev_last_frame, next_video, next_first_frame):
    """Initial state for the next window: a detached copy of ``final`` when the
    next window directly continues the same video, zeros otherwise."""
    carrier = StateCarrier()
    carrier.store(prev_video, prev_last_frame, final)
    zero = ConvLSTMState.zeros(*final.shape)
    return carrier.initial(next_video, next_first_frame, zero)
