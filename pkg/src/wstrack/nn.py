"""Layers with explicit forward/backward: conv, relu, residual block, backbone.

Each layer caches what its backward needs during ``forward``; a forward must be
followed by at most one backward before the next forward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, ShapeError, conv2d_backward, conv2d_forward


class Layer:
    def parameters(self):
        return []

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def he_kernel(rng, out_c, in_c, k, scale=1.0):
    std = scale * np.sqrt(2.0 / (in_c * k * k))
    return rng.standard_normal((out_c, in_c, k, k)) * std


class Conv2d(Layer):
    def __init__(self, in_c, out_c, k, rng, stride=1, padding=None, name="conv", group="backbone", scale=1.0):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(he_kernel(rng, out_c, in_c, k, scale), name=f"{name}.weight", group=group)
        self.bias = Parameter(np.zeros(out_c), name=f"{name}.bias", group=group)
        self._x = None
        self._cols = None

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, keep=True):
        out, cols = conv2d_forward(x, self.weight.value, self.bias.value, self.stride, self.padding)
        if keep:
            self._x, self._cols = x, cols
        return out

    def backward(self, dy, need_input_grad=True):
        dx, dk, db = conv2d_backward(dy, self._x, self.weight.value, self.stride, self.padding, self._cols)
        self.weight.accumulate(dk)
        self.bias.accumulate(db)
        self._x = self._cols = None
        return dx if need_input_grad else None


class ResidualBlock(Layer):
    """conv3x3(stride) - relu - conv3x3 - (+ shortcut) - relu, no normalization."""

    def __init__(self, in_c, out_c, stride, rng, name):
        self.conv1 = Conv2d(in_c, out_c, 3, rng, stride=stride, name=f"{name}.conv1")
        # small residual branch at init keeps the BN-free stack well conditioned
        self.conv2 = Conv2d(out_c, out_c, 3, rng, name=f"{name}.conv2", scale=0.2)
        self.proj = None
        if stride != 1 or in_c != out_c:
            self.proj = Conv2d(in_c, out_c, 1, rng, stride=stride, padding=0, name=f"{name}.proj")
        self._a1 = None
        self._out = None

    def parameters(self):
        ps = self.conv1.parameters() + self.conv2.parameters()
        if self.proj is not None:
            ps += self.proj.parameters()
        return ps

    def forward(self, x, keep=True):
        a1 = np.maximum(self.conv1.forward(x, keep), 0.0)
        y = self.conv2.forward(a1, keep)
        y += self.proj.forward(x, keep) if self.proj is not None else x
        out = np.maximum(y, 0.0)
        if keep:
            self._a1, self._out = a1, out
        return out

    def backward(self, dy, need_input_grad=True):
        dy = dy * (self._out > 0)
        da1 = self.conv2.backward(dy) * (self._a1 > 0)
        dx = self.conv1.backward(da1, need_input_grad)
        if self.proj is not None:
            dsc = self.proj.backward(dy, need_input_grad)
        else:
            dsc = dy
        self._a1 = self._out = None
        return dx + dsc if need_input_grad else None


@dataclass
class BackboneConfig:
    """Residual feature extractor layout.

    ``stages`` holds ``(blocks, channels, stride)`` per stage. ``input_downsample``
    average-pools frames by that factor before the stem.
    """

    stages: list = field(default_factory=lambda: [(2, 16, 2), (2, 32, 2), (2, 64, 1), (2, 64, 1)])
    stem_channels: int = 16
    in_channels: int = 3
    input_downsample: int = 1

    def __post_init__(self):
        self.stages = [tuple(int(v) for v in s) for s in self.stages]
        if len(self.stages) >= 2 and any(s[2] != 1 for s in self.stages[-2:]):
            raise ValueError("the last two backbone stages must use stride 1")

    @property
    def out_channels(self):
        return self.stages[-1][1]

    @property
    def output_stride(self):
        s = self.input_downsample
        for _, _, st in self.stages:
            s *= st
        return s

    def feature_size(self, h, w):
        """Spatial size of the feature map for an input frame of ``h`` x ``w``."""
        h //= self.input_downsample
        w //= self.input_downsample
        for _, _, st in self.stages:
            h = (h + 2 - 3) // st + 1
            w = (w + 2 - 3) // st + 1
        return h, w

    def to_dict(self):
        return {
            "stages": [list(s) for s in self.stages],
            "stem_channels": self.stem_channels,
            "in_channels": self.in_channels,
            "input_downsample": self.input_downsample,
        }


class Backbone(Layer):
    def __init__(self, cfg: BackboneConfig, rng):
        self.cfg = cfg
        self.stem = Conv2d(cfg.in_channels, cfg.stem_channels, 3, rng, name="stem")
        self.blocks = []
        c = cfg.stem_channels
        for si, (nblocks, ch, stride) in enumerate(cfg.stages):
            for bi in range(nblocks):
                self.blocks.append(ResidualBlock(c, ch, stride if bi == 0 else 1, rng, name=f"stage{si}.block{bi}"))
                c = ch
        self._stem_out = None

    def parameters(self):
        ps = self.stem.parameters()
        for b in self.blocks:
            ps += b.parameters()
        return ps

    def forward(self, x, keep=True):
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"backbone expects {self.cfg.in_channels} input channels, got {x.shape}")
        h = np.maximum(self.stem.forward(x, keep), 0.0)
        if keep:
            self._stem_out = h
        for b in self.blocks:
            h = b.forward(h, keep)
        return h

    def backward(self, dy):
        for b in reversed(self.blocks):
            dy = b.backward(dy)
        dy = dy * (self._stem_out > 0)
        self.stem.backward(dy, need_input_grad=False)
        self._stem_out = None
