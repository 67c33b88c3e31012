"""Fusion of an image-derived feature map with a same-scale parsing map."""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .layers import ChannelAttention, PixelAttention, SpatialAttention
from .nn import Conv2d, Init, Module
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LpfSpec:
    channels: int = 64
    parsing_channels: int = 3

    def __post_init__(self):
        if self.channels < 1 or self.parsing_channels < 1:
            raise ValueError("LPF channel counts must be positive")


def _check_pair(f_lr: Tensor, parsing: Tensor, spec: LpfSpec):
    if f_lr.shape[2:] != parsing.shape[2:] or f_lr.shape[0] != parsing.shape[0]:
        raise ShapeError(f"lpf: feature map {f_lr.shape} and parsing map {parsing.shape} differ in N/H/W")
    if f_lr.shape[1] != spec.channels or parsing.shape[1] != spec.parsing_channels:
        raise ShapeError(f"lpf: expected ({spec.channels}, {spec.parsing_channels}) channels, "
                         f"got ({f_lr.shape[1]}, {parsing.shape[1]})")


class LPF(Module):
    def __init__(self, spec: LpfSpec, init: Init, reduction: int = 16):
        super().__init__()
        c = spec.channels
        self.spec = spec
        self.lr_conv1 = Conv2d(c, c, 3, init)
        self.lr_conv2 = Conv2d(c, c, 3, init)
        self.parsing_conv = Conv2d(spec.parsing_channels, c, 3, init)
        self.ca = ChannelAttention(c, init, reduction)
        self.sa = SpatialAttention(init)
        self.att_conv = Conv2d(c, c, 3, init)
        self.pa = PixelAttention(c, init)
        self.fuse1 = Conv2d(2 * c, c, 3, init)
        self.fuse2 = Conv2d(c, c, 1, init)

    def forward(self, f_lr: Tensor, parsing: Tensor) -> Tensor:
        _check_pair(f_lr, parsing, self.spec)
        f1 = self.lr_conv1(f_lr)
        f2 = self.lr_conv2(f_lr)
        fp = self.parsing_conv(parsing)
        f_att = self.att_conv(self.ca(f1) + self.sa(f1))
        sigma = self.pa(f2 + fp)
        # sigma*f2 + (1-sigma)*fp, written to reuse one product
        f_pixel = fp + sigma * (f2 - fp)
        fuse1 = self.fuse1(T.concat([f_att, fp]))
        fuse2 = self.fuse2(f_pixel + f_lr + fp)
        return fuse1 + fuse2 + f2 + fp

    def output_shape(self, shape, parsing_shape):
        if shape[2:] != parsing_shape[2:]:
            raise ShapeError(f"lpf: feature map {shape} and parsing map {parsing_shape} differ in H/W")
        return shape


class CascadeFusion(Module):
    """Ablated fusion: conv3x3(concat(F_LR, conv3x3(parsing)))."""

    def __init__(self, spec: LpfSpec, init: Init):
        super().__init__()
        c = spec.channels
        self.spec = spec
        self.parsing_conv = Conv2d(spec.parsing_channels, c, 3, init)
        self.fuse = Conv2d(2 * c, c, 3, init)

    def forward(self, f_lr: Tensor, parsing: Tensor) -> Tensor:
        _check_pair(f_lr, parsing, self.spec)
        return self.fuse(T.concat([f_lr, self.parsing_conv(parsing)]))

    output_shape = LPF.output_shape
