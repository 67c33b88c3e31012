"""Composite blocks: residual/hourglass, attention units, resize blocks, RCAB and SCAB."""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, DepthwiseConv2d, Init, Module
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class AttentionUnitSpec:
    kind: str  # "channel" | "spatial" | "pixel"
    reduction_ratio: int = 16
    kernel: int = 7

    def __post_init__(self):
        if self.kind not in ("channel", "spatial", "pixel"):
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.kernel % 2 == 0:
            raise ValueError(f"spatial attention kernel must be odd, got {self.kernel}")


@dataclass(frozen=True)
class ScabSpec:
    channels: int = 64
    heads: int = 4
    ca_reduction: int = 16

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(f"channels={self.channels} not divisible by heads={self.heads}")


def _same_channels(shape, c, name):
    if shape[1] != c:
        raise ShapeError(f"{name}: expected {c} channels, got {shape[1]}")
    return shape


class ResidualBlock(Module):
    """conv3x3 -> ReLU -> conv3x3, plus identity."""

    def __init__(self, channels: int, init: Init):
        super().__init__()
        self.channels = channels
        self.conv1 = Conv2d(channels, channels, 3, init)
        self.conv2 = Conv2d(channels, channels, 3, init)

    def forward(self, x):
        _same_channels(x.shape, self.channels, "residual_block")
        return x + self.conv2(T.relu(self.conv1(x)))

    def output_shape(self, shape):
        return _same_channels(shape, self.channels, "residual_block")


class Hourglass(Module):
    """Recursive hourglass: max-pool down, nearest up, additive merge.

    ``depth == 0`` is a single residual block.
    """

    def __init__(self, channels: int, depth: int, init: Init):
        super().__init__()
        self.depth = depth
        if depth == 0:
            self.base = ResidualBlock(channels, init)
        else:
            self.skip = ResidualBlock(channels, init)
            self.down = ResidualBlock(channels, init)
            self.inner = Hourglass(channels, depth - 1, init)

    def _check(self, shape):
        m = 2 ** self.depth
        if shape[2] % m or shape[3] % m:
            raise ShapeError(f"hourglass depth {self.depth}: H={shape[2]}, W={shape[3]} must be multiples of {m}")

    def forward(self, x):
        self._check(x.shape)
        if self.depth == 0:
            return self.base(x)
        up = T.nearest_up(self.inner(self.down(T.max_pool2(x))), 2)
        return self.skip(x) + up

    def output_shape(self, shape):
        self._check(shape)
        return shape


class ChannelAttention(Module):
    def __init__(self, channels: int, init: Init, reduction: int = 16):
        super().__init__()
        if channels < reduction or channels % reduction:
            raise ValueError(f"channel attention: reduction {reduction} must divide C={channels}")
        self.channels = channels
        self.squeeze = Conv2d(channels, channels // reduction, 1, init)
        self.excite = Conv2d(channels // reduction, channels, 1, init)

    def gate(self, x):
        return T.sigmoid(self.excite(T.relu(self.squeeze(T.global_avg_pool(x)))))

    def forward(self, x):
        return x * self.gate(x)

    def output_shape(self, shape):
        return _same_channels(shape, self.channels, "channel_attention")


class SpatialAttention(Module):
    def __init__(self, init: Init, kernel: int = 7):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel, init)

    def gate(self, x):
        return T.sigmoid(self.conv(T.concat([T.channel_mean(x), T.channel_max(x)], axis=1)))

    def forward(self, x):
        return x * self.gate(x)

    def output_shape(self, shape):
        return shape


class PixelAttention(Module):
    """Per-pixel scalar gate in (0, 1), shape (N, 1, H, W)."""

    def __init__(self, channels: int, init: Init):
        super().__init__()
        self.conv = Conv2d(channels, 1, 1, init)

    def forward(self, x):
        return T.sigmoid(self.conv(x))

    def output_shape(self, shape):
        return (shape[0], 1, shape[2], shape[3])


class UpsampleBlock(Module):
    """conv3x3 (C -> 4C) -> pixel shuffle x2 -> BatchNorm -> ReLU."""

    def __init__(self, channels: int, init: Init):
        super().__init__()
        self.channels = channels
        # no bias: BatchNorm removes any per-channel offset
        self.conv = Conv2d(channels, 4 * channels, 3, init, bias=False)
        self.bn = BatchNorm2d(channels)

    def forward(self, x):
        return T.relu(self.bn(T.pixel_shuffle(self.conv(x), 2)))

    def output_shape(self, shape):
        n, c, h, w = _same_channels(shape, self.channels, "upsample_block")
        return (n, c, 2 * h, 2 * w)


class DownsampleBlock(Module):
    """pixel unshuffle x2 (C -> 4C) -> conv3x3 (4C -> C) -> BatchNorm -> ReLU."""

    def __init__(self, channels: int, init: Init):
        super().__init__()
        self.channels = channels
        self.conv = Conv2d(4 * channels, channels, 3, init, bias=False)
        self.bn = BatchNorm2d(channels)

    def forward(self, x):
        self._check(x.shape)
        return T.relu(self.bn(self.conv(T.pixel_unshuffle(x, 2))))

    def _check(self, shape):
        if shape[2] % 2 or shape[3] % 2:
            raise ShapeError(f"downsample_block: H={shape[2]}, W={shape[3]} must be even")

    def output_shape(self, shape):
        n, c, h, w = _same_channels(shape, self.channels, "downsample_block")
        self._check(shape)
        return (n, c, h // 2, w // 2)


class MultiHeadSelfAttention(Module):
    """Convolutional multi-head self-attention over spatial positions.

    Q, K and V each come from a 3x3 depthwise conv followed by a 1x1 projection.
    Attention weights are softmax(Q^T K / sqrt(d)) with d = C / heads.
    """

    def __init__(self, channels: int, init: Init, heads: int = 4):
        super().__init__()
        if channels % heads:
            raise ValueError(f"mhsa: channels={channels} not divisible by heads={heads}")
        self.channels, self.heads = channels, heads
        self.q_dw = DepthwiseConv2d(channels, 3, init)
        self.q_pw = Conv2d(channels, channels, 1, init)
        # a per-channel offset on K shifts every score of a query equally and
        # cancels in the softmax, so the key path carries no biases
        self.k_dw = DepthwiseConv2d(channels, 3, init, bias=False)
        self.k_pw = Conv2d(channels, channels, 1, init, bias=False)
        self.v_dw = DepthwiseConv2d(channels, 3, init)
        self.v_pw = Conv2d(channels, channels, 1, init)

    def qkv(self, x):
        return self.q_pw(self.q_dw(x)), self.k_pw(self.k_dw(x)), self.v_pw(self.v_dw(x))

    def forward(self, x):
        n, c, h, w = _same_channels(x.shape, self.channels, "mhsa")
        d = c // self.heads
        q, k, v = self.qkv(x)
        q = q.reshape(n, self.heads, d, h * w).transpose(0, 1, 3, 2)
        k = k.reshape(n, self.heads, d, h * w)
        v = v.reshape(n, self.heads, d, h * w).transpose(0, 1, 3, 2)
        attn = T.softmax((q @ k) * (1.0 / math.sqrt(d)))
        out = (attn @ v).transpose(0, 1, 3, 2)
        return out.reshape(n, c, h, w)

    def output_shape(self, shape):
        return _same_channels(shape, self.channels, "mhsa")


class RCAB(Module):
    """Residual channel attention block: conv -> ReLU -> conv -> CA, plus identity."""

    def __init__(self, channels: int, init: Init, reduction: int = 16):
        super().__init__()
        self.channels = channels
        self.conv1 = Conv2d(channels, channels, 3, init)
        self.conv2 = Conv2d(channels, channels, 3, init)
        self.ca = ChannelAttention(channels, init, reduction)

    def forward(self, x):
        _same_channels(x.shape, self.channels, "rcab")
        return x + self.ca(self.conv2(T.relu(self.conv1(x))))

    def output_shape(self, shape):
        return _same_channels(shape, self.channels, "rcab")


class SCAB(Module):
    """RCAB followed by residual multi-head self-attention.

    With ``attention=False`` the block reduces to a plain RCAB (ablation switch).
    """

    def __init__(self, spec: ScabSpec, init: Init, attention: bool = True):
        super().__init__()
        self.spec = spec
        self.rcab = RCAB(spec.channels, init, spec.ca_reduction)
        self.mhsa = MultiHeadSelfAttention(spec.channels, init, spec.heads) if attention else None

    def forward(self, x):
        r = self.rcab(x)
        if self.mhsa is None:
            return r
        return r + self.mhsa(r)

    def output_shape(self, shape):
        return _same_channels(shape, self.spec.channels, "scab")
