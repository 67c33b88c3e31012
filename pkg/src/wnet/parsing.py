"""Binary face-parsing estimation from the (pre-interpolated) input image."""
from __future__ import annotations

from . import tensor as T
from .layers import ChannelAttention, Hourglass, ResidualBlock, SpatialAttention
from .nn import Conv2d, Init, Module
from .tensor import ShapeError


class MultiScaleAttentionUnit(Module):
    """Parallel 1x1/3x3 branches, widened and narrowed convs, CA + SA, residual.

    Channel ledger for trunk width C: three C-channel branches, a 3C -> 2C conv,
    a C -> C/2 conv, a 3.5C concat fed to CA and SA, and a 1x1 back to C.
    """

    def __init__(self, channels: int, init: Init, reduction: int = 16):
        super().__init__()
        if channels % 2:
            raise ValueError(f"attention unit needs an even channel count, got {channels}")
        c = channels
        self.channels = c
        self.wide_channels = 2 * c
        self.narrow_channels = c // 2
        self.cat_channels = c + 2 * c + c // 2
        self.branch1 = Conv2d(c, c, 1, init)
        self.branch2 = Conv2d(c, c, 3, init)
        self.branch3 = Conv2d(c, c, 3, init)
        self.widen = Conv2d(3 * c, self.wide_channels, 3, init)
        self.narrow = Conv2d(c, self.narrow_channels, 3, init)
        self.ca = ChannelAttention(self.cat_channels, init, reduction)
        self.sa = SpatialAttention(init)
        self.project = Conv2d(self.cat_channels, c, 1, init)

    def forward(self, f_deep):
        y1 = T.relu(self.branch1(f_deep))
        y2 = T.relu(self.branch2(f_deep))
        y3 = T.relu(self.branch3(f_deep))
        y4 = T.relu(self.widen(T.concat([y1, y2, y3])))
        y5 = T.relu(self.narrow(y3))
        z = T.concat([y2, y4, y5])
        y6 = self.ca(z) + self.sa(z)
        return self.project(y6) + f_deep

    def output_shape(self, shape):
        if shape[1] != self.channels:
            raise ShapeError(f"attention unit: expected {self.channels} channels, got {shape[1]}")
        return shape


class PlainParsingTrunk(Module):
    """Ablation replacement for residual + hourglass + attention unit: two conv3x3+ReLU."""

    def __init__(self, channels: int, init: Init):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, init)
        self.conv2 = Conv2d(channels, channels, 3, init)

    def forward(self, x):
        return T.relu(self.conv2(T.relu(self.conv1(x))))

    def output_shape(self, shape):
        return shape


class ParsingBlock(Module):
    """Image (N,3,H,W) -> parsing prediction (N,3,H,W) in (0,1)."""

    def __init__(self, channels: int, init: Init, hourglass_depth: int = 4, reduction: int = 16,
                 plain: bool = False):
        super().__init__()
        self.channels = channels
        self.hourglass_depth = hourglass_depth
        self.plain = plain
        self.shallow = Conv2d(3, channels, 3, init)
        if plain:
            self.trunk = PlainParsingTrunk(channels, init)
        else:
            self.res = ResidualBlock(channels, init)
            self.hourglass = Hourglass(channels, hourglass_depth, init)
            self.attention = MultiScaleAttentionUnit(channels, init, reduction)
        self.head = Conv2d(channels, 3, 3, init)

    def shallow_features(self, image):
        if image.shape[1] != 3:
            raise ShapeError(f"parsing block expects a 3-channel image, got C={image.shape[1]}")
        return self.shallow(image)

    def deep_features(self, f_shallow):
        return self.hourglass(self.res(f_shallow))

    def features(self, image):
        f = self.shallow_features(image)
        if self.plain:
            return self.trunk(f)
        return self.attention(self.deep_features(f))

    def forward(self, image):
        # sigmoid keeps the prediction comparable to a 0-1 target
        return T.sigmoid(self.head(self.features(image)))

    def output_shape(self, shape):
        if shape[1] != 3:
            raise ShapeError(f"parsing block expects a 3-channel image, got C={shape[1]}")
        n, _, h, w = shape
        if not self.plain:
            self.hourglass.output_shape((n, self.channels, h, w))
        return (n, 3, h, w)
