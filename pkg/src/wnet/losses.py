"""Composite training objective with region-mask weighting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Init, Module
from .tensor import ShapeError, Tensor

REGION_COMPONENTS = (("eye", "eyes"), ("eyebrow", "eyebrows"), ("nose", "nose"), ("mouth", "mouth"))
COMPONENTS = ("mse", "parmse", "eye", "eyebrow", "nose", "mouth", "key")


@dataclass(frozen=True)
class LossWeights:
    lambda_pixel: float = 1.0
    lambda_par: float = 1.0
    lambda_key: float = 0.5

    def __post_init__(self):
        if min(self.lambda_pixel, self.lambda_par, self.lambda_key) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class FeatureExtractorSpec:
    depth: int = 3
    channels: tuple = (8, 16, 16)
    seed: int = 1234

    def __post_init__(self):
        if len(self.channels) != self.depth:
            raise ValueError(f"need {self.depth} channel counts, got {self.channels}")


class FeatureExtractor(Module):
    """Frozen seeded conv3x3+ReLU stack standing in for pretrained perceptual features.

    Weights are plain arrays, never Parameters, so no optimizer can touch them.
    Any pretrained stack can be plugged in by overriding :meth:`forward`.
    """

    def __init__(self, spec: FeatureExtractorSpec = FeatureExtractorSpec()):
        super().__init__()
        self.spec = spec
        init = Init(spec.seed)
        self.weights, self.biases = [], []
        cin = 3
        for cout in spec.channels:
            conv = Conv2d(cin, cout, 3, init)
            self.weights.append(Tensor(conv.weight.data))
            self.biases.append(Tensor(conv.bias.data))
            cin = cout

    def forward(self, x: Tensor) -> Tensor:
        for w, b in zip(self.weights, self.biases):
            if w.dtype != x.dtype:
                w, b = Tensor(w.data.astype(x.dtype)), Tensor(b.data.astype(x.dtype))
            x = T.relu(T.conv2d(x, w, b, padding=1))
        return x

    def frozen_state(self) -> list[np.ndarray]:
        return [t.data for t in self.weights + self.biases]


def _check_same(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


def _as_t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def mse_image(sr: Tensor, hr) -> Tensor:
    """(1/CHW) * ||sr - hr||^2 per sample, averaged over the batch."""
    hr = _as_t(hr, sr)
    _check_same(sr, hr, "mse_image")
    return T.mean(T.square(sr - hr))


def mse_parsing(pred: Tensor, gt) -> Tensor:
    """MSE between the 3-channel prediction and the binary map replicated to 3 channels."""
    gt = _as_t(gt, pred)
    if gt.shape[1] == 1 and pred.shape[1] == 3:
        gt = Tensor(np.repeat(gt.data, 3, axis=1))
    if pred.shape != gt.shape:
        raise ShapeError(f"mse_parsing: prediction {pred.shape} vs ground truth {gt.shape}")
    return T.mean(T.square(pred - gt))


def perceptual(sr: Tensor, hr, extractor: FeatureExtractor) -> Tensor:
    """(1/(C_k H_k W_k)) * ||phi(hr) - phi(sr)||^2 at the extractor's last stage."""
    hr = _as_t(hr, sr)
    _check_same(sr, hr, "perceptual")
    with T.no_grad():
        target = extractor(hr)
    return T.mean(T.square(extractor(sr) - Tensor(target.data)))


def region_loss(sr: Tensor, hr, mask, extractor: FeatureExtractor) -> Tensor:
    """Masked MSE (normalized by mask area) plus perceptual loss on the masked images."""
    hr = _as_t(hr, sr)
    mask = _as_t(mask, sr)
    n, c, h, w = sr.shape
    if mask.shape != (n, 1, h, w):
        raise ShapeError(f"region_loss: mask shape {mask.shape} != {(n, 1, h, w)}")
    _check_same(sr, hr, "region_loss")
    area = np.maximum(mask.data.sum(axis=(1, 2, 3)), 1.0) * c
    diff = (sr - hr) * mask
    per_sample = T.tsum(T.square(diff), axis=(1, 2, 3), keepdims=True) * Tensor(
        (1.0 / area).reshape(n, 1, 1, 1).astype(sr.dtype))
    masked_mse = T.mean(per_sample)
    masked_per = perceptual(sr * mask, Tensor(hr.data * mask.data), extractor)
    return masked_mse + masked_per


def total_loss(sr: Tensor, hr, parsing_pred: Tensor, parsing_gt, masks: dict,
               weights: LossWeights, extractor: FeatureExtractor):
    """Weighted sum of image MSE, parsing MSE and the four region losses.

    Returns ``(total, components)`` where components maps each of
    mse, parmse, eye, eyebrow, nose, mouth, key to a float.
    """
    terms = {"mse": mse_image(sr, hr), "parmse": mse_parsing(parsing_pred, parsing_gt)}
    for comp, region in REGION_COMPONENTS:
        terms[comp] = region_loss(sr, hr, masks[region], extractor)
    key = terms["eye"] + terms["eyebrow"] + terms["nose"] + terms["mouth"]
    total = weights.lambda_pixel * terms["mse"] + weights.lambda_par * terms["parmse"] + weights.lambda_key * key
    components = {k: v.item() for k, v in terms.items()}
    components["key"] = key.item()
    return total, components


def combine(components: dict, weights: LossWeights) -> float:
    """Recompute the weighted total from logged components."""
    key = sum(components[c] for c, _ in REGION_COMPONENTS)
    return weights.lambda_pixel * components["mse"] + weights.lambda_par * components["parmse"] + weights.lambda_key * key
