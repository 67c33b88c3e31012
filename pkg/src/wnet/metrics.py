"""PSNR / SSIM on RGB images in [0, 1], plus CSV reporting."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

PSNR_IDENTICAL = math.inf  # returned when the two images are identical

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b, name):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} differ")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.

    Accepts (H, W), (C, H, W) or (N, C, H, W); leading axes are averaged.
    """
    a, b = _pair(a, b, "ssim")
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"ssim: image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def blur(x):
        # separable Gaussian, then keep only fully-covered ("valid") positions
        y = correlate1d(correlate1d(x, g, axis=-1, mode="constant"), g, axis=-2, mode="constant")
        r = SSIM_WINDOW // 2
        return y[..., r:-r, r:-r]

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a * mu_a
    sbb = blur(b * b) - mu_b * mu_b
    sab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    smap = num / den
    return float(smap.reshape(-1, *smap.shape[-2:]).mean(axis=(-2, -1)).mean())


def write_report(path, rows: list[tuple[str, float, float]]):
    """CSV with image_id, psnr_db, ssim (6 decimals) and a trailing mean row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "psnr_db", "ssim"])
        for image_id, p, s in rows:
            w.writerow([image_id, _fmt(p), f"{s:.6f}"])
        if rows:
            ps = [r[1] for r in rows]
            w.writerow(["mean", _fmt(float(np.mean(ps))), f"{np.mean([r[2] for r in rows]):.6f}"])


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"
