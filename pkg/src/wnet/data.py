"""Resampling kernels, parsing binarization, synthetic faces and dataset I/O."""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

BACKGROUND, SKIN, EYEBROW, EYE, NOSE, MOUTH = range(6)
NUM_CLASSES = 6
REGIONS = ("eyes", "eyebrows", "nose", "mouth")
REGION_CLASS = {"eyes": EYE, "eyebrows": EYEBROW, "nose": NOSE, "mouth": MOUTH}

KEYS_A = -0.5


class ImageFormatError(ValueError):
    """Malformed or mismatched image file."""


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def cubic_kernel(t: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    """Keys cubic convolution kernel."""
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def bicubic_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) resampling matrix; half-pixel-centre alignment, clamped taps."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resize dims must be positive, got {n_in} -> {n_out}")
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    w = np.zeros((n_out, n_in))
    for tap in range(-1, 3):
        idx = base + tap
        np.add.at(w, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), cubic_kernel(src - idx))
    return w


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes of ``img`` with separable Keys bicubic (a=-0.5)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img)
    wy = bicubic_weights(img.shape[-2], out_h)
    wx = bicubic_weights(img.shape[-1], out_w)
    out = wy @ img.astype(np.float64) @ wx.T
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64)


def nearest_resize(m: np.ndarray, factor) -> np.ndarray:
    """Integer-factor nearest resampling of the last two axes.

    ``factor >= 1`` replicates pixels; ``factor = 1/k`` keeps the top-left
    sample of each k x k block.
    """
    f = Fraction(factor).limit_denominator(1 << 16)
    if f <= 0 or (f.numerator != 1 and f.denominator != 1):
        raise ValueError(f"nearest_resize needs an integer factor or its reciprocal, got {factor}")
    if f.denominator == 1:
        k = f.numerator
        return np.repeat(np.repeat(m, k, axis=-2), k, axis=-1)
    k = f.denominator
    if m.shape[-2] % k or m.shape[-1] % k:
        raise ValueError(f"map of size {m.shape[-2:]} not divisible by {k}")
    return m[..., ::k, ::k]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def binarize(label_map: np.ndarray) -> np.ndarray:
    """Skin -> 1, facial components and background -> 0."""
    label_map = np.asarray(label_map)
    if label_map.size and (label_map.min() < 0 or label_map.max() >= NUM_CLASSES):
        bad = label_map[(label_map < 0) | (label_map >= NUM_CLASSES)]
        raise ValueError(f"unknown class id {int(bad.flat[0])} in label map")
    return (label_map == SKIN).astype(np.float32)


def region_masks(label_map: np.ndarray) -> dict[str, np.ndarray]:
    return {name: (label_map == cls).astype(np.float32) for name, cls in REGION_CLASS.items()}


# ---------------------------------------------------------------------------
# synthetic faces
# ---------------------------------------------------------------------------

@dataclass
class FaceSample:
    hr_image: np.ndarray      # (3, H, W) in [0, 1]
    label_map: np.ndarray     # (H, W) int
    parsing_gt: np.ndarray    # (1, H, W) binary
    region_masks: dict        # name -> (1, H, W) binary
    lr_image: np.ndarray      # (3, H/scale, W/scale)


_SUPERSAMPLE = 4


def _face_geometry(rng: np.random.Generator):
    cx, cy = 0.5 + rng.uniform(-0.04, 0.04), 0.5 + rng.uniform(-0.04, 0.04)
    a, b = rng.uniform(0.28, 0.34), rng.uniform(0.36, 0.42)
    return dict(
        cx=cx, cy=cy, a=a, b=b,
        eye_dx=a * rng.uniform(0.36, 0.44), eye_dy=b * rng.uniform(0.12, 0.2),
        eye_rx=a * rng.uniform(0.17, 0.22), eye_ry=b * rng.uniform(0.07, 0.1),
        brow_gap=b * rng.uniform(0.13, 0.17), brow_t=b * rng.uniform(0.09, 0.12),
        brow_bend=rng.uniform(1.0, 2.0),
        nose_top=b * rng.uniform(0.0, 0.06), nose_bot=b * rng.uniform(0.22, 0.28), nose_w=a * rng.uniform(0.12, 0.17),
        mouth_dy=b * rng.uniform(0.45, 0.52), mouth_rx=a * rng.uniform(0.3, 0.4), mouth_ry=b * rng.uniform(0.07, 0.1),
    )


def _labels(g: dict, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Class id at normalized coordinates (x, y)."""
    lab = np.zeros(x.shape, dtype=np.int64)
    lab[((x - g["cx"]) / g["a"]) ** 2 + ((y - g["cy"]) / g["b"]) ** 2 <= 1] = SKIN
    ey = g["cy"] - g["eye_dy"]
    for side in (-1, 1):
        ex = g["cx"] + side * g["eye_dx"]
        lab[((x - ex) / g["eye_rx"]) ** 2 + ((y - ey) / g["eye_ry"]) ** 2 <= 1] = EYE
        # arc: band between two stacked parabolas over the eye
        dx = x - ex
        top = ey - g["eye_ry"] - g["brow_gap"] - g["brow_t"] + g["brow_bend"] * dx * dx
        brow = (np.abs(dx) <= 1.25 * g["eye_rx"]) & (y >= top) & (y <= top + g["brow_t"])
        lab[brow] = EYEBROW
    # nose: isosceles triangle, apex up
    ty, by = g["cy"] - g["nose_top"], g["cy"] + g["nose_bot"]
    frac = (y - ty) / (by - ty)
    lab[(frac >= 0) & (frac <= 1) & (np.abs(x - g["cx"]) <= frac * g["nose_w"])] = NOSE
    my = g["cy"] + g["mouth_dy"]
    lab[((x - g["cx"]) / g["mouth_rx"]) ** 2 + ((y - my) / g["mouth_ry"]) ** 2 <= 1] = MOUTH
    return lab


def synth_face(seed: int, size: int, scale: int = 4) -> FaceSample:
    """Deterministic procedural face with exact label map and region masks."""
    if size < 16:
        raise ValueError(f"synthetic faces need H >= 16, got {size}")
    if size % scale:
        raise ValueError(f"H={size} not divisible by scale={scale}")
    rng = np.random.default_rng(seed)
    g = _face_geometry(rng)
    palette = np.empty((NUM_CLASSES, 3))
    palette[SKIN] = np.array([0.85, 0.65, 0.5]) + rng.uniform(-0.12, 0.12, 3)
    palette[EYE] = rng.uniform(0.05, 0.25, 3)
    palette[EYEBROW] = rng.uniform(0.15, 0.35, 3) * np.array([1.0, 0.8, 0.6])
    palette[NOSE] = palette[SKIN] * rng.uniform(0.72, 0.82)
    palette[MOUTH] = np.array([0.75, 0.2, 0.25]) + rng.uniform(-0.1, 0.1, 3)
    bg0, bg1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    theta = rng.uniform(0, 2 * np.pi)
    light = rng.uniform(-0.3, 0.3, 2)

    s = _SUPERSAMPLE
    fine = (np.arange(size * s) + 0.5) / (size * s)
    yy, xx = np.meshgrid(fine, fine, indexing="ij")
    lab_fine = _labels(g, xx, yy)
    t = np.clip(0.5 + (xx - 0.5) * np.cos(theta) + (yy - 0.5) * np.sin(theta), 0, 1)
    img = (1 - t)[None] * bg0[:, None, None] + t[None] * bg1[:, None, None]
    face = lab_fine != BACKGROUND
    # directional shading across the face
    shade = 1.0 + 0.25 * ((xx - g["cx"]) / g["a"] * light[0] + (yy - g["cy"]) / g["b"] * light[1])
    shade -= 0.15 * (((xx - g["cx"]) / g["a"]) ** 2 + ((yy - g["cy"]) / g["b"]) ** 2)
    colored = palette[lab_fine].transpose(2, 0, 1) * shade[None]
    img = np.where(face[None], colored, img)
    hr = np.clip(img.reshape(3, size, s, size, s).mean(axis=(2, 4)), 0.0, 1.0)

    centers = (np.arange(size) + 0.5) / size
    cy_, cx_ = np.meshgrid(centers, centers, indexing="ij")
    labels = _labels(g, cx_, cy_)
    hr = hr.astype(np.float32)
    lr = bicubic_resize(hr, size // scale, size // scale)
    return FaceSample(
        hr_image=hr,
        label_map=labels,
        parsing_gt=binarize(labels)[None],
        region_masks={k: v[None] for k, v in region_masks(labels).items()},
        lr_image=lr,
    )


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------

def to_uint8(x: np.ndarray) -> np.ndarray:
    """[0,1] floats -> bytes, rounding half away from zero."""
    v = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def _atomic_save(img: Image.Image, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            img.save(fh, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_image(path, img: np.ndarray):
    """Write a (3, H, W) float image in [0, 1] as 8-bit RGB."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ImageFormatError(f"expected a (3, H, W) image, got {img.shape}")
    _atomic_save(Image.fromarray(to_uint8(img).transpose(1, 2, 0), mode="RGB"), path)


def write_map(path, m: np.ndarray, binary: bool = True):
    """Write a single-channel map. Binary maps are stored as {0, 255}; label maps as raw ids."""
    m = np.asarray(m)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise ImageFormatError(f"expected a single-channel map, got {m.shape}")
    data = (m > 0.5).astype(np.uint8) * 255 if binary else m.astype(np.uint8)
    _atomic_save(Image.fromarray(data, mode="L"), path)


def _open(path, expected_shape=None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im)
            mode = im.mode
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: unreadable image ({exc})") from exc
    if expected_shape is not None and arr.shape[:2] != tuple(expected_shape):
        raise ImageFormatError(f"{path}: size {arr.shape[:2]} does not match expected {tuple(expected_shape)}")
    return arr if mode != "P" else arr


def read_image(path, expected_shape=None) -> np.ndarray:
    arr = _open(path, expected_shape)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] < 3:
        raise ImageFormatError(f"{path}: expected an RGB image, got array of shape {arr.shape}")
    return (arr[..., :3].transpose(2, 0, 1) / 255.0).astype(np.float32)


def read_map(path, binary: bool = True, expected_shape=None) -> np.ndarray:
    arr = _open(path, expected_shape)
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: expected a single-channel map, got {arr.shape}")
    if binary:
        return (arr >= 128).astype(np.float32)[None]
    return arr.astype(np.int64)


# ---------------------------------------------------------------------------
# dataset directory
# ---------------------------------------------------------------------------

def write_dataset(out_dir, count: int, size: int, scale: int, seed: int) -> list[str]:
    """hr/, lr/, parsing/, labels/, masks/ with zero-padded 4-digit ids."""
    out = Path(out_dir)
    ids = []
    for i in range(count):
        sample = synth_face(seed + i, size, scale)
        sid = f"{i:04d}"
        write_image(out / "hr" / f"{sid}.png", sample.hr_image)
        write_image(out / "lr" / f"{sid}.png", sample.lr_image)
        write_map(out / "parsing" / f"{sid}.png", sample.parsing_gt)
        write_map(out / "labels" / f"{sid}.png", sample.label_map, binary=False)
        for name in REGIONS:
            write_map(out / "masks" / f"{sid}_{name}.png", sample.region_masks[name])
        ids.append(sid)
    return ids


@dataclass
class Dataset:
    ids: list
    hr: np.ndarray        # (M, 3, H, W)
    lr: np.ndarray        # (M, 3, h, w)
    parsing: np.ndarray   # (M, 1, H, W)
    masks: dict           # name -> (M, 1, H, W)

    def __len__(self):
        return len(self.ids)

    def batch(self, idx):
        idx = np.asarray(idx)
        return self.lr[idx], self.hr[idx], self.parsing[idx], {k: v[idx] for k, v in self.masks.items()}


def load_dataset(root) -> Dataset:
    root = Path(root)
    ids = sorted(p.stem for p in (root / "hr").glob("*.png")) if (root / "hr").is_dir() else []
    if not ids:
        raise FileNotFoundError(f"no samples found under {root / 'hr'}")
    hr = np.stack([read_image(root / "hr" / f"{i}.png") for i in ids])
    size = hr.shape[2:]
    lr = np.stack([read_image(root / "lr" / f"{i}.png") for i in ids])
    parsing = np.stack([read_map(root / "parsing" / f"{i}.png", expected_shape=size) for i in ids])
    masks = {name: np.stack([read_map(root / "masks" / f"{i}_{name}.png", expected_shape=size) for i in ids])
             for name in REGIONS}
    return Dataset(ids, hr, lr, parsing, masks)


def in_memory_dataset(count: int, size: int, scale: int, seed: int) -> Dataset:
    """Same content as :func:`write_dataset` without touching disk (values not quantized)."""
    samples = [synth_face(seed + i, size, scale) for i in range(count)]
    return Dataset(
        ids=[f"{i:04d}" for i in range(count)],
        hr=np.stack([s.hr_image for s in samples]),
        lr=np.stack([s.lr_image for s in samples]).astype(np.float32),
        parsing=np.stack([s.parsing_gt for s in samples]),
        masks={k: np.stack([s.region_masks[k] for s in samples]) for k in REGIONS},
    )
