"""Adam training loop over the composite loss, with CSV logging and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint
from .data import Dataset, bicubic_resize, load_dataset
from .losses import FeatureExtractor, LossWeights, combine, total_loss
from .metrics import psnr
from .model import WNet, WNetConfig
from .optim import Adam, AdamConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "total", "mse", "parmse", "eye", "eyebrow", "nose", "mouth", "ms")


@dataclass
class TrainConfig:
    model: WNetConfig = field(default_factory=WNetConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    beta1: float = 0.90
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 4
    steps: int = 500
    dataset_dir: str = ""
    out_dir: str = "run"
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("lr and batch_size must be positive, steps non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, self.eps_adam)

    def to_flat(self) -> dict:
        flat = {k: v for k, v in asdict(self).items() if k not in ("model", "weights")}
        flat.update(self.model.to_dict())
        flat.update(asdict(self.weights))
        return flat

    @classmethod
    def from_flat(cls, d: dict) -> "TrainConfig":
        """Flat key/value mapping -> TrainConfig; unknown keys are rejected."""
        model_keys = {f.name for f in fields(WNetConfig)}
        weight_keys = {f.name for f in fields(LossWeights)}
        own_keys = {f.name for f in fields(cls)} - {"model", "weights"}
        unknown = set(d) - model_keys - weight_keys - own_keys
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        model = WNetConfig(**{k: v for k, v in d.items() if k in model_keys})
        weights = LossWeights(**{k: v for k, v in d.items() if k in weight_keys})
        return cls(model=model, weights=weights, **{k: v for k, v in d.items() if k in own_keys})

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: expected a flat key/value document")
        return cls.from_flat(data)


@dataclass
class TrainResult:
    model: WNet
    log: list[dict]
    checkpoint: Path | None


def batch_order(n: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Seeded epoch-wise shuffles cut into fixed-size batches (wrapping across epochs)."""
    rng = np.random.default_rng(seed)
    stream: list[int] = []
    need = steps * batch_size
    while len(stream) < need:
        stream.extend(rng.permutation(n).tolist())
    return [np.array(stream[i * batch_size:(i + 1) * batch_size]) for i in range(steps)]


def write_log(path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:-1]] + [f"{r['ms']:.1f}"])


def train(config: TrainConfig, dataset: Dataset | None = None, on_step=None) -> TrainResult:
    data = dataset if dataset is not None else load_dataset(config.dataset_dir)
    if len(data) == 0:
        raise ValueError("empty dataset")
    mc = config.model
    if data.hr.shape[2] != mc.hr_size or data.lr.shape[2] * mc.scale != mc.hr_size:
        raise ValueError(f"dataset HR {data.hr.shape[2:]} / LR {data.lr.shape[2:]} does not match "
                         f"hr_size={mc.hr_size}, scale={mc.scale}")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config.to_flat(), indent=2, sort_keys=True))

    model = WNet(mc)
    model.train()
    extractor = FeatureExtractor()
    opt = Adam(model.parameters(), config.adam)
    rows: list[dict] = []
    order = batch_order(len(data), config.batch_size, config.steps, config.seed)
    for step, idx in enumerate(order, start=1):
        t0 = time.perf_counter()
        lr_b, hr_b, par_b, mask_b = data.batch(idx)
        opt.zero_grad()
        out = model(lr_b)
        total, comps = total_loss(out["sr"], hr_b, out["parsing"], par_b, mask_b, config.weights, extractor)
        value = total.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} at step {step}")
        total.backward()
        opt.step()
        row = {"step": step, "total": value, **comps, "ms": 1000 * (time.perf_counter() - t0)}
        rows.append(row)
        if on_step is not None:
            on_step(row)
        log.info("step %d total %.6f mse %.6f parmse %.6f", step, value, comps["mse"], comps["parmse"])
        if config.checkpoint_every and step % config.checkpoint_every == 0 and step != config.steps:
            checkpoint.save(out_dir / f"step_{step:06d}.wnet", model, include_adam=True)
    final = out_dir / "final.wnet"
    checkpoint.save(final, model, include_adam=True)
    write_log(out_dir / "train_log.csv", rows)
    return TrainResult(model, rows, final)


def logged_total_matches(row: dict, weights: LossWeights, tol: float = 1e-6) -> bool:
    return abs(combine(row, weights) - row["total"]) <= tol * max(1.0, abs(row["total"]))


def evaluate(model: WNet, data: Dataset, batch_size: int = 4) -> dict:
    """Eval-mode SR/parsing quality on ``data``: PSNR vs HR, bicubic baseline, parsing IoU."""
    sr_psnr, bic_psnr, ious = [], [], []
    h = model.config.hr_size
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        lr_b, hr_b, par_b, _ = data.batch(idx)
        out = model.infer(lr_b)
        bic = np.clip(bicubic_resize(lr_b, h, h), 0.0, 1.0)
        for i in range(len(idx)):
            sr_psnr.append(psnr(out["sr"][i], hr_b[i]))
            bic_psnr.append(psnr(bic[i], hr_b[i]))
            ious.append(parsing_iou(out["parsing"][i], par_b[i]))
    return {"psnr": float(np.mean(sr_psnr)), "bicubic_psnr": float(np.mean(bic_psnr)),
            "iou": float(np.mean(ious)), "per_image_iou": ious}


def parsing_iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """IoU of the thresholded prediction (channel mean of the 3 outputs) with the binary map."""
    p = np.asarray(pred).mean(axis=0) >= threshold
    g = np.asarray(gt).reshape(p.shape) >= 0.5
    union = np.logical_or(p, g).sum()
    return 1.0 if union == 0 else float(np.logical_and(p, g).sum() / union)
