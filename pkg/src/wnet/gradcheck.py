"""Central-difference gradient checking against the reverse-mode engine."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor


# Lower bound on the rounding noise of one loss evaluation, in units of the loss's last place.
NOISE_ULPS = 4
# Coordinates nudged (both ways) to measure that noise, and the relative nudge.
NOISE_PROBES = 8
PROBE_STEP = 1e-9


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    checked: int
    per_parameter: dict = field(default_factory=dict)
    seconds: float = 0.0
    skipped: int = 0
    below_resolution: dict = field(default_factory=dict)
    resolution: float = 0.0
    tolerance: float = 1e-5

    def passed(self, tolerance: float | None = None) -> bool:
        return self.max_rel_error < (self.tolerance if tolerance is None else tolerance)

    def __str__(self):
        text = (f"max_rel_error={self.max_rel_error:.3e} worst_parameter={self.worst_parameter} "
                f"checked={self.checked} skipped={self.skipped} seconds={self.seconds:.1f}")
        if self.below_resolution:
            names = ", ".join(sorted(self.below_resolution))
            text += (f"\nbelow resolution (|a|, |n| < {self.resolution:.1e}, "
                     f"agreement checked absolutely): {names}")
        return text


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _eval(loss_fn: Callable[[], Tensor]) -> tuple[float, list]:
    with T.no_grad(), T.record_patterns() as patterns:
        value = loss_fn().item()
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} during gradient check")
    return value, patterns


def _same_piece(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _probe_noise(loss_fn, tensors, analytic, base, base_value, restore, seed) -> float:
    """Largest deviation of the loss from its linearization under tiny nudges."""
    names = list(tensors)
    sizes = np.array([tensors[n].data.size for n in names], dtype=np.float64)
    rng = np.random.default_rng([seed, 0x6e6f6973])
    worst = 0.0
    for _ in range(NOISE_PROBES):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = tensors[name].data.reshape(-1)
        i = rng.integers(flat.size)
        orig = flat[i]
        for sign in (1.0, -1.0):
            flat[i] = orig + sign * PROBE_STEP * max(1.0, abs(float(orig)))
            step = float(flat[i]) - float(orig)
            value, pattern = _eval(loss_fn)
            restore()
            flat[i] = orig
            if _same_piece(base, pattern):
                worst = max(worst, abs(value - base_value - float(analytic[name].reshape(-1)[i]) * step))
    return worst


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], h: float = 1e-4,
                    samples: int = 512, seed: int = 0, exclude: dict[str, np.ndarray] | None = None,
                    directions: int = 0, restore: Callable[[], None] | None = None,
                    max_tries: int = 8, tolerance: float = 1e-5) -> GradCheckReport:
    """Compare analytic and central-difference derivatives of ``loss_fn``.

    ``tensors`` maps names to leaves (Parameters or inputs with
    ``requires_grad``). Up to ``samples`` coordinates per tensor are drawn with
    a seeded generator; coordinates flagged in ``exclude`` are never drawn.

    A perturbation that flips any ReLU mask or max-op argmax has stepped over a
    kink, where the central difference does not estimate the derivative. Such
    coordinates are discarded and another one is drawn (at most ``max_tries``
    draws per accepted sample).

    Each loss evaluation carries rounding noise. It is measured by nudging a
    few coordinates by a relative ``PROBE_STEP`` and taking the residual after
    the analytic linear change (curvature is negligible at that step). The
    central
    difference cannot resolve derivatives much smaller than
    ``noise / tolerance``. Those coordinates are still compared, but against
    the absolute noise bound; a wrong analytic value that is large is thus
    still caught. Resolvable coordinates are preferred when drawing, and
    tensors for which none was found are listed in ``below_resolution``.

    ``directions`` adds joint random-direction checks over all tensors.
    ``restore`` runs after every evaluation to undo side effects such as
    BatchNorm running statistics.
    """
    start = time.perf_counter()
    exclude = exclude or {}
    restore = restore or (lambda: None)
    for t in tensors.values():
        t.grad = np.zeros_like(t.data)
    with T.record_patterns() as base:
        loss = loss_fn()
    base_value = loss.item()
    if not np.isfinite(base_value):
        raise FloatingPointError(f"non-finite loss {base_value}")
    loss.backward()
    restore()
    analytic = {name: t.grad.copy() for name, t in tensors.items()}
    eval_noise = max(NOISE_ULPS * float(np.spacing(abs(base_value))),
                     _probe_noise(loss_fn, tensors, analytic, base, base_value, restore, seed))
    # two noisy evaluations per difference, with a factor of two in reserve
    noise = 2 * eval_noise / h
    floor = noise / tolerance

    rng = np.random.default_rng(seed)
    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    per_param: dict[str, float] = {}
    below: dict[str, float] = {}

    def central(apply_plus, apply_minus, reset):
        """Central difference, or None when either side lands on another smooth piece."""
        apply_plus()
        plus, pattern = _eval(loss_fn)
        restore()
        if not _same_piece(base, pattern):
            reset()
            return None
        apply_minus()
        minus, pattern = _eval(loss_fn)
        restore()
        reset()
        if not _same_piece(base, pattern):
            return None
        return (plus - minus) / (2 * h)

    def judge(a, n):
        """(error, resolvable): relative error, or the absolute test below resolution."""
        if max(abs(a), abs(n)) >= floor:
            return rel_error(a, n), True
        return (0.0 if abs(a - n) <= noise else rel_error(a, n)), False

    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        grad = analytic[name].reshape(-1)
        allowed = np.arange(flat.size)
        if name in exclude:
            allowed = allowed[~np.asarray(exclude[name]).reshape(-1)]
        if allowed.size == 0:
            continue
        want = min(samples, allowed.size)
        order = rng.permutation(allowed)
        # resolvable coordinates first, in seeded random order
        order = np.concatenate([order[np.abs(grad[order]) >= floor], order[np.abs(grad[order]) < floor]])
        order = order[:want * max_tries]
        err_here, accepted, resolved, unresolved_err = 0.0, 0, 0, 0.0
        for i in order:
            if accepted == want:
                break
            orig = flat[i]

            def put(v, i=i):
                flat[i] = v

            numeric = central(lambda: put(orig + h), lambda: put(orig - h), lambda: put(orig))
            if numeric is None:
                skipped += 1
                continue
            err, ok = judge(float(grad[i]), numeric)
            err_here = max(err_here, err)
            accepted += 1
            checked += 1
            resolved += ok
            if not ok:
                unresolved_err = max(unresolved_err, abs(float(grad[i]) - numeric))
        if accepted:
            per_param[name] = err_here
            if not resolved:
                below[name] = unresolved_err
            if err_here > worst:
                worst, worst_name = err_here, name

    saved = {name: t.data.copy() for name, t in tensors.items()}

    def shift(dirs, sign):
        def apply():
            for name, t in tensors.items():
                t.data[...] = saved[name] + sign * h * dirs[name]
        return apply

    def reset():
        for name, t in tensors.items():
            t.data[...] = saved[name]

    for k in range(directions):
        for _ in range(max_tries):
            dirs = {name: rng.standard_normal(t.shape).astype(t.dtype) for name, t in tensors.items()}
            norm = np.sqrt(sum(float((d * d).sum()) for d in dirs.values()))
            dirs = {name: d / norm for name, d in dirs.items()}
            numeric = central(shift(dirs, 1.0), shift(dirs, -1.0), reset)
            if numeric is None:
                skipped += 1
                continue
            expected = sum(float((analytic[name] * d).sum()) for name, d in dirs.items())
            err, _ = judge(expected, numeric)
            key = f"<direction {k}>"
            per_param[key] = err
            checked += 1
            if err > worst:
                worst, worst_name = err, key
            break

    return GradCheckReport(worst, worst_name, checked, per_param, time.perf_counter() - start, skipped,
                           below, floor, tolerance)


def buffer_snapshot(module: Module) -> Callable[[], None]:
    """Returns a callable that resets every buffer of ``module`` to its current value."""
    saved = [(buf, buf.copy()) for _, buf in module.named_buffers()]

    def restore():
        for buf, value in saved:
            buf[...] = value

    return restore


def check_module(module: Module, loss_fn: Callable[[], Tensor], h: float = 1e-4, samples: int = 512,
                 seed: int = 0, extra: dict[str, Tensor] | None = None, directions: int = 0,
                 tolerance: float = 1e-5) -> GradCheckReport:
    tensors = dict(module.named_parameters())
    tensors.update(extra or {})
    return check_gradients(loss_fn, tensors, h=h, samples=samples, seed=seed, directions=directions,
                           restore=buffer_snapshot(module), tolerance=tolerance)


def grad_check(config=None, seed: int = 0, h: float = 1e-5, tolerance: float = 1e-5, batch: int = 4,
               samples: int = 1, directions: int = 2) -> GradCheckReport:
    """Full W-Net + composite loss gradient check in 64-bit mode.

    Every parameter tensor gets ``samples`` seeded coordinates, and
    ``directions`` random directions perturb all parameters jointly. Output
    heads keep their random initialization here: zeroed heads would make every
    upstream derivative exactly zero and the check vacuous.
    """
    from .data import in_memory_dataset
    from .losses import FeatureExtractor, LossWeights, total_loss
    from dataclasses import replace

    from .model import WNet, WNetConfig

    config = replace(config or WNetConfig(hr_size=16, channels=8, ca_reduction=4, seed=seed),
                     zero_init_heads=False)
    with T.precision(np.float64):
        model = WNet(config)
        extractor = FeatureExtractor()
    data = in_memory_dataset(batch, config.hr_size, config.scale, seed)
    lr, hr, parsing, masks = data.batch(np.arange(batch))
    hr, parsing = hr.astype(np.float64), parsing.astype(np.float64)
    masks = {k: v.astype(np.float64) for k, v in masks.items()}
    weights = LossWeights()

    def loss_fn():
        out = model(lr.astype(np.float64))
        return total_loss(out["sr"], hr, out["parsing"], parsing, masks, weights, extractor)[0]

    return check_module(model, loss_fn, h=h, samples=samples, seed=seed, directions=directions,
                        tolerance=tolerance)
