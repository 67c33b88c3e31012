"""W-Net assembly: parsing estimation, W-shaped fusion front-end, SCAB encoder-decoder."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import bicubic_resize
from .layers import SCAB, DownsampleBlock, ScabSpec, UpsampleBlock
from .lpf import LPF, CascadeFusion, LpfSpec
from .nn import Conv2d, Init, Module, ModuleList
from .parsing import ParsingBlock
from .tensor import ShapeError, Tensor

FRONT_UP = (2, 4, 8)
FRONT_DOWN = (4, 2, 1)
ENCODER_STAGES = 4


@dataclass
class WNetConfig:
    hr_size: int = 32
    scale: int = 4
    channels: int = 64
    heads: int = 4
    scab_per_stage: int = 2
    ca_reduction: int = 16
    hourglass_depth: int = 4
    use_lpf: bool = True
    use_parsing_block: bool = True
    use_scab: bool = True
    seed: int = 0
    memory_budget_bytes: int = 1 << 30
    # start both output projections at zero: SR begins as the bicubic image, parsing at 0.5
    zero_init_heads: bool = True

    def __post_init__(self):
        if self.hr_size % 16:
            raise ValueError(f"hr_size={self.hr_size} must be divisible by 16")
        if self.scale not in (4, 8):
            raise ValueError(f"scale must be 4 or 8, got {self.scale}")
        if self.channels % self.heads:
            raise ValueError(f"channels={self.channels} not divisible by heads={self.heads}")
        if self.hr_size % self.scale:
            raise ValueError(f"hr_size={self.hr_size} not divisible by scale={self.scale}")

    @property
    def lr_size(self) -> int:
        return self.hr_size // self.scale

    def peak_map_bytes(self, batch: int, itemsize: int = 4) -> int:
        """Size of one feature map at the top of the W (8x the HR size)."""
        return batch * self.channels * (8 * self.hr_size) ** 2 * itemsize

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown WNetConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ParsingPyramid:
    """Nearest-neighbour resamples of the base parsing prediction, keyed by spatial size."""

    base_size: int
    maps: dict = field(default_factory=dict)

    def at(self, size: int):
        if size not in self.maps:
            raise ShapeError(f"no parsing map at size {size}; have {sorted(self.maps)}")
        return self.maps[size]


def pyramid_sizes(hr_size: int) -> list[int]:
    return [hr_size * f for f in (1, 2, 4, 8)] + [hr_size // f for f in (2, 4, 8, 16)]


def build_parsing_pyramid(parsing: Tensor) -> ParsingPyramid:
    """Up by 1, 2, 4, 8 and down by 2, 4, 8, 16 with nearest-neighbour resampling."""
    h = parsing.shape[2]
    if h % 16 or parsing.shape[3] % 16:
        raise ShapeError(f"parsing map {parsing.shape[2:]} must be divisible by 16")
    pyr = ParsingPyramid(h)
    for f in (1, 2, 4, 8):
        pyr.maps[h * f] = T.nearest_up(parsing, f)
    for f in (2, 4, 8, 16):
        pyr.maps[h // f] = T.nearest_down(parsing, f)
    return pyr


def _shape_pyramid(shape) -> ParsingPyramid:
    n, c, h, w = shape
    if h % 16 or w % 16:
        raise ShapeError(f"parsing map {(h, w)} must be divisible by 16")
    pyr = ParsingPyramid(h)
    for f in (1, 2, 4, 8):
        pyr.maps[h * f] = (n, c, h * f, w * f)
    for f in (2, 4, 8, 16):
        pyr.maps[h // f] = (n, c, h // f, w // f)
    return pyr


class WNet(Module):
    def __init__(self, config: WNetConfig):
        super().__init__()
        self.config = config
        c = config.channels
        init = Init(config.seed)
        r = config.ca_reduction
        lpf_spec = LpfSpec(c, 3)

        def fusion():
            return LPF(lpf_spec, init, r) if config.use_lpf else CascadeFusion(lpf_spec, init)

        self.parsing = ParsingBlock(c, init, config.hourglass_depth, r, plain=not config.use_parsing_block)
        # pre-resize convs: 6 -> C for the initial concat, then C -> C
        self.front_convs = ModuleList([Conv2d(6, c, 3, init)] + [Conv2d(c, c, 3, init) for _ in range(5)])
        self.front_up = ModuleList([UpsampleBlock(c, init) for _ in FRONT_UP])
        self.front_down = ModuleList([DownsampleBlock(c, init) for _ in FRONT_DOWN])
        self.front_fuse = ModuleList([fusion() for _ in range(len(FRONT_UP) + len(FRONT_DOWN))])

        spec = ScabSpec(c, config.heads, r)
        self.enc_scabs = ModuleList([SCAB(spec, init, config.use_scab)
                                     for _ in range(ENCODER_STAGES * config.scab_per_stage)])
        self.enc_down = ModuleList([DownsampleBlock(c, init) for _ in range(ENCODER_STAGES)])
        self.enc_fuse = ModuleList([fusion() for _ in range(ENCODER_STAGES)])
        self.dec_up = ModuleList([UpsampleBlock(c, init) for _ in range(ENCODER_STAGES)])
        self.dec_scabs = ModuleList([SCAB(spec, init, config.use_scab)
                                     for _ in range(ENCODER_STAGES * config.scab_per_stage)])
        self.sr_head = Conv2d(c, 3, 3, init)
        if config.zero_init_heads:
            for head in (self.sr_head, self.parsing.head):
                head.weight.data[...] = 0
                head.bias.data[...] = 0
        self.name_parameters()
        self._names = {id(m): n for n, m in self.named_modules()}
        self._shape_mode = False
        self.counters: Counter = Counter()
        self.trace: list[tuple[str, tuple]] = []

    # -- execution helpers --------------------------------------------------
    def _run(self, mod: Module, *xs):
        if self._shape_mode:
            return mod.output_shape(*xs)
        out = mod(*xs)
        if not np.isfinite(out.data).all():
            raise FloatingPointError(f"non-finite activation in {self._names.get(id(mod), type(mod).__name__)}")
        return out

    def _concat(self, a, b):
        if self._shape_mode:
            if a[2:] != b[2:]:
                raise ShapeError(f"concat: {a} vs {b}")
            return (a[0], a[1] + b[1], a[2], a[3])
        return T.concat([a, b])

    def _shape(self, x):
        return x if self._shape_mode else x.shape

    def _record(self, stage: str, x):
        self.trace.append((stage, tuple(self._shape(x))))

    def _fuse(self, counter: str, mod: Module, x, pyramid: ParsingPyramid):
        size = self._shape(x)[2]
        p = pyramid.at(size)
        if tuple(self._shape(p))[2:] != tuple(self._shape(x))[2:]:
            raise ShapeError(f"{counter}: parsing map {self._shape(p)} does not match features {self._shape(x)}")
        self.counters[counter] += 1
        self.counters[f"{counter}@{size}"] += 1
        out = self._run(mod, x, p)
        self._record(counter, out)
        return out

    # -- stages -------------------------------------------------------------
    def front(self, image, pyramid: ParsingPyramid):
        """Seven fusions: concat at H, LPF at 2H, 4H, 8H, then 4H, 2H, H."""
        h = self._shape(image)[2]
        x = self._concat(image, pyramid.at(h))
        self.counters["front_fusion"] += 1
        self._record("front_fusion", x)
        convs = iter(self.front_convs)
        fuses = iter(self.front_fuse)
        for up in self.front_up:
            x = self._run(up, self._run(next(convs), x))
            x = self._fuse("front_fusion", next(fuses), x, pyramid)
        for down in self.front_down:
            x = self._run(down, self._run(next(convs), x))
            x = self._fuse("front_fusion", next(fuses), x, pyramid)
        return x

    def encoder(self, x, pyramid: ParsingPyramid):
        k = self.config.scab_per_stage
        for s in range(ENCODER_STAGES):
            for blk in list(self.enc_scabs)[s * k:(s + 1) * k]:
                x = self._run(blk, x)
            x = self._run(self.enc_down[s], x)
            x = self._fuse("encoder_fusion", self.enc_fuse[s], x, pyramid)
        return x

    def decoder(self, x):
        k = self.config.scab_per_stage
        for s in range(ENCODER_STAGES):
            x = self._run(self.dec_up[s], x)
            self.counters["decoder_upsample"] += 1
            for blk in list(self.dec_scabs)[s * k:(s + 1) * k]:
                x = self._run(blk, x)
            self._record("decoder_upsample", x)
        return x

    def check_memory(self, batch: int, itemsize: int = 4):
        need = self.config.peak_map_bytes(batch, itemsize)
        if need > self.config.memory_budget_bytes:
            raise MemoryError(f"a {8 * self.config.hr_size}^2 feature map at batch {batch} needs {need} bytes, "
                              f"budget is {self.config.memory_budget_bytes}")

    # -- public API ---------------------------------------------------------
    def preprocess(self, lr: np.ndarray) -> np.ndarray:
        """Bicubic pre-interpolation of the raw LR batch to the HR size."""
        h = self.config.hr_size
        if lr.ndim != 4 or lr.shape[1] != 3:
            raise ShapeError(f"expected an (N, 3, h, w) LR batch, got {lr.shape}")
        if lr.shape[2] * self.config.scale != h or lr.shape[3] * self.config.scale != h:
            raise ShapeError(f"LR size {lr.shape[2:]} x{self.config.scale} != HR size {h}")
        return bicubic_resize(lr, h, h)

    def forward(self, lr) -> dict:
        """Raw LR (N,3,H/s,W/s) -> {"sr": (N,3,H,W) raw, "parsing": (N,3,H,W) in (0,1)}."""
        lr_data = lr.data if isinstance(lr, Tensor) else np.asarray(lr)
        self.counters = Counter()
        self.trace = []
        self.check_memory(lr_data.shape[0], np.dtype(self.dtype()).itemsize)
        image = Tensor(self.preprocess(lr_data).astype(self.dtype()))
        parsing = self._run(self.parsing, image)
        pyramid = build_parsing_pyramid(parsing)
        x = self.front(image, pyramid)
        x = self.encoder(x, pyramid)
        x = self.decoder(x)
        # the head predicts a correction to the pre-interpolated input
        sr = self._run(self.sr_head, x) + image
        return {"sr": sr, "parsing": parsing}

    def infer(self, lr: np.ndarray) -> dict:
        """Eval-mode forward without graph recording; SR clamped to [0, 1]."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                out = self.forward(lr)
        finally:
            self.train(was_training)
        return {"sr": np.clip(out["sr"].data, 0.0, 1.0), "parsing": out["parsing"].data}

    def walk(self, batch: int = 1) -> list[tuple[str, tuple]]:
        """Propagate shapes through the whole graph without touching weights."""
        h = self.config.hr_size
        self.counters = Counter()
        self.trace = []
        self._shape_mode = True
        try:
            image = (batch, 3, h, h)
            parsing = self.parsing.output_shape(image)
            pyramid = _shape_pyramid(parsing)
            x = self.front(image, pyramid)
            x = self.encoder(x, pyramid)
            x = self.decoder(x)
            self._record("sr_head", self.sr_head.output_shape(x))
        finally:
            self._shape_mode = False
        return self.trace

    def dtype(self):
        return self.sr_head.weight.dtype

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))
