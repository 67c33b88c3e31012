"""Module/Parameter scaffolding and the basic layers every block is built from."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """Trainable tensor with a zero-initialized gradient and Adam moment buffers."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step_count = 0

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Module:
    """Registers Parameters, buffers and child modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal ----------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mname, mod in self.named_modules(prefix):
            for pname, p in mod._params.items():
                yield (f"{mname}.{pname}" if mname else pname), p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mname, mod in self.named_modules(prefix):
            for bname, b in mod._buffers.items():
                yield (f"{mname}.{bname}" if mname else bname), b

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = {n: (mod, b) for n, mod, b in self._buffer_owners()}
        missing = [n for n in list(params) + list(buffers) if n not in state]
        if missing:
            raise KeyError(f"state is missing entries: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for name, (mod, bname) in buffers.items():
            arr = np.asarray(state[name])
            getattr(mod, bname)[...] = arr

    def _buffer_owners(self):
        for mname, mod in self.named_modules():
            for bname in mod._buffers:
                yield (f"{mname}.{bname}" if mname else bname), mod, bname

    # -- modes ------------------------------------------------------------
    def train(self, mode: bool = True):
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Convert every parameter and buffer in place (64-bit mode for gradient checks)."""
        for p in self.parameters():
            p.astype(dtype)
        for _, mod, bname in self._buffer_owners():
            arr = getattr(mod, bname).astype(dtype)
            mod._buffers[bname] = arr
            object.__setattr__(mod, bname, arr)
        return self

    def name_parameters(self):
        """Stamp hierarchical names onto Parameters; called once after construction."""
        for name, p in self.named_parameters():
            p.name = name
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, m: Module):
        setattr(self, str(len(self._modules)), m)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return list(self._modules.values())[i]


class Sequential(ModuleList):
    def forward(self, x):
        for m in self:
            x = m(x)
        return x


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

class Init:
    """Seeded fan-in-scaled uniform initializer shared by every layer of a model."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def uniform(self, shape, fan_in: int, gain: float = 3.0) -> np.ndarray:
        bound = np.sqrt(gain / fan_in)
        return self.rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, init: Init, bias: bool = True, stride: int = 1):
        super().__init__()
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        fan_in = cin * k * k
        self.weight = Parameter(init.uniform((cout, cin, k, k), fan_in))
        self.bias = Parameter(init.uniform((cout,), fan_in, gain=1.0)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.k // 2)

    def output_shape(self, shape):
        n, c, h, w = shape
        if c != self.cin:
            raise T.ShapeError(f"conv: input C={c} != Cin={self.cin}")
        return (n, self.cout, (h - 1) // self.stride + 1, (w - 1) // self.stride + 1)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, k: int, init: Init, bias: bool = True):
        super().__init__()
        self.channels, self.k = channels, k
        self.weight = Parameter(init.uniform((channels, 1, k, k), k * k))
        self.bias = Parameter(init.uniform((channels,), k * k, gain=1.0)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.depthwise_conv2d(x, self.weight, self.bias, padding=self.k // 2)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        dt = T.default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dt))
        self.beta = Parameter(np.zeros(channels, dtype=dt))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dt))
        self.register_buffer("running_var", np.ones(channels, dtype=dt))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


def zero_init(module: Module):
    """Set every Parameter of ``module`` except BatchNorm scales to zero."""
    for name, p in module.named_parameters():
        if not name.endswith("gamma"):
            p.data[...] = 0
    return module
