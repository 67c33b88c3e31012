"""Dense tensors with reverse-mode gradient propagation.

Feature maps are rank-4 ``(N, C, H, W)`` arrays; per-channel parameters
(biases, BatchNorm affine terms) are rank-1. Every op records a closure
that maps the output gradient to input gradients, and :meth:`Tensor.backward`
replays those closures in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; the message names the dims."""


class GraphError(RuntimeError):
    """Raised on misuse of the recorded computation history."""


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


_PATTERNS: list | None = None


@contextlib.contextmanager
def record_patterns():
    """Collect the branch choices of non-smooth ops (ReLU masks, max argmaxes).

    Yields the list that the ops append to, in execution order. Two forward
    passes with equal lists lie on the same smooth piece of the function.
    """
    global _PATTERNS
    prev = _PATTERNS
    _PATTERNS = []
    try:
        yield _PATTERNS
    finally:
        _PATTERNS = prev


def _record(pattern: np.ndarray):
    if _PATTERNS is not None:
        _PATTERNS.append(pattern)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            keep = isinstance(data, np.ndarray) and data.dtype.kind == "f"
            dtype = data.dtype if keep else _DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1, 1, 1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable | None = None
        self._released = False
        self.op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None if not self.requires_grad else np.zeros_like(self.data)

    # -- graph ------------------------------------------------------------
    @property
    def is_leaf(self) -> bool:
        return self._backward_fn is None

    def backward(self):
        """Propagate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise GraphError("this computation history has already been backpropagated")
        if self._backward_fn is None:
            if self.requires_grad:
                self._accumulate(np.ones_like(self.data))
                return
            raise GraphError("loss is not attached to a recorded computation history")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if node._backward_fn is None:
                if g is not None and node.requires_grad:
                    node._accumulate(g)
                continue
            if g is not None:
                parent_grads = node._backward_fn(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._release()

    def _accumulate(self, g: np.ndarray):
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def _release(self):
        self._parents = ()
        self._backward_fn = None
        self._released = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order (root first), iterative to survive deep graphs."""
    seen: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        if node._released:
            raise GraphError("this computation history has already been backpropagated")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    post.reverse()
    return post


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    # python scalars stay 0-d so they broadcast against any shape
    return _make(np.asarray(x, dtype=dtype), (), None, "const")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._released = False
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return _make(ad / bd, (a, b), bw, "div")


def _check_broadcast(a: Tensor, b: Tensor, name: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


def square(x: Tensor) -> Tensor:
    xd = x.data

    def bw(g):
        return (2.0 * g * xd,)

    return _make(xd * xd, (x,), bw, "square")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)

    def bw(g):
        return (g / (2.0 * y),)

    return _make(y, (x,), bw, "sqrt")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _record(mask)

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split evaluation keeps exp() from overflowing for large |x|
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), bw, "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    if axis is None:
        y = x.data.sum().reshape((1,) * max(x.ndim, 4))

        def bw(g):
            return (np.broadcast_to(g.reshape(()), shape).copy(),)

        return _make(y, (x,), bw, "sum")

    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(y, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    y = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(old),)

    return _make(y, (x,), bw, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), bw, "transpose")


def index(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g) if _fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw, "index")


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} outside axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def global_avg_pool(x: Tensor) -> Tensor:
    _need4(x, "global_avg_pool")
    return mean(x, axis=(2, 3), keepdims=True)


def channel_mean(x: Tensor) -> Tensor:
    _need4(x, "channel_mean")
    return mean(x, axis=1, keepdims=True)


def channel_max(x: Tensor) -> Tensor:
    """Per-pixel max over channels; gradient goes to the lowest-index argmax."""
    _need4(x, "channel_max")
    arg = x.data.argmax(axis=1)[:, None]
    _record(arg)
    y = np.take_along_axis(x.data, arg, axis=1)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, arg, g, axis=1)
        return (out,)

    return _make(y, (x,), bw, "channel_max")


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2; ties route gradient to the lowest flat index."""
    _need4(x, "max_pool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: H={h}, W={w} must both be even")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)[..., None]
    _record(arg)
    y = np.take_along_axis(win, arg, axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg, g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(y, (x,), bw, "max_pool2")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def _need4(x: Tensor, name: str):
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (N,C,H,W) input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(C, Hp, Wp) -> (C*kh*kw, ho*wo), rows ordered (c, i, j)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _need4(x, "conv2d")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has C={c} channels but weight expects Cin={ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != (Cout={co},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    xd, wd = x.data, weight.data
    w2 = wd.reshape(co, ci * kh * kw)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    if pointwise:
        y = np.matmul(w2, xd.reshape(n, c, h * w))
    else:
        xp = _pad(xd, padding)
        y = np.empty((n, co, ho * wo), dtype=xd.dtype)
        for i in range(n):
            np.matmul(w2, _im2col(xp[i], kh, kw, stride, ho, wo), out=y[i])
    if bias is not None:
        y += bias.data[None, :, None]
    y = y.reshape(n, co, ho, wo)

    def bw(g):
        g2 = g.reshape(n, co, ho * wo)
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if pointwise:
            xf = xd.reshape(n, c, h * w)
            if weight.requires_grad:
                gw = np.einsum("nol,ncl->oc", g2, xf, optimize=True).reshape(wd.shape)
            if x.requires_grad:
                gx = np.matmul(w2.T, g2).reshape(xd.shape)
            return gx, gw, gb
        xp = _pad(xd, padding)
        gw2 = np.zeros_like(w2) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(n):
            if gw2 is not None:
                gw2 += g2[i] @ _im2col(xp[i], kh, kw, stride, ho, wo).T
            if gxp is not None:
                gcol = (w2.T @ g2[i]).reshape(c, kh, kw, ho, wo)
                for a in range(kh):
                    for b in range(kw):
                        gxp[i, :, a : a + (ho - 1) * stride + 1 : stride, b : b + (wo - 1) * stride + 1 : stride] += gcol[:, a, b]
        if gxp is not None:
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if gw2 is not None:
            gw = gw2.reshape(wd.shape)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, bw, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Per-channel spatial convolution, weight shape (C, 1, k, k)."""
    _need4(x, "depthwise_conv2d")
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: weight {weight.shape} does not match C={c} (expected ({c},1,k,k))")
    _, _, kh, kw = weight.shape
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    xp = _pad(x.data, padding)
    wd = weight.data[:, 0]
    y = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            y += xp[:, :, a : a + ho, b : b + wo] * wd[None, :, a, b, None, None]
    if bias is not None:
        y += bias.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a : a + ho, b : b + wo] += g * wd[None, :, a, b, None, None]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for a in range(kh):
                for b in range(kw):
                    gw[:, 0, a, b] = (g * xp[:, :, a : a + ho, b : b + wo]).sum(axis=(0, 2, 3))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, bw, "depthwise_conv2d")


# ---------------------------------------------------------------------------
# normalization and resampling
# ---------------------------------------------------------------------------

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """BatchNorm over (N, H, W). Running statistics are updated in place in training mode."""
    _need4(x, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batchnorm2d: per-channel tensors must have shape ({c},)")
    if eps <= 0:
        raise ValueError("batchnorm2d: epsilon must be positive")
    m = n * h * w
    xd = x.data
    if training:
        if m == 1:
            raise ShapeError("batchnorm2d: N*H*W == 1 in training mode, variance is undefined")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data[None, :, None, None]
    y = xhat * gd + beta.data[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            if training:
                gx = (gd * inv[None, :, None, None] / m) * (
                    m * g - gb[None, :, None, None] - xhat * gg[None, :, None, None])
            else:
                gx = g * gd * inv[None, :, None, None]
        return gx, gg, gb

    return _make(y.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "batchnorm2d")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r); out[n,c,h*r+i,w*r+j] = in[n, c*r*r+i*r+j, h, w]."""
    _need4(x, "pixel_shuffle")
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: C={c} not divisible by r^2={r * r}")
    co = c // (r * r)
    y = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def bw(g):
        return (g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w),)

    return _make(y, (x,), bw, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    _need4(x, "pixel_unshuffle")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: H={h}, W={w} not divisible by r={r}")
    ho, wo = h // r, w // r
    y = x.data.reshape(n, c, ho, r, wo, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, ho, wo)

    def bw(g):
        return (g.reshape(n, c, r, r, ho, wo).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w),)

    return _make(y, (x,), bw, "pixel_unshuffle")


def nearest_up(x: Tensor, factor: int) -> Tensor:
    """Integer-factor nearest upsampling (pixel replication)."""
    _need4(x, "nearest_up")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(y, (x,), bw, "nearest_up")


def nearest_down(x: Tensor, factor: int) -> Tensor:
    """Integer-factor nearest downsampling: top-left sample of each block."""
    _need4(x, "nearest_down")
    if factor == 1:
        return x
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ShapeError(f"nearest_down: H={x.shape[2]}, W={x.shape[3]} not divisible by {factor}")
    return index(x, (slice(None), slice(None), slice(None, None, factor), slice(None, None, factor)))
