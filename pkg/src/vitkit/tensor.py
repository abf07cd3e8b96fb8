"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a float32/float64 numpy array. Every differentiable op
records its parents and a closure that maps the output gradient to parent
gradients; ``Tensor.backward`` replays the closures in reverse topological
order. Graph recording is skipped when no input requires a gradient or
inside ``no_grad()``.

Matmul and conv2d report their multiply-accumulate counts to any active
``count_macs()`` context, which is how the FLOP oracle instruments a forward.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

from .errors import DimensionError, DTypeError

DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_enabled = True
_mac_counters: list["MacCounter"] = []


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _record_macs(op: str, n: int) -> None:
    for c in _mac_counters:
        c.add(op, int(n))


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise DTypeError(f"unknown dtype {dtype!r}; expected 'f32' or 'f64'") from None
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise DTypeError(f"unsupported dtype {dt}")
    return dt


def dtype_name(dt) -> str:
    return "f32" if np.dtype(dt) == np.float32 else "f64"


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self._accumulate(np.asarray(grad, dtype=self.dtype))
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # release intermediate buffers; leaves keep their gradient
        for node in order:
            if node._parents:
                node.grad = None
                node._parents = ()
                node._backward = None

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_dtypes(op, *ts):
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise DTypeError(f"{op}: dtype mismatch {[dtype_name(t.dtype) for t in ts]}")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` is true, else from ``b``; values copied bit-for-bit."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    zero = np.zeros((), dtype=out.dtype)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, zero), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, zero, g), b.shape))

    return _make(out, (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), using erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        x._accumulate(g * (cdf + xd * pdf))

    return _make((xd * cdf).astype(xd.dtype, copy=False), (x,), backward)


# -- shape ops --------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(old)))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: x._accumulate(g.transpose(inv)))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: x._accumulate(_unbroadcast(g, old)))


def getitem(x: Tensor, idx) -> Tensor:
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(i, (np.ndarray, list)) for i in parts)

    def backward(g):
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        x._accumulate(full)

    return _make(x.data[idx], (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    _check_dtypes("concat", *tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# -- reductions -------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    s = tsum(x, axis, keepdims)
    n = x.size // max(s.size, 1)
    return mul(s, np.asarray(1.0 / n, dtype=x.dtype))


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_dtypes("matmul", a, b)
    out = np.matmul(a.data, b.data)
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    _record_macs("matmul", math.prod(out.shape[:-2]) * m * k * n)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias); weight stored as (in_features, out_features)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalization and softmax ----------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: last dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=red))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=red))
        if x.requires_grad:
            gh = g * gamma.data
            x._accumulate(inv * (gh - gh.mean(axis=-1, keepdims=True)
                                 - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gamma, beta), backward)


def batch_norm_2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                  running_var: np.ndarray, training: bool, momentum: float = 0.1,
                  eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization of a (b, c, h, w) tensor.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, torch convention). In eval mode only
    the running buffers are read.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm_2d expects (b, c, h, w), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise DimensionError(f"batch_norm_2d: {c} channels vs params {gamma.shape}")
    xd = x.data
    shp = (1, c, 1, 1)
    if training:
        axes = (0, 2, 3)
        n = xd.size // c
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var.reshape(c) * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(shp).astype(xd.dtype)
        xhat = (xd - running_mean.reshape(shp).astype(xd.dtype)) * inv
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def backward(g):
        axes = (0, 2, 3)
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gh = g * gamma.data.reshape(shp)
            if training:
                gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                            - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = gh * inv
            x._accumulate(gx)

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        x._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _make(y, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(len(labels)), labels))
    return neg(mean(picked))


def mse(pred: Tensor, target) -> Tensor:
    diff = add(pred, neg(as_tensor(target, pred.dtype)))
    return mean(mul(diff, diff))


# -- convolution ------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) of (b, cin, h, w) with (cout, cin, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    _check_dtypes("conv2d", x, weight)
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    s = stride
    oh, ow = (hp - kh) // s + 1, (wp - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((b, oh, ow, cin, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s].transpose(0, 2, 3, 1)
    cols2 = cols.reshape(b * oh * ow, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = (cols2 @ wmat.T).reshape(b, oh, ow, cout).transpose(0, 3, 1, 2)
    _record_macs("conv2d", b * oh * ow * cout * cin * kh * kw)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, cout)
        if weight.requires_grad:
            weight._accumulate((gm.T @ cols2).reshape(weight.shape))
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(b, oh, ow, cin, kh, kw)
            gxp = np.zeros((b, cin, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            x._accumulate(gxp[:, :, padding:padding + h, padding:padding + w])

    y = _make(np.ascontiguousarray(out), (x, weight), backward)
    if bias is not None:
        y = add(y, reshape(bias, (1, cout, 1, 1)))
    return y
