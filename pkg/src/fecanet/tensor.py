"""Dense tensors with reverse-mode gradients.

A :class:`Tensor` wraps a contiguous numpy array (float32 unless a
:func:`precision` context says otherwise). Every op below records a backward
closure when any input requires a gradient; ``loss.backward()`` walks the
recorded graph in reverse topological order.

Reductions, matmul, convolution and interpolation accumulate in float64 and
cast back to the storage dtype.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar("fecanet_dtype", default=np.float32)
_GRAD: contextvars.ContextVar[bool] = contextvars.ContextVar("fecanet_grad", default=True)
_MACS: contextvars.ContextVar["MacCounter | None"] = contextvars.ContextVar("fecanet_macs", default=None)
_KINKS: contextvars.ContextVar["list | None"] = contextvars.ContextVar("fecanet_kinks", default=None)

ACC = np.float64


def default_dtype() -> type:
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly produced tensors."""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _GRAD.set(False)
    try:
        yield
    finally:
        _GRAD.reset(token)


class MacCounter:
    """Counts multiply-accumulates issued by the convolution kernels."""

    def __init__(self) -> None:
        self.macs = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.macs += n
        self.by_op[op] = self.by_op.get(op, 0) + n


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    token = _MACS.set(counter)
    try:
        yield counter
    finally:
        _MACS.reset(token)


def _count(op: str, n: int) -> None:
    counter = _MACS.get()
    if counter is not None:
        counter.add(op, int(n))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _c_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}{rg})"

    # -- graph ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.size != 1:
                raise ContractError(f"backward() needs a scalar, got dims {self.dims}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.astype(node.data.dtype) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

    # -- operators -----------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

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

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got dims {t.dims}")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _c_array(data) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to shape (1,)
    a = np.asarray(data, dtype=default_dtype())
    return a if a.flags.c_contiguous else a.copy()


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _c_array(data)
    out.grad = None
    out.name = None
    track = _GRAD.get() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _result(y, (x,), lambda g: (g * 0.5 / np.where(y > 0, y, np.inf),))


@contextlib.contextmanager
def record_kinks():
    """Collect the active/inactive pattern of every piecewise-linear op evaluated inside."""
    log: list[np.ndarray] = []
    token = _KINKS.set(log)
    try:
        yield log
    finally:
        _KINKS.reset(token)


def _note_kink(mask: np.ndarray) -> None:
    log = _KINKS.get()
    if log is not None:
        log.append(mask)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_kink(mask)
    return _result(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data > floor
    _note_kink(mask)
    return _result(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data.astype(ACC)
    y = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))), np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis`` with the max subtracted first."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    xd = x.data.astype(ACC)
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


# -- reductions and structure ---------------------------------------------
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.astype(ACC).sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(y, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = math.prod(x.shape[a] for a in axes)
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], (x,), backward)


def zero_pad(a: np.ndarray, widths, dtype=None) -> np.ndarray:
    """np.pad with zeros, minus its per-call overhead."""
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    out = np.zeros(tuple(n + lo + hi for n, (lo, hi) in zip(a.shape, widths)), dtype=dtype or a.dtype)
    out[tuple(slice(lo, lo + n) for n, (lo, _) in zip(a.shape, widths))] = a
    return out


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    region = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))
    return _result(zero_pad(x.data, widths), (x,), lambda g: (g[region],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.dims} and {b.dims}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.dims} x {b.dims}")
    a64, b64 = a.data.astype(ACC), b.data.astype(ACC)
    return _result(a64 @ b64, (a, b), lambda g: (g @ b64.T, a64.T @ g))


# -- spatial ops ----------------------------------------------------------
def conv2d_nchw(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Batched 2D convolution, x [B, Cin, H, W], w [Cout, Cin, kh, kw], zero padding."""
    B, C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels, weights expect {Ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    xp = zero_pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), ACC)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.astype(ACC).reshape(Co, C * kh * kw)
    y = (cols @ wmat.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    _count("conv2d", B * Co * Ho * Wo * Ci * kh * kw)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[..., i, j]
        return gxp[:, :, pad:pad + H, pad:pad + W], gw

    return _result(y, (x, w), backward)


def conv2d(x: Tensor, weights: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution of a single feature map [C, H, W]."""
    if x.ndim != 3 or weights.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] and [Cout,Cin,kh,kw], got {x.dims}, {weights.dims}")
    y = conv2d_nchw(reshape(x, (1,) + x.shape), weights, stride, pad)
    return reshape(y, y.shape[1:])


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] bilinear weights with half-pixel centres."""
    m = np.zeros((n_out, n_in), dtype=ACC)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (any leading dims)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return x
    rh, rw = interp_matrix(H, out_h), interp_matrix(W, out_w)
    y = rh @ x.data.astype(ACC) @ rw.T
    return _result(y, (x,), lambda g: (rh.T @ g @ rw,))


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Upsample a feature map [C, H, W] to [C, out_h, out_w]."""
    if x.ndim != 3:
        raise ShapeError(f"upsample_bilinear expects [C,H,W], got {x.dims}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    if out_h < x.shape[1] or out_w < x.shape[2]:
        raise ShapeError(f"upsample target {out_h}x{out_w} smaller than input {x.shape[1]}x{x.shape[2]}")
    return resize_bilinear(x, out_h, out_w)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool expects [C,H,W], got {x.dims}")
    return mean(x, axis=(1, 2))


def l2_normalize(x: Tensor, axis: int, eps: float = 1e-8) -> Tensor:
    norm = sqrt(sum_(mul(x, x), axis=axis, keepdims=True))
    return div(x, add(norm, eps))


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalisation of x [C, ...] with per-channel affine parameters."""
    C = x.shape[0]
    if C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible into {groups} groups")
    rest = x.shape[1:]
    xg = reshape(x, (groups, -1))
    mu = mean(xg, axis=1, keepdims=True)
    centred = sub(xg, mu)
    var = mean(mul(centred, centred), axis=1, keepdims=True)
    normed = reshape(div(centred, sqrt(add(var, eps))), x.shape)
    bshape = (C,) + (1,) * len(rest)
    return add(mul(normed, reshape(gamma, bshape)), reshape(beta, bshape))


# -- parameters -------------------------------------------------------------
class ParamSet(dict):
    """Named trainable tensors; iteration follows insertion order."""

    def add(self, name: str, value) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in self.items()}

    def prefixed(self, prefix: str) -> "ParamSet":
        out = ParamSet()
        for k, p in self.items():
            if k.startswith(prefix):
                out[k] = p
        return out

    def cast(self, dtype) -> "ParamSet":
        """Copy with every parameter stored as ``dtype``."""
        out = ParamSet()
        with precision(dtype):
            for k, p in self.items():
                out.add(k, Tensor(p.data))
        return out

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.items()}

    def num_scalars(self) -> int:
        return sum(p.size for p in self.values())


def merge(*sets: Iterable[ParamSet]) -> ParamSet:
    out = ParamSet()
    for s in sets:
        for k, p in s.items():
            if k in out:
                raise KeyError(f"duplicate parameter name {k!r}")
            out[k] = p
    return out


def grad_eval(loss_fn: Callable[[ParamSet], Tensor], params: ParamSet) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to every parameter in ``params``."""
    params.zero_grad()
    loss = loss_fn(params)
    if not isinstance(loss, Tensor) or loss.size != 1:
        dims = loss.dims if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"loss_fn must return a scalar Tensor, got {dims}")
    loss.backward()
    return {k: g.copy() for k, g in params.grads().items()}


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
