"""Dense float tensors with define-by-run reverse-mode autodiff.

Every differentiable op records a node carrying a monotonically increasing
sequence number. ``Tensor.backward`` collects the nodes reachable from the
loss and replays them in strictly descending sequence order, i.e. exact
reverse execution order. Nodes are released once replayed, so a graph can be
back-propagated only once; run the forward pass again to get a fresh tape.

Production arithmetic is float32. ``UGNN_FLOAT64=1`` at import time, or the
:func:`precision` context manager, switches newly created tensors to float64
(used by the gradient-check suite).
"""
from __future__ import annotations

import itertools
import os
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import kernels
from .errors import BackwardError, ConfigError, NumericalError, ShapeError

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = np.float64 if os.environ.get("UGNN_FLOAT64", "") not in ("", "0") else np.float32
_grad_enabled = True
_debug = os.environ.get("UGNN_DEBUG", "") not in ("", "0")
_seq = itertools.count()


def get_dtype():
    return _dtype


def set_precision(name: str) -> None:
    global _dtype
    try:
        _dtype = _PRECISIONS[name]
    except KeyError:
        raise ConfigError(f"precision must be one of {sorted(_PRECISIONS)}, got {name!r}") from None


@contextmanager
def precision(name: str):
    """Temporarily switch the default dtype (``"float32"`` or ``"float64"``)."""
    old = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = old


@contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def set_debug(flag: bool) -> None:
    """Enable finite-value assertions after every kernel forward."""
    global _debug
    _debug = bool(flag)


def _check_finite(name, arr):
    if _debug and not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name}: non-finite values in forward output")


class _Node:
    __slots__ = ("seq", "op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.seq = next(_seq)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """N-d float array with optional gradient tracking.

    ``grad`` is populated on leaf tensors (those created with
    ``requires_grad=True``) and accumulates across backward calls until
    :meth:`zero_grad`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mul(tsum(self), 1.0 / self.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    # -- autodiff -------------------------------------------------------
    def backward(self) -> None:
        backward(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def backward(loss: Tensor, trace: Optional[list] = None) -> None:
    """Populate ``.grad`` on every leaf the scalar ``loss`` depends on.

    If ``trace`` is a list, ``(seq, op)`` pairs are appended in replay order.
    """
    if loss.size != 1:
        raise BackwardError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
    node = loss._node
    if node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise BackwardError("loss does not depend on any tensor that requires grad")
    if node.backward_fn is None:
        raise BackwardError("graph already back-propagated; rerun the forward pass first")

    nodes = {}
    stack = [node]
    while stack:
        n = stack.pop()
        if id(n) in nodes:
            continue
        if n.backward_fn is None:
            raise BackwardError(f"node '{n.op}' was consumed by an earlier backward pass")
        nodes[id(n)] = n
        for p in n.parents:
            if p._node is not None:
                stack.append(p._node)
    tape = sorted(nodes.values(), key=lambda n: n.seq, reverse=True)

    grads = {id(node): np.ones_like(loss.data)}
    for n in tape:
        g = grads.pop(id(n), None)
        fn, n.backward_fn = n.backward_fn, None
        if trace is not None:
            trace.append((n.seq, n.op))
        if g is None:
            continue
        parent_grads = fn(g)
        for p, pg in zip(n.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._node is not None:
                key = id(p._node)
                grads[key] = grads[key] + pg if key in grads else pg
            else:
                pg = np.asarray(pg, dtype=p.data.dtype).reshape(p.shape)
                p.grad = pg.copy() if p.grad is None else p.grad + pg


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------
def add(a: TensorLike, b: TensorLike) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    out = (ad * bd).astype(a.dtype, copy=False)
    return record("mul", out, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading dims (b may be 2-D)."""
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims differ, {list(ad.shape)} @ {list(bd.shape)}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record("matmul", ad @ bd, (a, b), bw)


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record("sum", out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    x = np.maximum(a.data, floor) if floor > 0 else a.data
    live = a.data >= floor
    return record("log", np.log(x), (a,), lambda g: (np.where(live, g / x, 0.0).astype(x.dtype),))


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); gradient is 1 where x > 0 and 0 elsewhere."""
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype, copy=False)
    _check_finite("relu", out)
    return record("relu", out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# neural kernels
# ---------------------------------------------------------------------------
@dataclass
class ConvParams:
    """Kernel ``[out_ch, in_ch, kh, kw]`` plus bias ``[out_ch]``."""

    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be rank 4, got shape {list(self.kernel.shape)}")
        o, _, kh, kw = self.kernel.shape
        if kh < 1 or kw < 1:
            raise ConfigError("kernel height and width must be >= 1")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ConfigError(f"padding must be >= 0, got {self.padding}")
        if self.bias.shape != (o,):
            raise ShapeError(f"bias shape {list(self.bias.shape)} does not match out_ch={o}")

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @property
    def in_channels(self):
        return self.kernel.shape[1]


def _as4d(x: Tensor, op: str):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected [C,H,W] or [N,C,H,W], got shape {list(x.shape)}")


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    Spatial output is ``(H + 2p - kh) // s + 1`` (likewise for W). Accepts
    ``[C,H,W]`` or batched ``[N,C,H,W]`` input and returns the same rank.
    """
    x4, squeeze = _as4d(x, "conv2d")
    w, b = params.kernel, params.bias
    o, c_in, kh, kw = w.shape
    n, c, h, wd = x4.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c_in}")
    p, s = params.padding, params.stride
    if h + 2 * p < kh or wd + 2 * p < kw:
        raise ShapeError(f"conv2d: padded input {h + 2 * p}x{wd + 2 * p} smaller than kernel {kh}x{kw}")
    xp = np.pad(x4, ((0, 0), (0, 0), (p, p), (p, p))) if p else x4
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    cols = kernels.im2col(xp, kh, kw, s)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    out += b.data[None, :, None]
    out = out.reshape(n, o, ho, wo)
    _check_finite("conv2d", out)

    def bw(g):
        g3 = g.reshape(n, o, ho * wo)
        gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3)
            gxp = kernels.col2im(gcols, xp.shape, kh, kw, s)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
            gx = gx[0] if squeeze else gx
        return gx, gw, gb

    return record("conv2d", out[0] if squeeze else out, (x, w, b), bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool; backward routes to the first maximum in row-major window order."""
    x4, squeeze = _as4d(x, "maxpool2")
    h, w = x4.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    out, arg = kernels.maxpool2_forward(x4)

    def bw(g):
        g4 = g[None] if squeeze else g
        gx = kernels.maxpool2_backward(np.ascontiguousarray(g4), arg)
        return (gx[0] if squeeze else gx,)

    return record("maxpool2", out[0] if squeeze else out, (x,), bw)


def conv_transpose2(x: Tensor, params: ConvParams) -> Tensor:
    """2x2 stride-2 transposed convolution (exact spatial doubling).

    The kernel is stored ``[out_ch, in_ch, 2, 2]`` like :func:`conv2d`;
    ``out[o, 2i+u, 2j+v] = sum_c x[c, i, j] * k[o, c, u, v] + bias[o]``.
    """
    w, b = params.kernel, params.bias
    if w.shape[2:] != (2, 2) or params.stride != 2 or params.padding != 0:
        raise ConfigError(
            f"conv_transpose2 needs a 2x2 kernel, stride 2, padding 0; got kernel "
            f"{w.shape[2]}x{w.shape[3]}, stride {params.stride}, padding {params.padding}")
    x4, squeeze = _as4d(x, "conv_transpose2")
    n, c, h, wd = x4.shape
    o = w.shape[0]
    if c != w.shape[1]:
        raise ShapeError(f"conv_transpose2: input has {c} channels, kernel expects {w.shape[1]}")
    # [O,U,V,N,H,W] -> [N,O,H,U,W,V]
    y = np.tensordot(w.data, x4, axes=([1], [1])).transpose(3, 0, 4, 1, 5, 2)
    out = np.ascontiguousarray(y).reshape(n, o, 2 * h, 2 * wd)
    out += b.data[None, :, None, None]
    _check_finite("conv_transpose2", out)

    def bw(g):
        g4 = g[None] if squeeze else g
        g6 = g4.reshape(n, o, h, 2, wd, 2)
        gx = np.tensordot(g6, w.data, axes=([1, 3, 5], [0, 2, 3])).transpose(0, 3, 1, 2) if x.requires_grad else None
        if gx is not None and squeeze:
            gx = gx[0]
        gw = np.tensordot(g6, x4, axes=([0, 2, 4], [0, 2, 3])).transpose(0, 3, 1, 2) if w.requires_grad else None
        gb = g4.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return record("conv_transpose2", out[0] if squeeze else out, (x, w, b), bw)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis of ``[C,H,W]`` / ``[N,C,H,W]`` (max-subtracted)."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"softmax_channels: expected rank 3 or 4, got {list(x.shape)}")
    ax = x.ndim - 3
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)
    _check_finite("softmax_channels", s)

    def bw(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return record("softmax_channels", s, (x,), bw)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------
def check_gradients(f: Callable[..., Tensor], point, eps: float = 1e-4,
                    coords: Optional[int] = None, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``point`` is a Tensor or a sequence of Tensors passed positionally to ``f``.
    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``coords`` limits the check to that many randomly chosen coordinates per
    tensor (all coordinates by default).
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    for p in points:
        p.requires_grad = True
        p.grad = None
    loss = f(*points)
    if loss._node is not None or loss.requires_grad:
        loss.backward()
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    with no_grad():
        for p in points:
            analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).astype(np.float64)
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            idx = np.arange(p.size)
            if coords is not None and coords < p.size:
                idx = rng.choice(p.size, size=coords, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(flat[i])
                fp = float(f(*points).data)
                flat[i] = orig - eps
                lo = float(flat[i])
                fm = float(f(*points).data)
                flat[i] = orig
                # divide by the step the dtype actually represents
                numeric = (fp - fm) / (hi - lo)
                err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
                worst = max(worst, err)
    return worst
