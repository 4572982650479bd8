"""Dense float64 tensors with a define-by-run gradient tape.

A :class:`Tape` is activated with a ``with`` block. Inside it, every op whose
inputs include a tensor recorded on that tape appends a node holding the
vector-Jacobian closure of the op. Tensors not on the active tape are treated
as constants, so discrete decisions (pair mining, channel masks, dropout
masks) enter the graph as plain arrays and receive no gradient.

Example
-------
>>> with Tape() as tape:
...     x = tape.watch(Tensor([1.0, 2.0]))
...     loss = sum_(x * x)
>>> backward(loss, tape)[x.node_id].data
array([2., 4.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "finite_diff_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "take",
    "conv2d",
    "relu",
    "global_avg_pool",
    "l2_normalize",
    "softmax_rows",
    "log",
    "clamp_min",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Immutable float64 array, optionally linked to a node on a tape."""

    __slots__ = ("data", "node_id", "_tape")

    def __init__(self, data, node_id: Optional[int] = None, tape: Optional["Tape"] = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.node_id = node_id
        self._tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node_id={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    op: str
    inputs: tuple
    shape: tuple
    vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]


@dataclass
class Tape:
    """Ordered record of executed ops; confined to the thread that opened it."""

    nodes: list = field(default_factory=list)
    gradients: dict = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def watch(self, t) -> Tensor:
        """Record ``t`` as a leaf and return the tape-linked copy."""
        t = _as_tensor(t)
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), t.shape, None))
        out = Tensor.__new__(Tensor)
        out.data, out.node_id, out._tape = t.data, nid, self
        return out


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _active() -> Optional[Tape]:
    s = _stack()
    return s[-1] if s else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = _active()
    linked = tuple(t.node_id if (t._tape is tape and tape is not None) else None for t in inputs)
    res = Tensor.__new__(Tensor)
    out = np.asarray(out, dtype=np.float64)
    out.flags.writeable = False
    res.data = out
    if tape is None or all(n is None for n in linked):
        res.node_id, res._tape = None, None
        return res
    nid = len(tape.nodes)
    tape.nodes.append(_Node(op, linked, out.shape, vjp))
    res.node_id, res._tape = nid, tape
    return res


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        "mul", ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def relu(x) -> Tensor:
    """Elementwise ``max(x, 0)``; the subgradient at exactly 0 is 0."""
    x = _as_tensor(x)
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


def clamp_min(x, lo: float) -> Tensor:
    """``max(x, lo)``; gradient passes only where ``x > lo``."""
    x = _as_tensor(x)
    keep = x.data > lo
    return _record("clamp_min", np.where(keep, x.data, lo), (x,), lambda g: (g * keep,))


# ------------------------------------------------------------------ reductions


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# --------------------------------------------------------------- shape moves


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    inv = np.argsort(axes)
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def take(x, index, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _record("take", np.take(x.data, idx, axis=axis), (x,), vjp)


# ------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """2-D matrix product; ``dA = dC Bᵀ``, ``dB = Aᵀ dC``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation.

    Parameters
    ----------
    x : Tensor
        ``[h, w, c_in]`` or batched ``[B, h, w, c_in]``.
    kernels : Tensor
        ``[k, k, c_in, c_out]``.
    stride, padding : int

    Returns
    -------
    Tensor
        ``[h', w', c_out]`` (or batched) with ``h' = (h + 2p - k) // stride + 1``.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if stride < 1 or padding < 0:
        raise ValueError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    kd = kernels.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(f"conv2d expects [h,w,c] input and [k,k,cin,cout] kernels, got {x.shape}, {kernels.shape}")
    kh, kw, cin, cout = kd.shape
    B, h, w, c = xd.shape
    if c != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    # windows: [B, ho, wo, cin, kh, kw]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * ho * wo, kh * kw * cin)
    out = (cols @ kd.reshape(kh * kw * cin, cout)).reshape(B, ho, wo, cout)

    def vjp(g):
        g4 = g[None] if unbatched else g
        g2 = g4.reshape(B * ho * wo, cout)
        dk = (cols.T @ g2).reshape(kh, kw, cin, cout)
        dcols = (g2 @ kd.reshape(kh * kw * cin, cout).T).reshape(B, ho, wo, kh, kw, cin)
        dxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, padding:padding + h, padding:padding + w, :] if padding else dxp
        return (dx[0] if unbatched else dx, dk)

    return _record("conv2d", out[0] if unbatched else out, (x, kernels), vjp)


def global_avg_pool(m) -> Tensor:
    """Per-channel spatial mean: ``[h,w,c] -> [c]`` or ``[B,h,w,c] -> [B,c]``."""
    m = _as_tensor(m)
    if m.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool expects [h,w,c] or [B,h,w,c], got {m.shape}")
    return mean(m, axis=(m.ndim - 3, m.ndim - 2))


def l2_normalize(v, epsilon: float = 1e-12, axis: int = -1) -> Tensor:
    """``v / max(||v||_2, epsilon)`` along ``axis``."""
    v = _as_tensor(v)
    vd = v.data
    norm = np.sqrt(np.sum(vd * vd, axis=axis, keepdims=True))
    denom = np.maximum(norm, epsilon)
    out = vd / denom
    live = norm >= epsilon

    def vjp(g):
        proj = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(live, (g - out * proj) / denom, g / denom),)

    return _record("l2_normalize", out, (v,), vjp)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _record("softmax", out, (x,), lambda g: (out * (g - np.sum(g * out, axis=-1, keepdims=True)),))


# -------------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> dict:
    """Reverse-mode accumulation over ``tape``.

    Returns a map ``{node_id: Tensor}`` covering every node on the tape; nodes
    the loss does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape or loss.node_id is None:
        raise ValueError("loss is not recorded on this tape")
    grads: dict = {loss.node_id: np.ones(loss.shape)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        node = tape.nodes[nid]
        if g is None or node.vjp is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp is None or gi is None:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    result = {}
    for nid, node in enumerate(tape.nodes):
        g = grads.get(nid)
        result[nid] = Tensor(g if g is not None else np.zeros(node.shape))
    tape.gradients = result
    return result


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    x = _as_tensor(x)
    with Tape() as tape:
        xw = tape.watch(x)
        loss = f(xw)
    if loss.node_id is None:
        analytic = np.zeros(x.shape)
    else:
        analytic = backward(loss, tape)[xw.node_id].data
    base = x.numpy()
    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(Tensor(base)).item()
        flat[i] = old - h
        fm = f(Tensor(base)).item()
        flat[i] = old
        numeric = (fp - fm) / (2 * h)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
