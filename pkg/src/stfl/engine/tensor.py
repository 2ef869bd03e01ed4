"""Reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. :func:`backward` walks a tape in
reverse recording order, so each node is visited exactly once.

Only a closed set of operations is provided: the ones that a U-Net and a
PatchGAN discriminator need.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from stfl.engine import kernels
from stfl.errors import ContractError, NumericFault, ShapeError

_local = threading.local()
_check_finite_enabled = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the per-op NaN/Inf check (on by default)."""
    global _check_finite_enabled
    _check_finite_enabled = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes are thread-local and may nest.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if _check_finite_enabled and not np.isfinite(data).all():
        raise NumericFault(f"{op}: non-finite output")
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.nodes.append(_Node(op, out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] | None = None):
    """Gradients of scalar ``loss`` w.r.t. ``params`` (or every leaf reached).

    Parameters that do not participate in ``loss`` receive zero gradients.
    Returns a list aligned with ``params`` when given, else a dict keyed by
    ``id(tensor)``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    if params is None:
        return grads
    return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record("mul", ad * bd, (a, b), bw)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = (x.data > 0).astype(x.dtype)
    scale *= 1 - slope
    scale += slope
    return _record("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and gives exactly 0.5 at 0
    return 0.5 * (1 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _record("tanh", t, (x,), lambda g: (g * (1 - t * t),))


# ---------------------------------------------------------------- structural

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def mean(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    n = x.data.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))
    out = x.data.mean(axis=axis, keepdims=axis is not None)

    def bw(g):
        return (np.broadcast_to(g / n, shape).astype(x.dtype),)

    return _record("mean", np.asarray(out), (x,), bw)


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding. ``w`` is (C_out, C_in, k, k)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d: input channels {c} vs weight {w.shape}")
    ho = kernels.output_extent(h, k, stride, padding)
    wo = kernels.output_extent(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{wd} too small for kernel {k}, padding {padding}")
    cols = kernels.im2col(x.data, k, stride, padding)
    w2 = w.data.reshape(co, -1)
    out = np.matmul(w2, cols).reshape(n, co, ho, wo)
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {b.shape}, expected {(co,)}")
        out += b.data.reshape(1, co, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)
    xshape = x.shape

    def bw(g):
        g2 = g.reshape(n, co, ho * wo)
        gx = kernels.col2im(np.matmul(w2.T, g2), xshape, k, stride, padding) if x.requires_grad else None
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record("conv2d", out, inputs, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input. ``w`` is (C_in, C_out, k, k)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    ci, co, k, k2 = w.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv_transpose2d: input channels {c} vs weight {w.shape}")
    if not 0 <= output_padding < stride:
        raise ShapeError(f"conv_transpose2d: output_padding {output_padding} must be < stride {stride}")
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (wd - 1) * stride - 2 * padding + k + output_padding
    w2 = w.data.reshape(ci, co * k * k)
    xf = x.data.reshape(n, ci, h * wd)
    out = kernels.col2im(np.matmul(w2.T, xf), (n, co, ho, wo), k, stride, padding)
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv_transpose2d: bias shape {b.shape}, expected {(co,)}")
        out += b.data.reshape(1, co, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gcols = kernels.im2col(np.ascontiguousarray(g), k, stride, padding)
        gx = np.matmul(w2, gcols).reshape(x.shape) if x.requires_grad else None
        gw = np.matmul(xf, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record("conv_transpose2d", out, inputs, bw)


def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                  eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes."""
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm: expected N,C,H,W input, got {x.shape}")
    c = x.shape[1]
    for p in (gamma, beta):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"instance_norm: affine shape {p.shape}, expected {(c,)}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat if gamma is None else xhat * gamma.data.reshape(1, c, 1, 1)
    if beta is not None:
        out = out + beta.data.reshape(1, c, 1, 1)
    inputs = [x] + [p for p in (gamma, beta) if p is not None]

    def bw(g):
        gxhat = g if gamma is None else g * gamma.data.reshape(1, c, 1, 1)
        gx = inv * (gxhat - gxhat.mean(axis=(2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(2, 3), keepdims=True))
        res = [gx]
        if gamma is not None:
            res.append((g * xhat).sum(axis=(0, 2, 3)))
        if beta is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return tuple(res)

    return _record("instance_norm", out, inputs, bw)


# ---------------------------------------------------------------- losses

def _loss_pair(op: str, pred: Tensor, target) -> tuple[Tensor, Tensor]:
    target = _as_tensor(target, pred)
    if target.data.size != 1 and target.shape != pred.shape:
        raise ShapeError(f"{op}: prediction {pred.shape} vs target {target.shape}")
    return pred, target


def bce_with_logits_loss(logits: Tensor, target) -> Tensor:
    logits, target = _loss_pair("bce_with_logits_loss", logits, target)
    z, t = logits.data, target.data
    val = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    n = z.size

    def bw(g):
        s = _sigmoid(z)
        gz = g * (s - t) / n
        gt = _unbroadcast(-g * z / n, t.shape) if target.requires_grad else None
        return gz.astype(z.dtype, copy=False), gt

    return _record("bce_with_logits_loss", np.asarray(val, dtype=z.dtype), (logits, target), bw)


def mse_loss(pred: Tensor, target) -> Tensor:
    pred, target = _loss_pair("mse_loss", pred, target)
    d = pred.data - target.data
    n = d.size

    def bw(g):
        gp = g * 2 * d / n
        return gp, _unbroadcast(-gp, target.shape) if target.requires_grad else None

    return _record("mse_loss", np.asarray((d * d).mean(), dtype=d.dtype), (pred, target), bw)


def l1_loss(pred: Tensor, target) -> Tensor:
    pred, target = _loss_pair("l1_loss", pred, target)
    d = pred.data - target.data
    n = d.size

    def bw(g):
        gp = g * np.sign(d) / n
        return gp, _unbroadcast(-gp, target.shape) if target.requires_grad else None

    return _record("l1_loss", np.asarray(np.abs(d).mean(), dtype=d.dtype), (pred, target), bw)
