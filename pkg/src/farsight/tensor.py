"""Dense tensors with reverse-mode automatic differentiation.

Values are float64 numpy arrays. Every operation validates that its result is
finite and records a backward closure on a tape; ``backward`` on a scalar
replays the tape in reverse topological order. Tensors are treated as
immutable once produced by an op.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import LabelError, NumericError, ShapeError

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    # cheap reduction first (inf/nan propagate into the sum); the sum itself
    # can overflow on huge finite data, so confirm with a full scan on alarm
    with np.errstate(over="ignore", invalid="ignore"):
        if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- construction of op results ------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._backward = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
        else:
            out.requires_grad = False
            out._parents = ()
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)  # materializes views too
        else:
            self.grad += grad

    # -- basic properties ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar through the recorded tape."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        other = _wrap(other)
        return mul(self, power(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic -------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor._from_op(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw():
            a._accumulate(_unbroadcast(out.grad, a.shape))
            b._accumulate(_unbroadcast(out.grad, b.shape))
        out._backward = _bw
    return out


def mul(a: Tensor, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor._from_op(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw():
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))
        out._backward = _bw
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    a = _wrap(a)
    out = Tensor._from_op(a.data ** exponent, (a,), "power")
    if out.requires_grad:
        def _bw():
            a._accumulate(_unbroadcast(out.grad * exponent * a.data ** (exponent - 1.0), a.shape))
        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch shapes incompatible: {a.shape} vs {b.shape}") from exc
    out = Tensor._from_op(data, (a, b), "matmul")
    if out.requires_grad:
        def _bw():
            ga = np.matmul(out.grad, b.data.swapaxes(-1, -2))
            gb = np.matmul(a.data.swapaxes(-1, -2), out.grad)
            a._accumulate(_unbroadcast(ga, a.shape))
            b._accumulate(_unbroadcast(gb, b.shape))
        out._backward = _bw
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused ``x @ w + b`` for 2-D weight [d_in,d_out] and bias [d_out]."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine inner extents differ: {x.shape} vs {w.shape}")
    out = Tensor._from_op(np.matmul(x.data, w.data) + b.data, (x, w, b), "affine")
    if out.requires_grad:
        d_in, d_out = w.shape
        def _bw():
            g = out.grad
            x._accumulate(np.matmul(g, w.data.T))
            g2 = g.reshape(-1, d_out)
            w._accumulate(x.data.reshape(-1, d_in).T @ g2)
            b._accumulate(g2.sum(axis=0))
        out._backward = _bw
    return out


# -- shape manipulation ----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor._from_op(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad.reshape(a.shape))
        out._backward = _bw
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    out = Tensor._from_op(a.data.transpose(axes), (a,), "transpose")
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))
        def _bw():
            a._accumulate(out.grad.transpose(inverse))
        out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def _bw():
            for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
                t._accumulate(g)
        out._backward = _bw
    return out


# -- reductions -------------------------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))
        out._backward = _bw
    return out


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def reduce_max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.max(axis=axis, keepdims=keepdims)
    out = Tensor._from_op(data, (a,), "max")
    if out.requires_grad:
        def _bw():
            expanded = data if keepdims else np.expand_dims(data, axis)
            g = out.grad if keepdims else np.expand_dims(out.grad, axis)
            mask = (a.data == expanded).astype(np.float64)
            mask /= mask.sum(axis=axis, keepdims=True)
            a._accumulate(mask * g)
        out._backward = _bw
    return out


# -- nonlinearities ----------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor._from_op(np.maximum(a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * (a.data > 0.0))
        out._backward = _bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    # evaluate on the negative side to avoid overflow in exp
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor._from_op(data, (a,), "sigmoid")
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * data * (1.0 - data))
        out._backward = _bw
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    a = _wrap(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor._from_op(x * cdf, (a,), "gelu")
    if out.requires_grad:
        def _bw():
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            a._accumulate(out.grad * (cdf + x * pdf))
        out._backward = _bw
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; subtracts the axis max before exp."""
    a = _wrap(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._from_op(data, (a,), "softmax")
    if out.requires_grad:
        def _bw():
            g = out.grad
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - dot))
        out._backward = _bw
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    n = a.shape[-1] if a.ndim else 0
    if n == 0:
        raise ShapeError("layer_norm over a zero-extent axis")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({n},), got {gain.shape}/{bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = Tensor._from_op(xhat * gain.data + bias.data, (a, gain, bias), "layer_norm")
    if out.requires_grad:
        def _bw():
            g = out.grad
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
            bias._accumulate(_unbroadcast(g, bias.shape))
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (gx - m1 - xhat * m2))
        out._backward = _bw
    return out


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; mask drawn from the supplied generator."""
    a = _wrap(a)
    if not training or rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ShapeError("dropout rate must be < 1")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    out = Tensor._from_op(a.data * mask, (a,), "dropout")
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * mask)
        out._backward = _bw
    return out


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    weight = _wrap(weight)
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor._from_op(weight.data[ids], (weight,), "embedding")
    if out.requires_grad:
        def _bw():
            if weight.grad is None:
                weight.grad = np.zeros_like(weight.data)
            np.add.at(weight.grad, ids, out.grad)
        out._backward = _bw
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 0) -> Tensor:
    """2-D convolution, stride 1. x:[B,C,H,W], w:[O,C,k,k], b:[O]."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape}/{w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: {x.shape} vs {w.shape}")
    k = w.shape[-1]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    data = np.einsum("bcxyij,ocij->boxy", windows, w.data) + b.data[:, None, None]
    out = Tensor._from_op(data, (x, w, b), "conv2d")
    if out.requires_grad:
        def _bw():
            g = out.grad
            w._accumulate(np.einsum("boxy,bcxyij->ocij", g, windows))
            b._accumulate(g.sum(axis=(0, 2, 3)))
            gxp = np.zeros_like(xp)
            oh, ow = g.shape[2], g.shape[3]
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + oh, j:j + ow] += np.einsum("boxy,oc->bcxy", g, w.data[:, :, i, j])
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(gxp)
        out._backward = _bw
    return out


def cross_entropy_ignore(logits: Tensor, labels, ignore_index: int = -100) -> Tensor:
    """Mean per-sample negative log-likelihood over non-ignored rows.

    logits: [B,K]; labels: length-B integers in {0..K-1} or ``ignore_index``.
    An all-ignored batch yields loss 0 with a zero gradient.
    """
    logits = _wrap(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B,K] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels length {labels.shape} does not match batch {logits.shape[0]}")
    k = logits.shape[1]
    valid = labels != ignore_index
    out_of_range = (labels[valid] < 0) | (labels[valid] >= k)
    if np.any(out_of_range):
        bad = int(labels[valid][out_of_range][0])
        raise LabelError(f"label {bad} outside [0,{k}) and not the ignore index")
    n_valid = int(valid.sum())

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    if n_valid == 0:
        loss = 0.0
    else:
        loss = -logp[valid, labels[valid]].sum() / n_valid
    out = Tensor._from_op(np.asarray(loss), (logits,), "cross_entropy")
    if out.requires_grad:
        probs = np.exp(logp)
        def _bw():
            g = np.zeros_like(logits.data)
            if n_valid:
                rows = np.nonzero(valid)[0]
                g[rows] = probs[rows]
                g[rows, labels[rows]] -= 1.0
                g /= n_valid
            logits._accumulate(g * out.grad)
        out._backward = _bw
    return out


def stack_tokens(tensors: Sequence[Tensor]) -> Tensor:
    """Stack [B,d] tensors into a [B,T,d] sequence."""
    expanded = [reshape(t, (t.shape[0], 1, t.shape[1])) for t in tensors]
    return concat(expanded, axis=1)
