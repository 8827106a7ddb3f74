"""Composable neural modules: linear maps, layer norm, MLP heads, attention."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .optim import Group, Parameter
from .tensor import Tensor


class Module:
    """Minimal parameter container; submodules are discovered by attribute scan."""

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for value in vars(self).values():
            if isinstance(value, Parameter):
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        out.extend(item.parameters())
            elif isinstance(value, dict):
                for item in value.values():
                    if isinstance(item, Module):
                        out.extend(item.parameters())
        return out

    def any_trainable(self) -> bool:
        return any(p.trainable for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.set_trainable(flag)


class Linear(Module):
    """Affine map over the last axis: x @ w + b."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 group: Group, name: str, std: float | None = None):
        if std is None:
            std = 1.0 / math.sqrt(d_in)
        self.w = Parameter(Tensor(rng.normal(0.0, std, (d_in, d_out))), group, f"{name}.w")
        self.b = Parameter(Tensor(np.zeros(d_out)), group, f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.w.tensor, self.b.tensor)


class LayerNorm(Module):
    def __init__(self, dim: int, group: Group, name: str, eps: float = 1e-5):
        self.gain = Parameter(Tensor(np.ones(dim)), group, f"{name}.gain")
        self.bias = Parameter(Tensor(np.zeros(dim)), group, f"{name}.bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain.tensor, self.bias.tensor, self.eps)


class MLPHead(Module):
    """Two-layer head dim -> dim//2 -> out with GELU and optional dropout."""

    def __init__(self, rng: np.random.Generator, dim: int, out: int, group: Group, name: str):
        hidden = max(dim // 2, 1)
        self.fc1 = Linear(rng, dim, hidden, group, f"{name}.fc1")
        self.fc2 = Linear(rng, hidden, out, group, f"{name}.fc2")

    def __call__(self, x: Tensor, dropout_rate: float = 0.0,
                 rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
        h = T.gelu(self.fc1(x))
        if training and dropout_rate > 0.0:
            h = T.dropout(h, dropout_rate, rng, training=True)
        return self.fc2(h)


class MultiheadAttention(Module):
    """Standard multi-head attention with learned Q/K/V/output projections.

    No residual or normalization here; callers add those where needed.
    ``shared_qk_gain`` initializes the query and key projections to the same
    identity-dominant matrix, which keeps self-attention local at init the way
    a well-trained backbone's is (plain random init gives near-uniform rows
    whose rollout carries no spatial information).
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, group: Group,
                 name: str, shared_qk_gain: float | None = None):
        if dim % heads != 0:
            raise ShapeError(f"attention dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        if shared_qk_gain is None:
            self.wq = Linear(rng, dim, dim, group, f"{name}.wq")
            self.wk = Linear(rng, dim, dim, group, f"{name}.wk")
        else:
            base = shared_qk_gain * np.eye(dim) + rng.normal(0.0, 0.02, (dim, dim))
            self.wq = Linear(rng, dim, dim, group, f"{name}.wq")
            self.wk = Linear(rng, dim, dim, group, f"{name}.wk")
            self.wq.w.tensor.data = base.copy()
            self.wk.w.tensor.data = base.copy()
        self.wv = Linear(rng, dim, dim, group, f"{name}.wv")
        self.wo = Linear(rng, dim, dim, group, f"{name}.wo")

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return T.transpose(T.reshape(x, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 retain: bool = False) -> tuple[Tensor, np.ndarray | None]:
        b, tq, _ = query.shape
        q = self._split(self.wq(query))
        k = self._split(self.wk(key))
        v = self._split(self.wv(value))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, tq, self.dim))
        out = self.wo(merged)
        weights = attn.data.copy() if retain else None
        return out, weights


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)); then x + mlp(ln(x))."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, mlp_ratio: float,
                 group: Group, name: str, shared_qk_gain: float | None = None):
        hidden = int(dim * mlp_ratio)
        self.ln1 = LayerNorm(dim, group, f"{name}.ln1")
        self.attn = MultiheadAttention(rng, dim, heads, group, f"{name}.attn",
                                       shared_qk_gain=shared_qk_gain)
        self.ln2 = LayerNorm(dim, group, f"{name}.ln2")
        self.fc1 = Linear(rng, dim, hidden, group, f"{name}.mlp.fc1")
        self.fc2 = Linear(rng, hidden, dim, group, f"{name}.mlp.fc2")

    def __call__(self, x: Tensor, retain: bool = False) -> tuple[Tensor, np.ndarray | None]:
        n = self.ln1(x)
        a, weights = self.attn(n, n, n, retain=retain)
        x = T.add(x, a)
        h = self.fc2(T.gelu(self.fc1(self.ln2(x))))
        return T.add(x, h), weights
