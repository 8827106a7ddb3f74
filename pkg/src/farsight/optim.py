"""Trainable parameters, global-norm clipping, and the grouped AdamW optimizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import StateError
from .tensor import Tensor


class Group(str, Enum):
    """Learning-rate group: backbone encoders vs freshly added modules."""

    BACKBONE = "backbone"
    NEW_MODULE = "new_module"


@dataclass
class Parameter:
    tensor: Tensor
    group: Group
    name: str
    trainable: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = self.trainable

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.tensor.requires_grad = flag


def clip_global_norm(params: Iterable[Parameter], max_norm: float = 5.0) -> float:
    """Scale all trainable gradients so their global L2 norm is <= max_norm.

    Returns the applied scale. A zero/absent global norm leaves gradients
    untouched (scale 1). Re-applying is a no-op: a 1e-12 relative slack on the
    threshold absorbs the rounding of the first rescale.
    """
    grads = [p.tensor.grad for p in params if p.trainable and p.tensor.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total <= max_norm * (1.0 + 1e-12) or total == 0.0:
        return 1.0
    scale = max_norm / total
    for g in grads:
        g *= scale
    return scale


@dataclass
class OptimizerState:
    """Moments, step counter and per-group learning rates for AdamW."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1.5e-4
    lr: dict[Group, float] = field(default_factory=lambda: {Group.BACKBONE: 1e-6, Group.NEW_MODULE: 1e-4})
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Decoupled-weight-decay adaptive optimizer with two LR groups.

    weight_decay=0 recovers plain Adam. Frozen parameters are never touched
    and hold no moment buffers.
    """

    def __init__(self, params: Sequence[Parameter], lr_backbone: float = 1e-6,
                 lr_new: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 1.5e-4):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise StateError("duplicate parameter names passed to optimizer")
        self.state = OptimizerState(beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
                                    lr={Group.BACKBONE: lr_backbone, Group.NEW_MODULE: lr_new})

    def set_lr(self, group: Group, lr: float) -> None:
        self.state.lr[group] = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self) -> None:
        st = self.state
        st.step_count += 1
        bc1 = 1.0 - st.beta1 ** st.step_count
        bc2 = 1.0 - st.beta2 ** st.step_count
        for p in self.params:
            if not p.trainable:
                continue
            g = p.tensor.grad
            if g is None:
                raise StateError(f"trainable parameter {p.name!r} has no gradient")
            m = st.m.get(p.name)
            if m is None:
                m = st.m[p.name] = np.zeros_like(p.tensor.data)
            v = st.v.get(p.name)
            if v is None:
                v = st.v[p.name] = np.zeros_like(p.tensor.data)
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            lr = st.lr[p.group]
            update = mhat / (np.sqrt(vhat) + st.eps)
            if st.weight_decay:
                update = update + st.weight_decay * p.tensor.data
            p.tensor.data = p.tensor.data - lr * update
