"""Central-difference gradient verification for autodiff ops."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericError
from .tensor import Tensor


def finite_diff_check(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Compare autodiff and central-difference gradients of ``fn`` at ``x``.

    ``fn`` must be a pure tensor -> scalar map. Returns the maximum
    elementwise relative error with denominator max(|a|, |b|, 1e-8).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = fn(probe)
    if out.data.size != 1:
        raise NumericError("finite_diff_check requires a scalar-valued function")
    out.backward()
    auto = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.copy().reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(Tensor(flat.reshape(x.data.shape))).item()
        flat[i] = orig - h
        down = fn(Tensor(flat.reshape(x.data.shape))).item()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("non-finite function value during finite differencing")
        numeric.reshape(-1)[i] = (up - down) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(auto), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(auto - numeric) / denom))
