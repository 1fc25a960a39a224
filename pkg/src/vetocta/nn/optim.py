"""Adam with bias correction; state lives on each :class:`Parameter`."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


class MissingGradientError(RuntimeError):
    pass


def adam_step(params, lr: float = 1e-4, beta1: float = 0.8, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update over ``params``. Gradients are left in place for the caller to zero."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise MissingGradientError(f"parameter {p.name!r} has no gradient")
    for p in params:
        g = p.grad
        p.t += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.t)
        v_hat = p.v / (1.0 - beta2 ** p.t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


__all__ = ["MissingGradientError", "Parameter", "adam_step", "zero_grad"]
