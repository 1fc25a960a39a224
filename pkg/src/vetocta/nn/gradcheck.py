"""Central finite-difference gradient checking for scalar-valued functions."""

from __future__ import annotations

import numpy as np


def numeric_grad(fn, arrays, index, step=1e-5):
    """Central-difference gradient of ``fn(*arrays)`` w.r.t. ``arrays[index]`` (mutated in place, restored)."""
    a = arrays[index]
    grad = np.zeros_like(a)
    flat = a.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(*arrays)
        flat[i] = orig - step
        lo = fn(*arrays)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic, numeric) -> float:
    """Max absolute deviation scaled by the larger gradient magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)
