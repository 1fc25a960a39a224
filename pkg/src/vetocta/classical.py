"""Multi-repeat OCTA: speckle variance and eigendecomposition clutter filtering."""

from __future__ import annotations

import math

import numpy as np

from .data import BFrameEnsemble
from .errors import ConfigError

SYMMETRY_TOL = 1e-10
MAX_ORDER = 64


def sv_octa(ensemble: BFrameEnsemble) -> np.ndarray:
    """Mean absolute difference between consecutive repeats, per pixel.

    With NR frames there are NR - 1 differences and the sum is divided by
    NR - 1.
    """
    if ensemble.nr < 2:
        raise ConfigError("speckle variance needs at least two repeats")
    a = ensemble.frames.astype(np.float64)
    return np.abs(np.diff(a, axis=0)).sum(axis=0) / (ensemble.nr - 1)


def _off_norm(a):
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def eigh_hermitian(m: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a small real symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in descending
    order and eigenvectors as orthonormal columns. Each eigenvector is
    sign-normalized so its largest-magnitude entry is positive. Iterates
    until the off-diagonal Frobenius norm falls below ``tol`` times the
    matrix norm.
    """
    a = np.array(m)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ConfigError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n > MAX_ORDER:
        raise ConfigError(f"matrix order {n} exceeds {MAX_ORDER}")
    if np.iscomplexobj(a):
        if np.any(np.abs(a.imag) > 0):
            raise NotImplementedError("only real symmetric matrices are supported")
        a = a.real
    a = a.astype(np.float64)
    scale = max(float(np.abs(a).max()), 1e-300)
    if np.abs(a - a.T).max() > SYMMETRY_TOL * scale:
        raise ConfigError("matrix is not symmetric within tolerance")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(n), v

    for _ in range(max_sweeps):
        if _off_norm(a) <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                # hypot keeps theta**2 from overflowing when apq is tiny
                t = 1.0 / (abs(theta) + math.hypot(theta, 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) rotation
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise RuntimeError("Jacobi iteration did not converge")

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    w, v = w[order], v[:, order]
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(n)])
    signs[signs == 0] = 1.0
    return w, v * signs


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """``X X^H / P`` for an NR-by-P signal matrix."""
    return (x @ x.conj().T) / x.shape[1]


def clutter_projector(vectors: np.ndarray, k: int) -> np.ndarray:
    """``I - sum_{i<k} e_i e_i^H`` built from the leading ``k`` eigenvector columns."""
    e = vectors[:, :k]
    return np.eye(vectors.shape[0]) - e @ e.conj().T


def ed_filter(x: np.ndarray, k: int = 1, zero_mean: bool = False) -> np.ndarray:
    """Remove the ``k`` dominant eigencomponents of the repeat autocorrelation from ``x``.

    ``x`` is NR-by-P. With ``zero_mean`` the per-row mean is subtracted
    before the autocorrelation is formed (the projector is still applied to
    the original rows).
    """
    nr = x.shape[0]
    if not 1 <= k < nr:
        raise ConfigError(f"k must satisfy 1 <= k < NR={nr}, got {k}")
    basis = x - x.mean(axis=1, keepdims=True) if zero_mean else x
    _, vectors = eigh_hermitian(autocorrelation(basis))
    return clutter_projector(vectors, k) @ x


def ed_octa(ensemble: BFrameEnsemble, k: int = 1, zero_mean: bool = False) -> np.ndarray:
    """Eigendecomposition clutter-filtered flow: per-pixel RMS of the filtered repeats."""
    if ensemble.nr < 2:
        raise ConfigError("eigendecomposition filtering needs at least two repeats")
    nr = ensemble.nr
    shape = ensemble.shape
    x = ensemble.frames.reshape(nr, -1).astype(np.float64)
    xv = ed_filter(x, k, zero_mean)
    return np.sqrt(np.mean(np.abs(xv) ** 2, axis=0)).reshape(shape)
