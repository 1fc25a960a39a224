"""Image quality metrics (PSNR, SSIM, MS-SSIM) and set-level aggregation.

Images are 2-D float arrays in [0, 1]. SSIM follows Wang et al.: an
11x11 Gaussian window with sigma 1.5 (truncated, renormalized to sum 1),
valid-mode filtering, K1 = 0.01, K2 = 0.03 and dynamic range L = 1.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError

WINDOW = 11
SIGMA = 1.5
K1 = 0.01
K2 = 0.03
DYNAMIC_RANGE = 1.0
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian; the 2-D window is its outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ConfigError(f"expected 2-D images, got shape {a.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with peak value 1; ``inf`` for identical images."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _filter_valid(img, g):
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def _ssim_maps(a, b, g):
    c1 = (K1 * DYNAMIC_RANGE) ** 2
    c2 = (K2 * DYNAMIC_RANGE) ** 2
    mu1 = _filter_valid(a, g)
    mu2 = _filter_valid(b, g)
    s11 = _filter_valid(a * a, g) - mu1 * mu1
    s22 = _filter_valid(b * b, g) - mu2 * mu2
    s12 = _filter_valid(a * b, g) - mu1 * mu2
    cs = (2 * s12 + c2) / (s11 + s22 + c2)
    lum = (2 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1)
    return lum * cs, cs


def ssim(a, b) -> float:
    """Mean structural similarity over all valid window positions."""
    a, b = _check_pair(a, b)
    if min(a.shape) < WINDOW:
        raise ConfigError(f"images must be at least {WINDOW}x{WINDOW}, got {a.shape}")
    ssim_map, _ = _ssim_maps(a, b, gaussian_window())
    return float(ssim_map.mean())


def _pool2(img):
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_scales(shape, scales: int = 5) -> int:
    """Largest usable scale count not exceeding ``scales`` for an image of ``shape``."""
    m = min(shape)
    if m < WINDOW:
        raise ConfigError(f"images must be at least {WINDOW}x{WINDOW}, got {tuple(shape)}")
    usable = 1
    while usable < scales and m >= WINDOW * 2 ** usable:
        usable += 1
    return usable


def ms_ssim_terms(a, b, scales: int = 5) -> tuple[list[float], float]:
    """Per-scale mean contrast-structure terms (all but the coarsest) and the coarsest-scale SSIM."""
    a, b = _check_pair(a, b)
    n = ms_scales(a.shape, scales)
    g = gaussian_window()
    cs_terms = []
    for j in range(n):
        ssim_map, cs_map = _ssim_maps(a, b, g)
        if j == n - 1:
            return cs_terms, float(ssim_map.mean())
        cs_terms.append(float(cs_map.mean()))
        a, b = _pool2(a), _pool2(b)
    raise AssertionError("unreachable")


def ms_ssim(a, b, scales: int = 5) -> float:
    """Multi-scale SSIM with the standard five-scale weights.

    Scales are reduced (with a warning) when the image is smaller than
    ``11 * 2**(scales - 1)``; the leading weights are then renormalized to
    sum to one. Negative per-scale terms are clipped to zero before the
    fractional powers are taken.
    """
    a, b = _check_pair(a, b)
    n = ms_scales(a.shape, scales)
    if n < scales:
        warnings.warn(f"image {a.shape} too small for {scales} MS-SSIM scales; using {n}", stacklevel=2)
    weights = np.asarray(MS_WEIGHTS[:n])
    weights = weights / weights.sum()
    cs_terms, last = ms_ssim_terms(a, b, n)
    terms = np.asarray(cs_terms + [last])
    return float(np.prod(np.maximum(terms, 0.0) ** weights))


@dataclass
class MetricSummary:
    mean: float | None
    std: float | None
    n: int
    n_infinite: int = 0

    def as_dict(self, with_inf: bool = False) -> dict:
        d = {"mean": self.mean, "std": self.std, "n": self.n}
        if with_inf:
            d["n_infinite"] = self.n_infinite
        return d


def summarize(values) -> MetricSummary:
    """Mean and sample standard deviation (n - 1) of the finite values; std is 0 for n = 1."""
    vals = np.asarray(values, dtype=np.float64)
    finite = vals[np.isfinite(vals)]
    n_inf = int(vals.size - finite.size)
    if finite.size == 0:
        return MetricSummary(None, None, 0, n_inf)
    mean = float(finite.mean())
    std = float(finite.std(ddof=1)) if finite.size > 1 else 0.0
    return MetricSummary(mean, std, int(finite.size), n_inf)


@dataclass
class MetricReport:
    psnr: MetricSummary
    ssim: MetricSummary
    ms_ssim: MetricSummary
    values: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "psnr": self.psnr.as_dict(with_inf=True),
            "ssim": self.ssim.as_dict(),
            "ms_ssim": self.ms_ssim.as_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        return cls(
            MetricSummary(**d["psnr"]),
            MetricSummary(**d["ssim"]),
            MetricSummary(**d["ms_ssim"]),
        )


def evaluate_set(pairs, scales: int = 5) -> MetricReport:
    """Per-image PSNR/SSIM/MS-SSIM over ``(prediction, reference)`` pairs, reduced in input order."""
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("evaluate_set needs at least one image pair")
    p, s, m = [], [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for a, b in pairs:
            p.append(psnr(a, b))
            s.append(ssim(a, b))
            m.append(ms_ssim(a, b, scales))
    return MetricReport(summarize(p), summarize(s), summarize(m), {"psnr": p, "ssim": s, "ms_ssim": m})
