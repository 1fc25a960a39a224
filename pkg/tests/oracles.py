"""Independent metric oracles: explicit window sums and scipy 2-D correlation."""

import numpy as np
from scipy.signal import correlate2d

C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2
WEIGHTS = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]


def _window():
    x = np.arange(11) - 5.0
    g = np.exp(-x * x / (2 * 1.5 ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_direct(a, b):
    # explicit weighted sums at every valid window position
    w = _window()
    h, wd = a.shape
    vals, cs = [], []
    for i in range(h - 10):
        for j in range(wd - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = np.sum(w * pa), np.sum(w * pb)
            va = np.sum(w * (pa - ma) ** 2)
            vb = np.sum(w * (pb - mb) ** 2)
            cov = np.sum(w * (pa - ma) * (pb - mb))
            c = (2 * cov + C2) / (va + vb + C2)
            vals.append((2 * ma * mb + C1) / (ma * ma + mb * mb + C1) * c)
            cs.append(c)
    return float(np.mean(vals)), float(np.mean(cs))


def stats_scipy(a, b):
    w = _window()

    def f(img):
        return correlate2d(img, w, mode="valid")

    ma, mb = f(a), f(b)
    va = f(a * a) - ma ** 2
    vb = f(b * b) - mb ** 2
    cov = f(a * b) - ma * mb
    cs = (2 * cov + C2) / (va + vb + C2)
    lum = (2 * ma * mb + C1) / (ma ** 2 + mb ** 2 + C1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _pool(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    return img[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim_oracle(a, b, n):
    terms = []
    for j in range(n):
        s, cs = stats_scipy(a, b)
        terms.append(s if j == n - 1 else cs)
        a, b = _pool(a), _pool(b)
    wts = np.array(WEIGHTS[:n]) / sum(WEIGHTS[:n])
    return float(np.prod([max(t, 0.0) ** wt for t, wt in zip(terms, wts)]))
