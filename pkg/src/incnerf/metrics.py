"""Image quality metrics and auxiliary-memory accounting."""

from __future__ import annotations

import logging

import numpy as np
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _as_image(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError(f"expected an H x W x C image, got shape {a.shape}")
    return np.clip(a, 0.0, 1.0)


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 99 dB."""
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def _gaussian(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    # separable correlation, keeping only positions where the window fits
    h = len(g) // 2
    y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return y[h:x.shape[0] - h, h:x.shape[1] - h]


def _ssim_cs(a, b, g, c1, c2):
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    s_aa = _filter_valid(a * a, g) - mu_a ** 2
    s_bb = _filter_valid(b * b, g) - mu_b ** 2
    s_ab = _filter_valid(a * b, g) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * s_ab + c2) / (s_aa + s_bb + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _downsample(x):
    # pad odd sizes by mirroring the last row/column, then 2x2 box average
    if x.shape[0] % 2 or x.shape[1] % 2:
        x = np.pad(x, ((0, x.shape[0] % 2), (0, x.shape[1] % 2)), mode="symmetric")
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def max_scales(H, W, win=11, scales=5):
    n = 0
    while n < scales and min(H, W) >= 2 ** n * win:
        n += 1
    return n


def ms_ssim(a, b, scales=5, win=11, sigma=1.5, k1=0.01, k2=0.03, weights=MS_SSIM_WEIGHTS):
    """Multi-scale SSIM for images with values in [0, 1].

    Uses an ``win x win`` Gaussian window with valid-region filtering. When the
    image is too small for ``scales`` levels, the count is reduced and the
    remaining weights renormalized to sum to one. Channels are scored
    separately and averaged.
    """
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    n = max_scales(a.shape[0], a.shape[1], win, scales)
    if n == 0:
        raise ValueError(f"image {a.shape[:2]} smaller than the {win}x{win} window")
    w = np.asarray(weights[:n], dtype=np.float64)
    if n < scales:
        log.info("ms_ssim: %dx%d image supports %d of %d scales", a.shape[0], a.shape[1], n, scales)
        w = w / w.sum()
    g = _gaussian(win, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        terms = []
        for s in range(n):
            if s:
                x, y = _downsample(x), _downsample(y)
            ssim, cs = _ssim_cs(x, y, g, c1, c2)
            terms.append(max(cs, 0.0) if s < n - 1 else max(ssim, 0.0))
        vals.append(float(np.prod(np.power(terms, w))))
    return float(np.clip(np.mean(vals), 0.0, 1.0))


def aux_bytes(state):
    """Extra storage a method keeps beyond the live network, in bytes."""
    return state.aux_bytes()
