"""Orthonormal DCT-II machinery, Rademacher spectrum noise and a JPEG-style
quantization defense."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .imgcore import check_image

# Standard JPEG luminance quantization table (ITU T.81, Annex K).
JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


@lru_cache(maxsize=32)
def dct_matrix(n):
    """Orthonormal DCT-II matrix ``M`` so that ``M @ x`` transforms a length-n signal."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0, :] = np.sqrt(1.0 / n)
    m.setflags(write=False)
    return m


def _as_hwc(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, :, None] if x.ndim == 2 else x


def _separable(x, left, right_t):
    # left @ x[:, :, c] @ right_t for every channel, as two flat matmuls
    h, w, c = x.shape
    a = (left @ x.reshape(h, w * c)).reshape(h, w, c)
    b = np.ascontiguousarray(a.transpose(0, 2, 1)).reshape(h * c, w) @ right_t
    return b.reshape(h, c, w).transpose(0, 2, 1)


def dct2(img):
    """Whole-image 2-D DCT-II, applied independently per channel."""
    x = _as_hwc(img)
    h, w = x.shape[:2]
    return _separable(x, dct_matrix(h), dct_matrix(w).T)


def idct2(spec):
    """Inverse of :func:`dct2`. The result is not clipped to ``[0, 1]``."""
    s = _as_hwc(spec)
    h, w = s.shape[:2]
    return _separable(s, dct_matrix(h).T, dct_matrix(w))


@lru_cache(maxsize=32)
def _unnormalized_scale_1d(n):
    a = np.full(n, 1.0 / np.sqrt(2.0 * n))
    a[0] = 1.0 / (2.0 * np.sqrt(n))
    return a


def unnormalized_to_orthonormal(h, w):
    """Per-coefficient factor mapping unnormalized DCT-II units to orthonormal ones.

    The unnormalized transform is ``2 * sum(x_n cos(...))`` along each axis;
    adding ``eta`` to one of its coefficients equals adding ``eta * factor`` to
    the matching orthonormal coefficient.
    """
    return np.outer(_unnormalized_scale_1d(h), _unnormalized_scale_1d(w))[:, :, None]


def sample_freq_noise(shape, gamma, rng):
    """Draw iid entries from ``{-gamma, +gamma}`` with equal probability."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    signs = rng.integers(0, 2, size=shape, dtype=np.int8)
    return np.where(signs == 1, gamma, -gamma).astype(np.float64)


def high_frequency_mask(h, w):
    """Coefficients whose row+col index lies beyond half the anti-diagonal."""
    u = np.arange(h)[:, None]
    v = np.arange(w)[None, :]
    return (u + v) > (h - 1 + w - 1) / 2.0


def high_frequency_ratio(img):
    """Fraction of DCT energy in the high-frequency half; 0 for an all-zero image."""
    spec = dct2(img)
    energy = spec**2
    total = float(energy.sum())
    if total <= 0.0:
        return 0.0
    mask = high_frequency_mask(*spec.shape[:2])
    return float(energy[mask].sum() / total)


def quality_scale(quality):
    """libjpeg quality -> percentage scale for the quantization table."""
    if not 1 <= quality <= 100:
        raise ValueError("quality must be in 1..100")
    return 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality


@lru_cache(maxsize=100)
def quant_table(quality):
    q = np.floor((JPEG_LUMA_TABLE * quality_scale(quality) + 50.0) / 100.0)
    q = np.clip(q, 1.0, 255.0)
    q.setflags(write=False)
    return q


def jpeg_like_compress(img, quality):
    """Quantize 8x8 block DCT coefficients the way baseline JPEG does, without
    entropy coding or chroma subsampling.

    Works on the 0-255 scale with the usual level shift. Edge blocks are
    padded by edge replication and cropped afterwards.
    """
    x = check_image(img)
    q = quant_table(int(quality))
    h, w, c = x.shape
    ph, pw = -h % 8, -w % 8
    xp = np.pad(x * 255.0 - 128.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    hb, wb = xp.shape[0] // 8, xp.shape[1] // 8
    # (hb, 8, wb, 8, c) block view
    blocks = xp.reshape(hb, 8, wb, 8, c)
    m = dct_matrix(8)
    coef = np.einsum("ui,aibjc,vj->aubvc", m, blocks, m, optimize=True)
    qq = q[None, :, None, :, None]
    coef = np.round(coef / qq) * qq
    rec = np.einsum("ui,aubvc,vj->aibjc", m, coef, m, optimize=True)
    rec = rec.reshape(hb * 8, wb * 8, c)[:h, :w]
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)


class JPEGCompressor(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapper around :func:`jpeg_like_compress`.

    ``transform`` accepts a single image or a stack of images.
    """

    def __init__(self, quality=75):
        self.quality = quality

    def fit(self, X=None, y=None):
        quality_scale(self.quality)
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 4:
            return np.stack([jpeg_like_compress(x, self.quality) for x in X])
        return jpeg_like_compress(X, self.quality)
