"""Image helpers: validation, L-infinity geometry, quality metrics and I/O.

Images are ``(H, W, C)`` float arrays with values in ``[0, 1]`` and ``C`` in
``{1, 3}``. Perturbations share the image shape and live in ``[-1, 1]``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

FLOAT_MAGIC = b"FDAIMG01"
INF = math.inf


class ShapeMismatchError(ValueError):
    """Raised when two tensors that must share a shape do not."""


class ImageFormatError(ValueError):
    """Raised when an image file cannot be decoded."""


def check_image(img, name="image", copy=False):
    """Validate an image array and return it as float64 ``(H, W, C)``.

    2-D input is promoted to a single channel.
    """
    arr = np.array(img, dtype=np.float64, copy=copy)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"{name} must have shape (H, W, 1|3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatchError(
            f"{names[0]} shape {np.shape(a)} does not match {names[1]} shape {np.shape(b)}"
        )


def clip_to_ball(center, candidate, radius):
    """Project ``candidate`` onto the L-inf ball of ``radius`` around ``center``
    intersected with the ``[0, 1]`` box."""
    center = np.asarray(center, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    check_same_shape(center, candidate, ("center", "candidate"))
    if radius < 0:
        raise ValueError("radius must be non-negative")
    out = np.clip(candidate, center - radius, center + radius)
    return np.clip(out, 0.0, 1.0, out=out)


def linf_norm(delta):
    delta = np.asarray(delta)
    if delta.size == 0:
        return 0.0
    return float(np.max(np.abs(delta)))


@dataclass(frozen=True)
class QualityReport:
    mse: float
    psnr_db: float
    ssim: float

    def as_dict(self):
        return {"mse": self.mse, "psnr_db": self.psnr_db, "ssim": self.ssim}


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img2d, g):
    # separable 'valid' correlation with a symmetric 1-D kernel
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img2d, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(reference, candidate, data_range=255.0, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over a Gaussian-weighted sliding window, averaged over channels.

    Inputs are on the ``[0, data_range]`` scale. Only windows fully inside
    the image contribute.
    """
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(candidate, dtype=np.float64)
    check_same_shape(x, y, ("reference", "candidate"))
    if x.ndim == 2:
        x, y = x[:, :, None], y[:, :, None]
    if min(x.shape[:2]) < win_size:
        raise ValueError(f"images must be at least {win_size}x{win_size} for SSIM")
    g = _gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for ch in range(x.shape[2]):
        a, b = x[:, :, ch], y[:, :, ch]
        mu_a = _filter_valid(a, g)
        mu_b = _filter_valid(b, g)
        var_a = _filter_valid(a * a, g) - mu_a**2
        var_b = _filter_valid(b * b, g) - mu_b**2
        cov = _filter_valid(a * b, g) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def quality(reference, candidate):
    """MSE and PSNR on the 0-255 scale plus SSIM, comparing two [0, 1] images."""
    reference = np.asarray(reference, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    check_same_shape(reference, candidate, ("reference", "candidate"))
    a = reference * 255.0
    b = candidate * 255.0
    mse = float(np.mean((a - b) ** 2))
    psnr = INF if mse == 0.0 else 10.0 * math.log10(255.0**2 / mse)
    s = 1.0 if mse == 0.0 else ssim(a, b, data_range=255.0)
    return QualityReport(mse=mse, psnr_db=psnr, ssim=s)


def to_uint8(img):
    """Quantize a [0, 1] image to 8 bits with round-half-even."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(img):
    """Round-trip through 8 bits, returning float64 in [0, 1]."""
    return to_uint8(img).astype(np.float64) / 255.0


def encode_png(img):
    """Encode an image as 8-bit PNG bytes."""
    import io

    arr = to_uint8(check_image(img))
    mode = "L" if arr.shape[2] == 1 else "RGB"
    pil = PILImage.fromarray(arr[:, :, 0] if mode == "L" else arr, mode=mode)
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data):
    import io

    try:
        pil = PILImage.open(io.BytesIO(data))
        pil.load()
    except Exception as exc:  # PIL raises several unrelated types
        raise ImageFormatError(f"cannot decode PNG: {exc}") from exc
    if pil.mode not in ("L", "RGB"):
        pil = pil.convert("RGB")
    arr = np.asarray(pil, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_image(img, path):
    """Save as PNG (8-bit) or, for any other suffix, the raw float container."""
    path = Path(path)
    img = check_image(img)
    if path.suffix.lower() == ".png":
        path.write_bytes(encode_png(img))
        return
    h, w, c = img.shape
    header = FLOAT_MAGIC + struct.pack("<III", h, w, c)
    path.write_bytes(header + img.astype("<f4").tobytes())


def load_image(path):
    path = Path(path)
    data = path.read_bytes()
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return decode_png(data)
    if data[:8] != FLOAT_MAGIC or len(data) < 20:
        raise ImageFormatError(f"{path}: unrecognized image header")
    h, w, c = struct.unpack("<III", data[8:20])
    body = data[20:]
    if len(body) != 4 * h * w * c:
        raise ImageFormatError(f"{path}: payload size does not match dims {(h, w, c)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float64)
