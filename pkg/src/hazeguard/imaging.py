"""Image arrays, PSNR/SSIM metrics and PNG I/O.

Images are ``float64`` arrays of shape ``(H, W, 3)`` with values in ``[0, 1]``.
Quantization to 8 bits happens only when writing files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageIOError, ShapeError, SizeError

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 1.0

MIN_SIDE = 8


@dataclass(frozen=True)
class MetricPair:
    psnr: float
    ssim: float


def as_image(arr, *, check_range: bool = True) -> np.ndarray:
    """Validate and convert ``arr`` to an ``(H, W, 3)`` float64 image."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got shape {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise SizeError(f"image sides must be >= {MIN_SIDE}, got {img.shape[:2]}")
    if check_range and (np.any(img < 0.0) or np.any(img > 1.0) or not np.all(np.isfinite(img))):
        raise ValueError("image values must lie in [0, 1]")
    return img


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(DATA_RANGE**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """1-D normalized Gaussian taps centred on the middle tap."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the first two axes
    k = len(taps)
    h, w = img.shape[:2]
    rows = sum(taps[i] * img[i : h - k + 1 + i] for i in range(k))
    return sum(taps[j] * rows[:, j : w - k + 1 + j] for j in range(k))


def ssim(a, b) -> float:
    """Mean SSIM over 11x11 Gaussian windows (sigma 1.5), averaged over channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise SizeError(f"SSIM needs sides >= {SSIM_WINDOW}, got {a.shape[:2]}")
    taps = gaussian_window()
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2

    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a**2
    var_b = _filter_valid(b * b, taps) - mu_b**2
    cov = _filter_valid(a * b, taps) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    smap = num / den
    value = float(np.mean(smap.mean(axis=(0, 1))))
    return float(np.clip(value, -1.0, 1.0))


def metrics(pred, target) -> MetricPair:
    return MetricPair(psnr=psnr(pred, target), ssim=ssim(pred, target))


def quantize(img) -> np.ndarray:
    """Round to the nearest 8-bit level (what a PNG round trip returns)."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0) / 255.0


def save_image(img, path) -> None:
    img = as_image(img)
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise ImageIOError(f"only PNG is supported, got {path.suffix!r}")
    if not path.parent.is_dir():
        raise ImageIOError(f"parent directory does not exist: {path.parent}")
    data = np.round(img * 255.0).astype(np.uint8)
    # fixed compression settings keep files byte-identical across runs
    Image.fromarray(data, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageIOError(f"unsupported image format {im.format!r}: {path}")
            im.load()
            if im.mode not in ("RGB", "RGBA", "L"):
                raise ImageIOError(f"unsupported PNG mode {im.mode!r}: {path}")
            data = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        if isinstance(exc, ImageIOError):
            raise
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return data / 255.0
