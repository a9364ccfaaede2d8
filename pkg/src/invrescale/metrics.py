"""Bicubic reference scaler, luma conversion and PSNR/SSIM."""
from __future__ import annotations

import math

import numpy as np

from .tensor import InvalidArgument

PSNR_CAP = 99.0


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _weights(in_len: int, out_len: int, scale: float, antialias: bool = True) -> np.ndarray:
    """(out_len, in_len) resampling matrix, clamp-to-edge boundary."""
    width = 4.0
    kscale = 1.0
    if scale < 1 and antialias:
        width /= scale
        kscale = scale
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kscale * cubic_kernel(kscale * (u[:, None] - idx))
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 1, in_len).astype(int) - 1
    mat = np.zeros((out_len, in_len))
    np.add.at(mat, (np.repeat(np.arange(out_len), taps), idx.ravel()), w.ravel())
    return mat


def bicubic_resize(img: np.ndarray, scale: float | None = None,
                   size: tuple[int, int] | None = None, antialias: bool = True) -> np.ndarray:
    """Separable cubic convolution (a = -0.5) on the last two axes.

    Downscaling widens the kernel by 1/scale as an anti-alias prefilter.
    Either ``scale`` or an explicit output ``size`` (h, w) is required.
    """
    img = np.asarray(img)
    h, w = img.shape[-2:]
    if size is None:
        if scale is None or scale <= 0:
            raise InvalidArgument("bicubic_resize needs a positive scale or an output size")
        size = (int(math.ceil(h * scale)), int(math.ceil(w * scale)))
        sh = sw = float(scale)
    else:
        sh, sw = size[0] / h, size[1] / w
    if size[0] < 1 or size[1] < 1:
        raise InvalidArgument(f"output extents must be >= 1, got {size}")
    if size == (h, w):
        return img.copy()
    rows = _weights(h, size[0], sh, antialias)
    cols = _weights(w, size[1], sw, antialias)
    out = np.einsum("oh,...hw,pw->...op", rows, img.astype(np.float64), cols)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64)


def to_luma(img: np.ndarray) -> np.ndarray:
    """Studio-swing BT.601 Y of an RGB image in [0,1]; result in [16/255, 235/255]."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-3] != 3:
        raise InvalidArgument(f"to_luma expects 3 channels, got {img.shape}")
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    return (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0


def crop_border(plane: np.ndarray, border: int) -> np.ndarray:
    if border <= 0:
        return plane
    return plane[..., border:-border, border:-border]


def psnr(a: np.ndarray, b: np.ndarray, cap: float | None = PSNR_CAP) -> float:
    """PSNR in dB for planes scaled to [0,1]; identical planes give ``cap`` (or inf)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf if cap is None else cap
    val = 10.0 * math.log10(1.0 / mse)
    return val if cap is None else min(val, cap)


def _gaussian_1d(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0,
         window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise InvalidArgument(f"ssim needs 2-D planes of at least {window}x{window}, got {a.shape}")
    g = _gaussian_1d(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
