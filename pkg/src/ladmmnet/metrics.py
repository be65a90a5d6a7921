"""PSNR, SSIM and SAM for spectral cubes (``(L, M, N)`` arrays)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    sam_rad: float


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(ref, est, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` over all voxels; ``inf`` when identical."""
    ref, est = _same_shape(ref, est)
    mse = np.mean((ref - est) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_band(ref, est, peak: float = 1.0) -> float:
    """Gaussian-window SSIM of two 2-D images, averaged over valid window positions."""
    ref, est = _same_shape(ref, est)
    if ref.ndim != 2:
        raise ValueError("ssim_band expects 2-D images")
    if min(ref.shape) < SSIM_WINDOW:
        raise ValueError(f"image {ref.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    c1 = (K1 * peak) ** 2
    c2 = (K2 * peak) ** 2

    def filt(img):
        win = sliding_window_view(img, w.shape)
        return np.einsum("ijkl,kl->ij", win, w)

    mu_x, mu_y = filt(ref), filt(est)
    sxx = filt(ref * ref) - mu_x**2
    syy = filt(est * est) - mu_y**2
    sxy = filt(ref * est) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(ref, est, peak: float = 1.0) -> float:
    """SSIM of a 2-D image pair, or the per-band mean for ``(L, M, N)`` cubes."""
    ref, est = _same_shape(ref, est)
    if ref.ndim == 2:
        return ssim_band(ref, est, peak)
    return float(np.mean([ssim_band(r, e, peak) for r, e in zip(ref, est)]))


def sam(ref, est) -> float:
    """Mean spectral angle in radians; pixels with a zero spectrum in either cube are skipped."""
    ref, est = _same_shape(ref, est)
    r = ref.reshape(ref.shape[0], -1)
    e = est.reshape(est.shape[0], -1)
    nr = np.linalg.norm(r, axis=0)
    ne = np.linalg.norm(e, axis=0)
    ok = (nr > 0) & (ne > 0)
    if not np.any(ok):
        raise ValueError("every pixel has a zero spectrum; SAM undefined")
    cos = np.sum(r[:, ok] * e[:, ok], axis=0) / (nr[ok] * ne[ok])
    return float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))


def evaluate(ref, est, peak: float = 1.0) -> MetricReport:
    return MetricReport(psnr(ref, est, peak), ssim(ref, est, peak), sam(ref, est))
