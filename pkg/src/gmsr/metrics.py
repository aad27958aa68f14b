"""Reconstruction quality metrics on H x W x C cubes in [0, 1]."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SAM_NORM_FLOOR = 1e-12


def _check(z, ref) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if z.shape != ref.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {ref.shape}")
    return z, ref


def rmse(z, ref) -> float:
    z, ref = _check(z, ref)
    return math.sqrt(float(np.mean((z - ref) ** 2)))


def psnr(z, ref, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give ``inf``."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    z, ref = _check(z, ref)
    mse = float(np.mean((z - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def window_size(h: int, w: int, preferred: int = SSIM_WINDOW) -> int:
    side = min(h, w)
    if side < 3:
        raise ValueError(f"SSIM needs spatial extent >= 3, got {h}x{w}")
    k = min(preferred, side)
    return k if k % 2 == 1 else k - 1


def ssim_band(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained Gaussian windows of one band."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    k = window_size(*x.shape)
    w = gaussian_window(k)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    px = sliding_window_view(x, (k, k))
    py = sliding_window_view(y, (k, k))
    mx = np.einsum("ijkl,kl->ij", px, w)
    my = np.einsum("ijkl,kl->ij", py, w)
    dx = px - mx[:, :, None, None]
    dy = py - my[:, :, None, None]
    vx = np.einsum("ijkl,kl->ij", dx * dx, w)
    vy = np.einsum("ijkl,kl->ij", dy * dy, w)
    cxy = np.einsum("ijkl,kl->ij", dx * dy, w)
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def assim(z, ref, data_range: float = 1.0) -> float:
    """Band-averaged SSIM."""
    z, ref = _check(z, ref)
    if z.ndim == 2:
        return ssim_band(z, ref, data_range)
    return float(np.mean([ssim_band(z[:, :, c], ref[:, :, c], data_range)
                          for c in range(z.shape[2])]))


def sam(z, ref, return_excluded: bool = False):
    """Mean spectral angle in degrees over pixels with non-zero spectra."""
    z, ref = _check(z, ref)
    a = z.reshape(-1, z.shape[-1])
    b = ref.reshape(-1, ref.shape[-1])
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    keep = (na >= SAM_NORM_FLOOR) & (nb >= SAM_NORM_FLOOR)
    excluded = int((~keep).sum())
    if not keep.any():
        value = float("nan")
    else:
        cos = np.sum(a[keep] * b[keep], axis=1) / (na[keep] * nb[keep])
        value = float(np.degrees(np.mean(np.arccos(np.clip(cos, -1.0, 1.0)))))
    return (value, excluded) if return_excluded else value


def per_band_error(z, ref) -> np.ndarray:
    """Per-pixel RMSE map for every band (H x W x C); a pixel's RMSE is |error|."""
    z, ref = _check(z, ref)
    return np.abs(z - ref)


@dataclass
class MetricsReport:
    rmse: float
    psnr: float
    assim: float
    sam: float
    sam_excluded: int
    per_band_rmse: np.ndarray

    CSV_HEADER = "name,rmse,psnr,assim,sam"

    def csv_row(self, name: str) -> str:
        return ",".join([name] + [format_float(v) for v in (self.rmse, self.psnr, self.assim, self.sam)])

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.rmse, self.psnr, self.assim, self.sam))


def format_float(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def evaluate(z, ref) -> MetricsReport:
    s, excluded = sam(z, ref, return_excluded=True)
    return MetricsReport(rmse(z, ref), psnr(z, ref), assim(z, ref), s, excluded,
                         per_band_error(z, ref))
