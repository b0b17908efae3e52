"""Quality measures: PSNR, SAM, UIQI, ERGAS, SSIM.

Window sizes and degeneracy handling are pinned here: 8x8 sliding
windows for UIQI, an 11x11 Gaussian window (sigma 1.5) evaluated on
valid positions for SSIM, band peak = max |ref| for PSNR.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cubes import ImageCube

UIQI_WINDOW = 8
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    sam: float
    uiqi: float
    ergas: float
    ssim: float
    psnr_bands: Tuple[float, ...]
    uiqi_bands: Tuple[float, ...]
    ssim_bands: Tuple[float, ...]


def _check_shapes(ref: ImageCube, est: ImageCube):
    if ref.data.shape != est.data.shape:
        raise ValueError(f"shape mismatch: {ref.data.shape} vs {est.data.shape}")


def psnr(ref: ImageCube, est: ImageCube) -> float:
    return _psnr_bands(ref, est)[0]


def _psnr_bands(ref: ImageCube, est: ImageCube):
    _check_shapes(ref, est)
    vals = []
    for rb, eb in zip(ref.data, est.data):
        mse = np.mean((rb - eb) ** 2)
        if mse == 0.0:
            vals.append(math.inf)
            continue
        peak = np.max(np.abs(rb))
        vals.append(10.0 * math.log10(peak * peak / mse))
    mean = math.inf if any(math.isinf(v) for v in vals) else float(np.mean(vals))
    return mean, tuple(vals)


def sam(ref: ImageCube, est: ImageCube) -> float:
    """Mean spectral angle over pixels, in degrees."""
    _check_shapes(ref, est)
    x = ref.data.reshape(ref.bands, -1)
    y = est.data.reshape(est.bands, -1)
    nx = np.linalg.norm(x, axis=0)
    ny = np.linalg.norm(y, axis=0)
    ok = (nx > 0) & (ny > 0)
    if not ok.any():
        return 0.0
    u = x[:, ok] / nx[ok]
    v = y[:, ok] / ny[ok]
    # chord-based angle 2*arcsin(||u - v|| / 2): unlike arccos of the dot
    # product it is numerically stable near zero and exactly 0 for u == v
    half_chord = 0.5 * np.linalg.norm(u - v, axis=0)
    ang = 2.0 * np.arcsin(np.clip(half_chord, 0.0, 1.0))
    return float(np.degrees(np.mean(ang)))


def _uiqi_band(rb: np.ndarray, eb: np.ndarray) -> float:
    h, w = rb.shape
    k = UIQI_WINDOW
    if h < k or w < k:
        raise ValueError(f"image smaller than UIQI window ({k}x{k})")
    rw = sliding_window_view(rb, (k, k)).reshape(-1, k * k)
    ew = sliding_window_view(eb, (k, k)).reshape(-1, k * k)
    n = k * k
    mx = rw.mean(axis=1)
    my = ew.mean(axis=1)
    vx = ((rw - mx[:, None]) ** 2).sum(axis=1) / (n - 1)
    vy = ((ew - my[:, None]) ** 2).sum(axis=1) / (n - 1)
    cxy = ((rw - mx[:, None]) * (ew - my[:, None])).sum(axis=1) / (n - 1)
    denom = (vx + vy) * (mx * mx + my * my)
    vals = []
    for i in range(rw.shape[0]):
        if denom[i] == 0.0:
            if np.array_equal(rw[i], ew[i]):
                vals.append(1.0)
            continue
        vals.append(4.0 * cxy[i] * mx[i] * my[i] / denom[i])
    if not vals:
        return 1.0
    return float(np.mean(vals))


def uiqi(ref: ImageCube, est: ImageCube) -> float:
    return float(np.mean(_uiqi_bands(ref, est)))


def _uiqi_bands(ref: ImageCube, est: ImageCube):
    _check_shapes(ref, est)
    return tuple(_uiqi_band(rb, eb) for rb, eb in zip(ref.data, est.data))


def ergas(ref: ImageCube, est: ImageCube, ratio: float = 1.0) -> float:
    """100/ratio * sqrt(mean_b (RMSE_b / mean_b)^2); zero-mean bands skipped."""
    _check_shapes(ref, est)
    if ratio <= 0:
        raise ValueError("ratio must be > 0")
    terms = []
    for rb, eb in zip(ref.data, est.data):
        mu = rb.mean()
        if mu == 0.0:
            warnings.warn("ERGAS: skipping zero-mean band", RuntimeWarning)
            continue
        rmse = math.sqrt(np.mean((rb - eb) ** 2))
        terms.append((rmse / mu) ** 2)
    if not terms:
        return 0.0
    return float(100.0 / ratio * math.sqrt(np.mean(terms)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    g = np.arange(-half, half + 1, dtype=np.float64)
    k1 = np.exp(-0.5 * (g / sigma) ** 2)
    k = np.outer(k1, k1)
    return k / k.sum()


def _ssim_band(rb: np.ndarray, eb: np.ndarray) -> float:
    h, w = rb.shape
    k = SSIM_WINDOW
    if h < k or w < k:
        raise ValueError(f"image smaller than SSIM window ({k}x{k})")
    win = _gaussian_window(k, SSIM_SIGMA).ravel()
    rng = max(rb.max() - rb.min(), 1e-12)
    c1 = (SSIM_K1 * rng) ** 2
    c2 = (SSIM_K2 * rng) ** 2
    rw = sliding_window_view(rb, (k, k)).reshape(-1, k * k)
    ew = sliding_window_view(eb, (k, k)).reshape(-1, k * k)
    mx = rw @ win
    my = ew @ win
    sxx = (rw * rw) @ win - mx * mx
    syy = (ew * ew) @ win - my * my
    sxy = (rw * ew) @ win - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(ref: ImageCube, est: ImageCube) -> float:
    return float(np.mean(_ssim_bands(ref, est)))


def _ssim_bands(ref: ImageCube, est: ImageCube):
    _check_shapes(ref, est)
    return tuple(_ssim_band(rb, eb) for rb, eb in zip(ref.data, est.data))


def evaluate(ref: ImageCube, est: ImageCube, ratio: float = 1.0) -> MetricReport:
    psnr_mean, psnr_bands = _psnr_bands(ref, est)
    uiqi_bands = _uiqi_bands(ref, est)
    ssim_bands = _ssim_bands(ref, est)
    return MetricReport(
        psnr=psnr_mean,
        sam=sam(ref, est),
        uiqi=float(np.mean(uiqi_bands)),
        ergas=ergas(ref, est, ratio),
        ssim=float(np.mean(ssim_bands)),
        psnr_bands=psnr_bands,
        uiqi_bands=uiqi_bands,
        ssim_bands=ssim_bands,
    )
