"""Forward degradation operators and observation synthesis.

The blur is cyclic (circular convolution) so it diagonalizes in the 2-D
DFT basis; downsampling is pure decimation with phase (0, 0).  Noise is
drawn from a counter-based generator (Philox) through Box-Muller and
rescaled after the draw so the realized SNR matches the request exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .cubes import EntryMask, ImageCube, ObservationSet, cube_to_matrix, matrix_to_cube


# ---------------------------------------------------------------------------
# reproducible Gaussian samples


def standard_normal(shape, seed: int, stream: int = 0) -> np.ndarray:
    """Box-Muller Gaussians from a Philox counter-based generator."""
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed) + (np.uint64(stream) << np.uint64(32))))
    n = int(np.prod(shape))
    half = (n + 1) // 2
    u1 = 1.0 - gen.random(half)   # (0, 1]
    u2 = gen.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n].reshape(shape)


# ---------------------------------------------------------------------------
# kernels and operators


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian on the centered integer grid, normalized to sum 1."""
    if size < 1 or size % 2 == 0:
        raise ValueError("kernel size must be odd and >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    half = size // 2
    g = np.arange(-half, half + 1, dtype=np.float64)
    k1 = np.exp(-0.5 * (g / sigma) ** 2)
    k = np.outer(k1, k1)
    return k / k.sum()


def _centered_embed(kernel: np.ndarray, height: int, width: int) -> np.ndarray:
    """Zero-pad a centered k x k stencil and roll its center to (0, 0)."""
    kh, kw = kernel.shape
    if kh > height or kw > width:
        raise ValueError("kernel larger than image")
    pad = np.zeros((height, width), dtype=np.float64)
    pad[:kh, :kw] = kernel
    return np.roll(pad, shift=(-(kh // 2), -(kw // 2)), axis=(0, 1))


@dataclass(frozen=True)
class BlurOperator:
    """Cyclic 2-D convolution, stored as kernel plus DFT eigenvalues."""

    kernel: np.ndarray        # (k, k), odd k, centered
    height: int
    width: int
    eigenvalues: np.ndarray   # (height, width) complex

    @classmethod
    def from_kernel(cls, kernel: np.ndarray, height: int, width: int) -> "BlurOperator":
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
            raise ValueError("kernel must be square with odd size")
        eig = np.fft.fft2(_centered_embed(kernel, height, width))
        return cls(kernel=kernel, height=height, width=width, eigenvalues=eig)

    @classmethod
    def identity(cls, height: int, width: int) -> "BlurOperator":
        return cls.from_kernel(np.ones((1, 1)), height, width)


def cyclic_blur(cube: ImageCube, blur: BlurOperator, adjoint: bool = False) -> ImageCube:
    """Per-band circular convolution via FFT; adjoint uses conjugate eigenvalues."""
    if (cube.height, cube.width) != (blur.height, blur.width):
        raise ValueError("blur operator built for a different spatial size")
    eig = np.conj(blur.eigenvalues) if adjoint else blur.eigenvalues
    spec = np.fft.fft2(cube.data, axes=(1, 2)) * eig[None, :, :]
    out = np.fft.ifft2(spec, axes=(1, 2))
    resid = np.linalg.norm(out.imag)
    ref = np.linalg.norm(cube.data)
    if ref > 0 and resid > 1e-9 * ref:
        raise FloatingPointError("imaginary residue beyond tolerance in cyclic blur")
    return ImageCube(out.real, wavelengths=cube.wavelengths)


@dataclass(frozen=True)
class Downsampler:
    """Regular decimation by factor f on both axes, phase (0, 0)."""

    factor: int

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("factor must be >= 1")


def downsample(cube: ImageCube, down: Downsampler) -> ImageCube:
    f = down.factor
    if cube.height % f or cube.width % f:
        raise ValueError(f"factor {f} does not divide spatial size {cube.height}x{cube.width}")
    return ImageCube(cube.data[:, ::f, ::f], wavelengths=cube.wavelengths)


def upsample_adjoint(cube: ImageCube, down: Downsampler, height: int, width: int) -> ImageCube:
    """Adjoint of :func:`downsample`: zero-fill at non-sampled positions."""
    f = down.factor
    if height % f or width % f:
        raise ValueError("target size not divisible by factor")
    if (cube.height, cube.width) != (height // f, width // f):
        raise ValueError("coarse size does not match target/factor")
    out = np.zeros((cube.bands, height, width), dtype=np.float64)
    out[:, ::f, ::f] = cube.data
    return ImageCube(out, wavelengths=cube.wavelengths)


@dataclass(frozen=True)
class SpectralResponse:
    """Row-stochastic spectral response matrix R (out_bands x bands)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("spectral response must be a matrix")
        if np.any(m < 0):
            raise ValueError("spectral response rows must be nonnegative")
        if not np.allclose(m.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("spectral response rows must sum to 1")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def average(cls, bands: int) -> "SpectralResponse":
        """Panchromatic response: average of all bands."""
        return cls(np.full((1, bands), 1.0 / bands))

    @classmethod
    def band_range(cls, first: int, last: int, bands: int) -> "SpectralResponse":
        """Average of bands ``first..last`` (1-based, inclusive)."""
        if not (1 <= first <= last <= bands):
            raise ValueError("invalid band range")
        row = np.zeros((1, bands))
        row[0, first - 1:last] = 1.0 / (last - first + 1)
        return cls(row)

    @classmethod
    def identity(cls, bands: int) -> "SpectralResponse":
        return cls(np.eye(bands))

    @classmethod
    def rgb_like(cls, out_bands: int, bands: int) -> "SpectralResponse":
        """Partition the spectrum into ``out_bands`` contiguous averaged groups."""
        edges = np.linspace(0, bands, out_bands + 1).round().astype(int)
        m = np.zeros((out_bands, bands))
        for i in range(out_bands):
            lo, hi = edges[i], max(edges[i + 1], edges[i] + 1)
            hi = min(hi, bands)
            m[i, lo:hi] = 1.0 / (hi - lo)
        return cls(m)


def apply_srf(cube: ImageCube, srf: SpectralResponse) -> ImageCube:
    if srf.matrix.shape[1] != cube.bands:
        raise ValueError("spectral response column count must equal cube bands")
    return matrix_to_cube(srf.matrix @ cube_to_matrix(cube), cube.height, cube.width)


def add_noise_snr(cube: ImageCube, snr_db: float, seed: int, stream: int = 0) -> ImageCube:
    """Add white Gaussian noise at an exactly realized Frobenius SNR."""
    if math.isinf(snr_db) and snr_db > 0:
        return cube
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite (or +inf for no noise)")
    sig = np.linalg.norm(cube.data)
    if sig == 0.0:
        raise ValueError("cannot scale noise for an all-zero cube")
    noise = standard_normal(cube.data.shape, seed, stream=stream)
    nn = np.linalg.norm(noise)
    noise *= (sig * 10.0 ** (-snr_db / 20.0)) / nn
    return ImageCube(cube.data + noise, wavelengths=cube.wavelengths)


@dataclass(frozen=True)
class DegradationModel:
    """Full Wald-protocol description of how observations are synthesized."""

    blur: BlurOperator
    down: Downsampler
    srf: SpectralResponse
    snr_hs: float = math.inf
    snr_hr: float = math.inf
    hs_mask: Optional[EntryMask] = None
    seed: int = 0


def degrade(reference: ImageCube, model: DegradationModel) -> ObservationSet:
    """Synthesize the (hs, hr) observation pair from a reference cube."""
    hs = downsample(cyclic_blur(reference, model.blur), model.down)
    hr = apply_srf(reference, model.srf)
    if np.linalg.norm(hs.data) > 0 and not (math.isinf(model.snr_hs) and model.snr_hs > 0):
        hs = add_noise_snr(hs, model.snr_hs, model.seed, stream=1)
    if np.linalg.norm(hr.data) > 0 and not (math.isinf(model.snr_hr) and model.snr_hr > 0):
        hr = add_noise_snr(hr, model.snr_hr, model.seed, stream=2)
    if model.hs_mask is not None:
        masked = np.where(model.hs_mask.kept, hs.data, 0.0)
        hs = ImageCube(masked, wavelengths=hs.wavelengths)
    return ObservationSet(hs=hs, hr=hr, hs_mask=model.hs_mask)


def random_pixel_mask(height: int, width: int, keep_fraction: float, seed: int) -> np.ndarray:
    """Boolean (height, width) mask keeping ceil(fraction * N) random pixels."""
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError("keep_fraction must lie in (0, 1]")
    n = height * width
    n_keep = max(1, int(round(keep_fraction * n)))
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed) + (np.uint64(9) << np.uint64(32))))
    idx = gen.permutation(n)[:n_keep]
    kept = np.zeros(n, dtype=bool)
    kept[idx] = True
    return kept.reshape(height, width)


def upsample_naive(cube: ImageCube, factor: int, order: int = 3) -> ImageCube:
    """Baseline band-wise spline upsampling (bicubic by default)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    out = np.stack(
        [ndimage.zoom(band, factor, order=order, mode="nearest", grid_mode=True)
         for band in cube.data]
    )
    return ImageCube(out, wavelengths=cube.wavelengths)
