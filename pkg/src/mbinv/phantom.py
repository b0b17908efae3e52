"""Synthetic ground-truth cubes: smooth random spectra over Voronoi regions.

The output is X = E S with E a bands x m matrix of positive, spectrally
smooth endmembers and S pixelwise abundances (nonnegative, summing to 1),
so the cube has exact rank <= m and piecewise spatial structure with
smoothed transitions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .cubes import ImageCube
from .operators import standard_normal


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 64
    width: int = 64
    bands: int = 31
    n_endmembers: int = 4
    seed: int = 0
    cells_per_endmember: int = 4

    def __post_init__(self):
        if self.n_endmembers > self.bands:
            raise ValueError("n_endmembers must be <= bands")
        if min(self.height, self.width, self.bands, self.n_endmembers) < 1:
            raise ValueError("all dimensions must be >= 1")


def _endmembers(spec: PhantomSpec) -> np.ndarray:
    """Positive band-correlated spectra via cumulative sums of Gaussians."""
    steps = standard_normal((spec.bands, spec.n_endmembers), spec.seed, stream=11)
    walk = np.cumsum(steps, axis=0) / np.sqrt(spec.bands)
    return np.exp(0.5 * walk)


def _abundances(spec: PhantomSpec) -> np.ndarray:
    """(m, height, width) nonnegative maps summing to 1 per pixel."""
    n_cells = max(spec.n_endmembers, spec.cells_per_endmember * spec.n_endmembers)
    gen = np.random.Generator(np.random.Philox(key=np.uint64(spec.seed) + (np.uint64(12) << np.uint64(32))))
    sites = np.stack([
        gen.uniform(0, spec.height, n_cells),
        gen.uniform(0, spec.width, n_cells),
    ], axis=1)
    # each endmember owns at least one cell
    owner = np.concatenate([
        np.arange(spec.n_endmembers),
        gen.integers(0, spec.n_endmembers, n_cells - spec.n_endmembers),
    ])
    yy, xx = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    d2 = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
    labels = owner[np.argmin(d2, axis=-1)]
    s = np.stack([(labels == j).astype(np.float64) for j in range(spec.n_endmembers)])
    s = np.stack([ndimage.uniform_filter(m, size=3, mode="nearest") for m in s])
    return s


def make_phantom(spec: PhantomSpec) -> ImageCube:
    e = _endmembers(spec)
    s = _abundances(spec)
    x = np.tensordot(e, s, axes=(1, 0))
    return ImageCube(x)
