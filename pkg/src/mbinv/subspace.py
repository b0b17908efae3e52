"""Spectral subspace identification and projections.

The basis comes from an uncentered SVD of the pixel matrix (no mean
removal), so the coefficients carry the DC component.  Column signs are
fixed so the largest-magnitude entry of each column is positive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cubes import ImageCube, cube_to_matrix, matrix_to_cube


@dataclass(frozen=True)
class SpectralBasis:
    v: np.ndarray                 # (bands, dim), orthonormal columns
    singular_values: np.ndarray   # (dim,), descending

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] > v.shape[0]:
            raise ValueError("basis must be bands x dim with dim <= bands")
        gram = v.T @ v
        if not np.allclose(gram, np.eye(v.shape[1]), atol=1e-10):
            raise ValueError("basis columns are not orthonormal")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "singular_values", np.asarray(self.singular_values, dtype=np.float64))

    @property
    def bands(self) -> int:
        return self.v.shape[0]

    @property
    def dim(self) -> int:
        return self.v.shape[1]


def estimate_subspace(hs: ImageCube, dim: int) -> SpectralBasis:
    """Top-``dim`` left singular vectors of the uncentered pixel matrix."""
    m = cube_to_matrix(hs)
    if not (1 <= dim <= min(hs.bands, hs.n_pixels)):
        raise ValueError(f"subspace dim {dim} out of range for {hs.bands}x{hs.n_pixels} data")
    if np.linalg.norm(m) == 0.0:
        raise ValueError("cannot estimate a subspace from an all-zero cube")
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    v = u[:, :dim].copy()
    for j in range(dim):
        k = np.argmax(np.abs(v[:, j]))
        if v[k, j] < 0:
            v[:, j] = -v[:, j]
    return SpectralBasis(v=v, singular_values=s[:dim])


def project(cube: ImageCube, basis: SpectralBasis) -> np.ndarray:
    """Coefficients A = V^T X (dim x pixels)."""
    if cube.bands != basis.bands:
        raise ValueError("cube band count does not match basis")
    return basis.v.T @ cube_to_matrix(cube)


def reconstruct(a: np.ndarray, basis: SpectralBasis, height: int, width: int) -> ImageCube:
    """Cube of V A."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != basis.dim:
        raise ValueError("coefficient matrix must be dim x pixels")
    return matrix_to_cube(basis.v @ a, height, width)
