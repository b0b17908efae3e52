"""Core value types: image cubes, masks and observation pairs.

A cube stores a ``(bands, height, width)`` float64 array.  Pixel order is
row-major over (row, column) everywhere; ``cube_to_matrix`` flattens each
band accordingly so column ``n`` of the matrix is the spectrum of pixel
``n``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np


def _as_float64(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite samples")
    return arr


@dataclass(frozen=True)
class ImageCube:
    """Multiband image with ``bands x height x width`` float64 samples."""

    data: np.ndarray
    wavelengths: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        arr = _as_float64(self.data, "cube data")
        if arr.ndim != 3:
            raise ValueError(f"cube data must be 3-D (bands, height, width), got {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError("all cube dimensions must be >= 1")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        if self.wavelengths is not None:
            wl = tuple(float(w) for w in self.wavelengths)
            if len(wl) != arr.shape[0]:
                raise ValueError("wavelengths length must equal band count")
            object.__setattr__(self, "wavelengths", wl)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def allclose(self, other: "ImageCube", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return self.data.shape == other.data.shape and np.allclose(
            self.data, other.data, atol=atol, rtol=rtol
        )


def cube_to_matrix(cube: ImageCube) -> np.ndarray:
    """Return the B x N pixel matrix (column n = spectrum of pixel n)."""
    return cube.data.reshape(cube.bands, cube.n_pixels).copy()


def matrix_to_cube(m: np.ndarray, height: int, width: int,
                   wavelengths: Optional[Sequence[float]] = None) -> ImageCube:
    """Inverse of :func:`cube_to_matrix`."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if m.shape[1] != height * width:
        raise ValueError(
            f"matrix has {m.shape[1]} columns, expected height*width = {height * width}"
        )
    return ImageCube(m.reshape(m.shape[0], height, width), wavelengths=wavelengths)


@dataclass(frozen=True)
class PixelMask:
    """Boolean column selector over pixels (row-major)."""

    kept: np.ndarray  # (height, width) bool

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=bool)
        if kept.ndim != 2:
            raise ValueError("pixel mask must be 2-D")
        if not kept.any():
            raise ValueError("pixel mask keeps no pixel")
        kept = kept.copy()
        kept.flags.writeable = False
        object.__setattr__(self, "kept", kept)

    @property
    def height(self) -> int:
        return self.kept.shape[0]

    @property
    def width(self) -> int:
        return self.kept.shape[1]


@dataclass(frozen=True)
class BandMask:
    """Boolean row selector over bands."""

    kept: np.ndarray  # (bands,) bool

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=bool)
        if kept.ndim != 1:
            raise ValueError("band mask must be 1-D")
        if not kept.any():
            raise ValueError("band mask keeps no band")
        kept = kept.copy()
        kept.flags.writeable = False
        object.__setattr__(self, "kept", kept)

    @property
    def bands(self) -> int:
        return self.kept.shape[0]


@dataclass(frozen=True)
class EntryMask:
    """Boolean selector per (band, pixel) entry.

    Strictly more general than a separable band/pixel mask pair, so
    stripe-noise patterns whose corrupted columns differ across bands are
    representable.
    """

    kept: np.ndarray  # (bands, height, width) bool

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=bool)
        if kept.ndim != 3:
            raise ValueError("entry mask must be 3-D (bands, height, width)")
        if not kept.any():
            raise ValueError("entry mask keeps no entry")
        kept = kept.copy()
        kept.flags.writeable = False
        object.__setattr__(self, "kept", kept)

    @property
    def bands(self) -> int:
        return self.kept.shape[0]

    @property
    def height(self) -> int:
        return self.kept.shape[1]

    @property
    def width(self) -> int:
        return self.kept.shape[2]

    @classmethod
    def from_separable(cls, band_mask: BandMask, pixel_mask: PixelMask) -> "EntryMask":
        """Entry (b, n) is kept iff both selectors keep b and n."""
        kept = band_mask.kept[:, None, None] & pixel_mask.kept[None, :, :]
        return cls(kept)

    @classmethod
    def all_kept(cls, bands: int, height: int, width: int) -> "EntryMask":
        return cls(np.ones((bands, height, width), dtype=bool))

    def flat(self) -> np.ndarray:
        """(bands, n_pixels) boolean view in canonical pixel order."""
        return self.kept.reshape(self.bands, self.height * self.width)


@dataclass(frozen=True)
class MaskedObservation:
    """Kept entries of a cube in canonical (band-major) order."""

    values: np.ndarray            # (n_kept,)
    band_index: np.ndarray        # (n_kept,)
    pixel_index: np.ndarray       # (n_kept,) row-major pixel indices
    mask: EntryMask


def apply_entry_mask(cube: ImageCube, mask: EntryMask) -> MaskedObservation:
    """List kept entries of ``cube`` with their (band, pixel) indices."""
    if (cube.bands, cube.height, cube.width) != (mask.bands, mask.height, mask.width):
        raise ValueError(
            f"mask shape {(mask.bands, mask.height, mask.width)} does not match "
            f"cube shape {(cube.bands, cube.height, cube.width)}"
        )
    flat_mask = mask.flat()
    m = cube_to_matrix(cube)
    band_idx, pix_idx = np.nonzero(flat_mask)
    return MaskedObservation(
        values=m[band_idx, pix_idx], band_index=band_idx, pixel_index=pix_idx, mask=mask
    )


def scatter_masked(obs: MaskedObservation, fill: float = 0.0) -> ImageCube:
    """Rebuild a cube from kept entries, writing ``fill`` elsewhere."""
    mask = obs.mask
    m = np.full((mask.bands, mask.height * mask.width), fill, dtype=np.float64)
    m[obs.band_index, obs.pixel_index] = obs.values
    return matrix_to_cube(m, mask.height, mask.width)


@dataclass(frozen=True)
class ObservationSet:
    """Pair of complementary observations: high-spectral hs, high-spatial hr."""

    hs: ImageCube
    hr: ImageCube
    hs_mask: Optional[EntryMask] = None

    def __post_init__(self):
        if self.hs.bands < self.hr.bands:
            raise ValueError("hs must have at least as many bands as hr")
        if self.hs_mask is not None:
            shape = (self.hs.bands, self.hs.height, self.hs.width)
            mshape = (self.hs_mask.bands, self.hs_mask.height, self.hs_mask.width)
            if shape != mshape:
                raise ValueError(f"hs mask shape {mshape} does not match hs {shape}")

    @property
    def target_height(self) -> int:
        return self.hr.height

    @property
    def target_width(self) -> int:
        return self.hr.width
