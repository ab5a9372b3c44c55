"""Gaussian and Laplacian pyramids for masked grids.

The smoothing kernel is the separable 5-tap binomial (1,4,6,4,1)/16.
Filtering is mask-renormalized: background never bleeds into foreground,
and kernel weights are rescaled over the foreground taps near object
boundaries.  Masks at coarser levels are plain decimations of the input
mask, so a Laplacian pyramid reconstructs its input exactly on the
foreground.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .grids import ChannelGrid

_SMOOTH = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0

GAUSSIAN = "gaussian"
LAPLACIAN = "laplacian"


@dataclass(frozen=True)
class Pyramid:
    """Ordered levels from finest (0) to coarsest, each halving the size.

    A Laplacian pyramid stores band-pass levels plus the residual Gaussian
    base as its coarsest entry.
    """

    kind: str
    levels: tuple[ChannelGrid, ...]

    def __post_init__(self):
        if self.kind not in (GAUSSIAN, LAPLACIAN):
            raise ValueError(f"unknown pyramid kind {self.kind!r}")
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        object.__setattr__(self, "levels", tuple(self.levels))
        for lo, hi in zip(self.levels, self.levels[1:]):
            want = (-(-lo.height // 2), -(-lo.width // 2))
            if hi.shape != want:
                raise ValueError(f"level shape {hi.shape} != expected {want}")

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def _smooth2(arr: np.ndarray) -> np.ndarray:
    """Separable binomial blur with edge-replicated padding."""
    out = correlate1d(arr, _SMOOTH, axis=0, mode="nearest")
    return correlate1d(out, _SMOOTH, axis=1, mode="nearest")


def masked_blur(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Normalized-convolution blur: background excluded, weights renormalized.

    Returns 0 where no foreground falls under the kernel support.
    """
    v = np.where(mask, values, 0.0)
    m = mask.astype(np.float64)
    num = _smooth2(v)
    den = _smooth2(m)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def _check_levels(grid: ChannelGrid, n_levels: int):
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    need = 2 ** (n_levels - 1)
    if min(grid.shape) < need:
        raise ValueError(
            f"grid {grid.shape} too small for {n_levels} levels (needs >= {need} per side)")


def build_gaussian(grid: ChannelGrid, n_levels: int) -> Pyramid:
    """Blur-and-decimate pyramid; level 0 is the input itself."""
    _check_levels(grid, n_levels)
    levels = [grid]
    for _ in range(n_levels - 1):
        cur = levels[-1]
        blurred = masked_blur(cur.values, cur.mask)
        levels.append(ChannelGrid(blurred[::2, ::2], cur.mask[::2, ::2]))
    return Pyramid(GAUSSIAN, tuple(levels))


def upsample(values: np.ndarray, mask: np.ndarray, out_shape, out_mask: np.ndarray) -> np.ndarray:
    """Zero-insert then mask-normalized blur up to ``out_shape``.

    Deterministic in its inputs, which is what makes Laplacian
    reconstruction exact.  Pixels with no coarse support get 0; the band
    at such pixels simply absorbs the full signal.
    """
    num = np.zeros(out_shape, np.float64)
    den = np.zeros(out_shape, np.float64)
    num[::2, ::2] = np.where(mask, values, 0.0)
    den[::2, ::2] = mask
    num = _smooth2(num)
    den = _smooth2(den)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return np.where(out_mask, out, np.nan)


def build_laplacian(grid: ChannelGrid, n_levels: int) -> Pyramid:
    """Band-pass levels (gaussian L minus upsampled gaussian L+1) plus base."""
    gauss = build_gaussian(grid, n_levels)
    levels = []
    for L in range(n_levels - 1):
        lo, hi = gauss.levels[L], gauss.levels[L + 1]
        up = upsample(hi.values, hi.mask, lo.shape, lo.mask)
        levels.append(ChannelGrid(lo.values - up, lo.mask))
    levels.append(gauss.levels[-1])
    return Pyramid(LAPLACIAN, tuple(levels))


def collapse(p: Pyramid) -> ChannelGrid:
    """Upsample-and-add from the coarsest level down to level 0."""
    if p.kind != LAPLACIAN:
        raise ValueError("can only collapse a laplacian pyramid")
    acc = p.levels[-1]
    for band in reversed(p.levels[:-1]):
        up = upsample(acc.values, acc.mask, band.shape, band.mask)
        acc = ChannelGrid(up + band.values, band.mask)
    return acc
