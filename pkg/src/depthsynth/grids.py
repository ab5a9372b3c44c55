"""Masked scalar grids, exemplar mappings, and shared channel weights.

Every image-like quantity in this package (intensity, depth, pyramid
bands, chroma) is a ChannelGrid: a rectangular float field plus a boolean
foreground mask.  Background pixels hold NaN and never enter statistics;
all reductions filter through the mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np
from scipy import ndimage

POSITION_KEY = "position"


class EmptyForegroundError(ValueError):
    """An operation that needs foreground pixels got none."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ChannelGrid:
    """One scalar field with a foreground mask.

    values : (H, W) float64, NaN wherever mask is False
    mask   : (H, W) bool, True = foreground
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 2 or min(values.shape) < 1:
            raise ValueError("grid must be 2-D with at least one pixel")
        if mask.shape != values.shape:
            raise ValueError(f"mask shape {mask.shape} != values shape {values.shape}")
        values = np.where(mask, values, np.nan)
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "mask", _readonly(mask))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def foreground(self) -> np.ndarray:
        """1-D array of foreground values."""
        return self.values[self.mask]

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Dense copy with background replaced by ``fill``."""
        return np.where(self.mask, self.values, fill)

    def with_values(self, values: np.ndarray) -> "ChannelGrid":
        return ChannelGrid(values, self.mask)


def constant_grid(shape, value: float, mask=None) -> ChannelGrid:
    mask = np.ones(shape, bool) if mask is None else mask
    return ChannelGrid(np.full(shape, float(value)), mask)


@dataclass(frozen=True)
class DepthMap:
    """A depth-semantics grid plus its reference-frame tag.

    frame is "raw" until normalized; "centroid-zero" after the foreground
    mean has been removed.  centroid_offset records the total shift that
    has been subtracted so far.
    """

    grid: ChannelGrid
    frame: str = "raw"
    centroid_offset: float = 0.0

    def __post_init__(self):
        if self.frame not in ("raw", "centroid-zero"):
            raise ValueError(f"unknown depth frame {self.frame!r}")
        fg = self.grid.foreground()
        if fg.size and not np.all(np.isfinite(fg)):
            raise ValueError("foreground depths must be finite")

    @property
    def values(self) -> np.ndarray:
        return self.grid.values

    @property
    def mask(self) -> np.ndarray:
        return self.grid.mask


def normalize_depth_frame(d: DepthMap) -> DepthMap:
    """Shift a depth map so its foreground mean is zero.

    Relative depth differences are preserved exactly; idempotent.
    """
    fg = d.grid.foreground()
    if fg.size == 0:
        raise EmptyForegroundError("no object pixels")
    mean = float(fg.mean())
    return DepthMap(
        grid=d.grid.with_values(d.grid.values - mean),
        frame="centroid-zero",
        centroid_offset=d.centroid_offset + mean,
    )


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise EmptyForegroundError("no object pixels")
    return float(xs.mean()), float(ys.mean())


def foreground_centroid(grid: ChannelGrid) -> tuple[float, float]:
    """Unweighted mean (x_c, y_c) of the foreground pixel coordinates."""
    return mask_centroid(grid.mask)


def fill_background_nearest(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace background entries with the nearest foreground value."""
    if not mask.any():
        raise EmptyForegroundError("no object pixels")
    if mask.all():
        return np.asarray(values, float).copy()
    idx = ndimage.distance_transform_edt(~mask, return_distances=False, return_indices=True)
    return np.asarray(values, float)[tuple(idx)]


def nearest_fill_indices(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays such that values[iy, ix] is the nearest-foreground fill."""
    if not mask.any():
        raise EmptyForegroundError("no object pixels")
    if mask.all():
        iy, ix = np.indices(mask.shape)
        return iy, ix
    idx = ndimage.distance_transform_edt(~mask, return_distances=False, return_indices=True)
    return idx[0], idx[1]


def shift_values(values: np.ndarray, dy: int, dx: int, fill=np.nan) -> np.ndarray:
    """Translate an array by integer (dy, dx), padding with ``fill``."""
    out = np.full_like(np.asarray(values, float), fill)
    h, w = out.shape
    ys0, ys1 = max(0, dy), min(h, h + dy)
    xs0, xs1 = max(0, dx), min(w, w + dx)
    if ys0 < ys1 and xs0 < xs1:
        out[ys0:ys1, xs0:xs1] = values[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx]
    return out


def centroid_align_shift(mask_fixed: np.ndarray, mask_moving: np.ndarray) -> tuple[int, int]:
    """Integer (dy, dx) moving ``mask_moving``'s centroid onto ``mask_fixed``'s."""
    xf, yf = mask_centroid(mask_fixed)
    xm, ym = mask_centroid(mask_moving)
    return int(round(yf - ym)), int(round(xf - xm))


def aligned_mean_sq_diff(fixed: ChannelGrid, moving: ChannelGrid) -> float:
    """Mean squared difference on the mask intersection after centroid alignment.

    The moving grid is translated by an integer shift so the two foreground
    centroids coincide; returns inf when the aligned masks do not overlap.
    """
    dy, dx = centroid_align_shift(fixed.mask, moving.mask)
    moved_vals = shift_values(moving.filled(np.nan), dy, dx)
    moved_mask = shift_values(moving.mask.astype(float), dy, dx, fill=0.0) > 0.5
    both = fixed.mask & moved_mask
    if not both.any():
        return float("inf")
    diff = fixed.values[both] - moved_vals[both]
    return float(np.mean(diff * diff))


@dataclass
class MappingExample:
    """An aligned stack of source and target channels for one exemplar view.

    All channels share the same dimensions and mask.  usage_count is the
    only mutable field; the optimizer's assignment step is its sole writer.
    """

    object_id: str
    view: tuple[float, float]
    source_channels: dict[str, ChannelGrid]
    target_channels: dict[str, ChannelGrid]
    usage_count: int = 0

    def __post_init__(self):
        alpha, beta = self.view
        if not (-180.0 <= alpha < 180.0 and -90.0 <= beta <= 90.0):
            raise ValueError(f"view angles {self.view} out of range")
        chans = list(self.source_channels.values()) + list(self.target_channels.values())
        if not chans:
            raise ValueError("example needs at least one channel")
        ref = chans[0]
        for c in chans[1:]:
            if c.shape != ref.shape or not np.array_equal(c.mask, ref.mask):
                raise ValueError("all channels of an example must share dims and mask")

    @property
    def mask(self) -> np.ndarray:
        return next(iter(self.source_channels.values())).mask

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.source_channels.values())).shape

    @property
    def key(self) -> tuple[str, float, float]:
        return (self.object_id, float(self.view[0]), float(self.view[1]))

    def channel(self, name: str) -> ChannelGrid:
        if name in self.source_channels:
            return self.source_channels[name]
        return self.target_channels[name]


@dataclass
class ExampleDatabase:
    """The active working set of mapping examples.

    active_limit caps how many examples may be loaded at once; the wider
    candidate pool lives outside this container.
    """

    examples: list[MappingExample]
    active_limit: int = 12
    source_schema: tuple[str, ...] = ()
    target_schema: tuple[str, ...] = ()

    def __post_init__(self):
        if self.active_limit < 1:
            raise ValueError("active_limit must be positive")
        if not self.source_schema and self.examples:
            self.source_schema = tuple(self.examples[0].source_channels)
        if not self.target_schema and self.examples:
            self.target_schema = tuple(self.examples[0].target_channels)
        self.validate()

    def validate(self):
        if len(self.examples) > self.active_limit:
            raise ValueError(
                f"{len(self.examples)} active examples exceed limit {self.active_limit}")
        for ex in self.examples:
            if tuple(ex.source_channels) != self.source_schema or \
               tuple(ex.target_channels) != self.target_schema:
                raise ValueError(f"example {ex.key} does not conform to the channel schema")

    def __len__(self) -> int:
        return len(self.examples)

    def object_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for ex in self.examples:
            seen.setdefault(ex.object_id, None)
        return list(seen)


@dataclass(frozen=True)
class ChannelWeights:
    """Non-negative per-channel weights, the diagonal of the similarity metric.

    Includes the relative-position pseudo-channel under key "position".
    """

    weights: Mapping[str, float]

    def __post_init__(self):
        w = dict(self.weights)
        if not w:
            raise ValueError("weights must not be empty")
        for k, v in w.items():
            if v < 0:
                raise ValueError(f"weight {k!r} is negative")
        if not any(v > 0 for v in w.values()):
            raise ValueError("at least one weight must be positive")
        object.__setattr__(self, "weights", w)

    def __getitem__(self, key: str) -> float:
        return self.weights[key]

    def get(self, key: str, default: float = 0.0) -> float:
        return self.weights.get(key, default)

    @property
    def position(self) -> float:
        return self.weights.get(POSITION_KEY, 0.0)

    def replaced(self, **updates: float) -> "ChannelWeights":
        w = dict(self.weights)
        w.update(updates)
        return ChannelWeights(w)

    def as_dict(self) -> dict[str, float]:
        return dict(self.weights)
