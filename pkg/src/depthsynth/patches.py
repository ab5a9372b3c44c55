"""Patch feature vectors and weighted nearest-neighbor search.

A feature is the flattened k x k window of every channel in a stack
(channel-major, row-major within the window), each sub-vector scaled by
sqrt(channel weight), followed by two centroid-relative position entries.
Channels flagged ``normalize`` are z-scored per window before weighting,
which makes matching invariant to affine intensity changes.

The index answers weighted-L2 nearest-neighbor queries.  Exact mode is a
chunked GEMM brute-force scan and is the correctness reference; an
optional accelerated mode wraps a kd-tree with a (1+eps) distance bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .grids import nearest_fill_indices

QUERY_PROVENANCE = "query"

_FLAT_VARIANCE = 1e-12  # windows below this variance normalize to zeros


@dataclass(frozen=True)
class StackChannel:
    """One channel of a patch stack; values None marks an absent channel."""

    name: str
    values: np.ndarray | None  # level-resolution array, NaN on background
    weight: float
    normalize: bool = False


@dataclass(frozen=True)
class PatchStack:
    """The aligned channel stack patches are cut from."""

    channels: tuple[StackChannel, ...]
    mask: np.ndarray
    centroid: tuple[float, float]  # (x_c, y_c)
    position_weight: float


@dataclass(frozen=True)
class PatchFeature:
    center: tuple[int, int]  # (x, y)
    vector: np.ndarray
    present: np.ndarray  # per-dim validity
    provenance: str
    level: int
    k: int


@dataclass(frozen=True)
class PatchQueryResult:
    example_id: str
    patch_center: tuple[int, int]  # (x, y)
    distance: float
    target_window: dict[str, np.ndarray] | None = None


class PatchFeatureSet:
    """Vectorized features for all accepted patch centers of one stack."""

    def __init__(self, stack: PatchStack, k: int, provenance: str, level: int):
        h, w = stack.mask.shape
        if k % 2 == 0:
            raise ValueError("patch size k must be odd")
        if not (3 <= k <= 15):
            raise ValueError("patch size k must be in [3, 15]")
        if k > min(h, w):
            raise ValueError(f"patch size {k} exceeds image size {stack.mask.shape}")
        r = k // 2
        self.k = k
        self.level = level
        self.provenance = provenance
        self.channel_names = tuple(c.name for c in stack.channels)

        padded_mask = np.pad(stack.mask.astype(np.float64), r)
        fg_count = sliding_window_view(padded_mask, (k, k)).sum(axis=(2, 3))
        accept = stack.mask & (fg_count >= (k * k + 1) // 2)
        ys, xs = np.nonzero(accept)  # row-major: (y, x) lexicographic
        self.accept = accept
        self.ys = ys
        self.xs = xs
        n = ys.size
        d = k * k * len(stack.channels) + 2
        self.vectors = np.zeros((n, d), np.float64)
        self.present_dims = np.zeros(d, bool)

        if n:
            fill = nearest_fill_indices(stack.mask)
        pos = 0
        for ch in stack.channels:
            sl = slice(pos, pos + k * k)
            if ch.values is not None:
                filledv = np.where(stack.mask, ch.values, 0.0)[fill] if n else None
                padded = np.pad(filledv, r, mode="edge") if n else None
                wins = sliding_window_view(padded, (k, k))[ys, xs].reshape(n, k * k) if n else None
                if n:
                    if ch.normalize:
                        wins = _zscore_rows(wins)
                    self.vectors[:, sl] = np.sqrt(ch.weight) * wins
                self.present_dims[sl] = True
            pos += k * k
        xc, yc = stack.centroid
        sw = np.sqrt(stack.position_weight)
        self.vectors[:, pos] = sw * (xs - xc)
        self.vectors[:, pos + 1] = sw * (ys - yc)
        self.present_dims[pos:pos + 2] = True

    def __len__(self) -> int:
        return self.ys.size

    def __getitem__(self, i: int) -> PatchFeature:
        return PatchFeature(
            center=(int(self.xs[i]), int(self.ys[i])),
            vector=self.vectors[i],
            present=self.present_dims,
            provenance=self.provenance,
            k=self.k,
            level=self.level,
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def _zscore_rows(wins: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per row; near-flat rows become all zeros."""
    mu = wins.mean(axis=1, keepdims=True)
    centered = wins - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    flat = var < _FLAT_VARIANCE
    denom = np.sqrt(np.where(flat, 1.0, var))
    return np.where(flat, 0.0, centered / denom)


def extract_patches(stack: PatchStack, k: int,
                    provenance: str = QUERY_PROVENANCE, level: int = 0) -> PatchFeatureSet:
    """Features for every foreground pixel whose window is at least half foreground."""
    return PatchFeatureSet(stack, k, provenance, level)


@dataclass
class QueryMatches:
    """Batched query result: parallel arrays over the query features."""

    codes: np.ndarray      # index into PatchIndex.example_ids
    ys: np.ndarray
    xs: np.ndarray
    distances: np.ndarray
    flat: np.ndarray       # row index into the concatenated index matrix

    def keys(self, example_ids: Sequence[str]) -> list[tuple[str, int, int]]:
        ids = list(example_ids)
        return [(ids[c], int(y), int(x))
                for c, y, x in zip(self.codes, self.ys, self.xs)]


class PatchIndex:
    """Weighted nearest-neighbor search over database patch features.

    Feature sets are concatenated in ascending example-id order so that
    first-hit argmin realizes the (example_id, y, x) tie-break.  Queries
    with absent channels are answered over the present dimensions only.
    """

    def __init__(self, feature_sets: Sequence[PatchFeatureSet], mode: str = "exact",
                 epsilon: float = 0.0, target_windows=None, chunk: int = 256):
        sets = sorted(feature_sets, key=lambda s: s.provenance)
        if not sets or all(len(s) == 0 for s in sets):
            raise ValueError("cannot index an empty feature collection")
        dims = {s.vectors.shape[1] for s in sets}
        if len(dims) != 1:
            raise ValueError(f"mixed feature vector lengths: {sorted(dims)}")
        if mode not in ("exact", "approx"):
            raise ValueError(f"unknown index mode {mode!r}")
        for s in sets:
            if not s.present_dims.all():
                raise ValueError("database features must have every channel present")
        self.mode = mode
        self.epsilon = float(epsilon)
        self.example_ids = [s.provenance for s in sets]
        self.k = sets[0].k
        self.vectors = np.concatenate([s.vectors for s in sets], axis=0)
        self.codes = np.concatenate(
            [np.full(len(s), i, np.int32) for i, s in enumerate(sets)])
        self.ys = np.concatenate([s.ys for s in sets]).astype(np.int32)
        self.xs = np.concatenate([s.xs for s in sets]).astype(np.int32)
        self.target_windows = target_windows  # example_id -> {name: padded array}
        self._chunk = chunk
        self._cache: dict[tuple, tuple] = {}
        self._trees: dict[tuple, cKDTree] = {}

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def _signature(self, present: np.ndarray):
        return tuple(np.flatnonzero(~present)) if not present.all() else ()

    def _submatrix(self, sig):
        got = self._cache.get(sig)
        if got is None:
            mat = self.vectors if sig == () else np.delete(self.vectors, list(sig), axis=1)
            sq = np.einsum("ij,ij->i", mat, mat)
            got = (mat, sq)
            self._cache[sig] = got
        return got

    def query_batch(self, qset: PatchFeatureSet) -> QueryMatches:
        if qset.vectors.shape[1] != self.vectors.shape[1]:
            raise ValueError("query feature length does not match index")
        sig = self._signature(qset.present_dims)
        q = qset.vectors if sig == () else qset.vectors[:, qset.present_dims]
        if self.mode == "approx":
            idx = self._approx_query(sig, q)
        else:
            idx = self._exact_query(sig, q)
        mat, _ = self._submatrix(sig)
        diff = q - mat[idx]
        dist = np.einsum("ij,ij->i", diff, diff)
        return QueryMatches(self.codes[idx], self.ys[idx], self.xs[idx],
                            np.maximum(dist, 0.0), idx)

    def _exact_query(self, sig, q: np.ndarray) -> np.ndarray:
        mat, sq = self._submatrix(sig)
        n = q.shape[0]
        out = np.empty(n, np.int64)
        for lo in range(0, n, self._chunk):
            hi = min(lo + self._chunk, n)
            block = q[lo:hi]
            d2 = sq[None, :] - 2.0 * (block @ mat.T)
            out[lo:hi] = np.argmin(d2, axis=1)
        return out

    def _approx_query(self, sig, q: np.ndarray) -> np.ndarray:
        tree = self._trees.get(sig)
        if tree is None:
            mat, _ = self._submatrix(sig)
            tree = cKDTree(mat)
            self._trees[sig] = tree
        _, idx = tree.query(q, k=1, eps=self.epsilon)
        return np.atleast_1d(idx)

    def query_one(self, feature: PatchFeature) -> PatchQueryResult:
        single = _SingleFeatureSet(feature)
        m = self.query_batch(single)
        code, y, x = int(m.codes[0]), int(m.ys[0]), int(m.xs[0])
        example_id = self.example_ids[code]
        window = None
        if self.target_windows is not None:
            r = self.k // 2
            window = {name: np.array(arr[y:y + 2 * r + 1, x:x + 2 * r + 1])
                      for name, arr in self.target_windows[example_id].items()}
        return PatchQueryResult(example_id, (x, y), float(m.distances[0]), window)


class _SingleFeatureSet:
    """Adapter presenting one PatchFeature with the batch interface."""

    def __init__(self, feature: PatchFeature):
        self.vectors = feature.vector[None, :]
        self.present_dims = feature.present
        self.k = feature.k


def build_index(feature_sets, mode: str = "exact", epsilon: float = 0.0,
                target_windows=None) -> PatchIndex:
    if isinstance(feature_sets, PatchFeatureSet):
        feature_sets = [feature_sets]
    return PatchIndex(feature_sets, mode=mode, epsilon=epsilon,
                      target_windows=target_windows)


def query_nearest(index: PatchIndex, q: PatchFeature) -> PatchQueryResult:
    """Minimal weighted-L2 entry; ties fall to (example_id, y, x) order."""
    return index.query_one(q)
