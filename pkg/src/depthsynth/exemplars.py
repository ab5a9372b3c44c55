"""On-the-fly database maintenance: view re-estimation and object replacement.

Between optimization iterations the active example set is revised in two
ways: the working camera views move toward the usage-weighted mean of the
currently used angles (snapped to the nearest pre-rendered view), and the
least-referenced objects are swapped for pool objects whose depth best
matches the current estimate after centroid alignment.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grids import (ChannelGrid, ExampleDatabase, MappingExample,
                    aligned_mean_sq_diff)

View = tuple[float, float]


@dataclass
class ViewState:
    """Active camera views with usage tallies plus the pre-rendered grid."""

    active_views: list[View]
    usage: list[float]
    available_views: list[View]
    merge_threshold: float = 10.0

    def __post_init__(self):
        if not self.active_views:
            raise ValueError("active_views must be non-empty")
        if len(self.usage) != len(self.active_views):
            raise ValueError("usage must align with active_views")
        if any(u < 0 for u in self.usage):
            raise ValueError("usage tallies must be non-negative")
        for a, b in list(self.active_views) + list(self.available_views):
            if abs(a) > 90 or abs(b) > 90:
                raise ValueError(
                    f"view ({a}, {b}) outside the +-90 degree window assumed for "
                    "raw-angle averaging")


@dataclass
class ViewUpdate:
    state: ViewState
    mean_view: View | None
    snapped_view: View | None
    dropped_view: View | None
    merged: bool
    changed: bool


def _angle_dist(a: View, b: View) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def snap_to_available(view: View, available: list[View]) -> View:
    """Nearest pre-rendered view; ties go to the lexicographically smallest."""
    if not available:
        return view
    best = min(sorted(available), key=lambda v: _angle_dist(v, view))
    return best


def update_views(vs: ViewState, usage) -> ViewUpdate:
    """Move the view set toward the usage-weighted mean angle.

    The least-used view is dropped and the usage-weighted mean view
    (snapped to the nearest available one) is added, unless the mean falls
    within merge_threshold of a surviving view, in which case no view is
    added and the caller should grow the object count instead.
    """
    usage = [float(u) for u in usage]
    if len(usage) != len(vs.active_views):
        raise ValueError("usage must cover all active views")
    if len(vs.active_views) == 1:
        return ViewUpdate(vs, None, None, None, merged=False, changed=False)

    views = np.asarray(vs.active_views, float)
    w = np.asarray(usage, float)
    total = w.sum()
    mean = tuple(views.mean(axis=0)) if total == 0 else tuple((views * w[:, None]).sum(axis=0) / total)

    drop_i = int(np.argmin(w))  # first-listed wins ties
    dropped = vs.active_views[drop_i]
    survivors = [v for i, v in enumerate(vs.active_views) if i != drop_i]
    surv_usage = [u for i, u in enumerate(usage) if i != drop_i]

    snapped = snap_to_available(mean, vs.available_views)
    merged = any(_angle_dist(snapped, s) <= vs.merge_threshold for s in survivors)
    new_views = survivors if merged else survivors + [snapped]
    new_usage = surv_usage if merged else surv_usage + [0.0]
    changed = sorted(new_views) != sorted(vs.active_views)
    state = ViewState(active_views=new_views, usage=new_usage,
                      available_views=vs.available_views,
                      merge_threshold=vs.merge_threshold)
    return ViewUpdate(state, mean, snapped, dropped, merged=merged, changed=changed)


def replace_objects(active_objects: list[str], usage: dict[str, float],
                    candidate_residuals: dict[str, float], drop_count: int,
                    admit_count: int | None = None,
                    limit_objects: int | None = None) -> list[str]:
    """Drop the least-referenced objects, admit the best depth-matched ones.

    candidate_residuals maps every pool object id to its aligned depth
    residual against the current estimate.  Dropped objects remain
    candidates, so a genuinely best object is simply retained.
    """
    if drop_count >= len(active_objects) and active_objects:
        raise ValueError("cannot drop every active object")
    if admit_count is None:
        admit_count = drop_count
    ranked = sorted(active_objects, key=lambda oid: (usage.get(oid, 0.0), oid))
    dropped = set(ranked[:drop_count])
    kept = [oid for oid in active_objects if oid not in dropped]

    candidates = {oid: r for oid, r in candidate_residuals.items() if oid not in kept}
    order = sorted(candidates, key=lambda oid: (candidates[oid], oid))
    admitted = order[:admit_count]
    if len(admitted) < admit_count and not order:
        warnings.warn("candidate pool exhausted; keeping current active set")
        return list(active_objects)
    new = kept + admitted
    if limit_objects is not None:
        new = new[:limit_objects]
    return sorted(new)


def update_objects(db: ExampleDatabase, current_depth: ChannelGrid | "DepthMap",
                   pool: list[MappingExample], drop_count: int,
                   depth_channel: str | None = None) -> tuple[ExampleDatabase, bool]:
    """Replace the least-referenced active objects with best depth matches.

    The residual of a pool object is the minimum, over its mappings, of
    the centroid-aligned mean squared difference between its depth channel
    and the current estimate.  Active size is preserved; if the pool holds
    no other objects the database is returned unchanged with a warning
    flag.
    """
    if hasattr(current_depth, "grid"):
        current_depth = current_depth.grid
    if depth_channel is None:
        depth_channel = db.target_schema[0]
    active_ids = db.object_ids()
    if drop_count >= len(active_ids):
        raise ValueError("drop_count must leave at least one active object")

    usage: dict[str, float] = {oid: 0.0 for oid in active_ids}
    for ex in db.examples:
        usage[ex.object_id] += ex.usage_count

    residuals: dict[str, float] = {}
    for ex in pool:
        r = aligned_mean_sq_diff(current_depth, ex.channel(depth_channel))
        prev = residuals.get(ex.object_id)
        if prev is None or r < prev:
            residuals[ex.object_id] = r

    if set(residuals) <= set(active_ids):
        warnings.warn("candidate pool exhausted; keeping current active set")
        return db, True

    new_ids = replace_objects(active_ids, usage, residuals, drop_count)
    active_views = sorted({(float(ex.view[0]), float(ex.view[1])) for ex in db.examples})
    by_key = {ex.key: ex for ex in pool}
    new_examples = []
    for oid in new_ids:
        for v in active_views:
            ex = by_key.get((oid, v[0], v[1]))
            if ex is not None:
                new_examples.append(ex)
    out = ExampleDatabase(new_examples, active_limit=db.active_limit,
                          source_schema=db.source_schema, target_schema=db.target_schema)
    return out, False
