"""Hard-EM patch synthesis engine.

Each pyramid level, coarse to fine, alternates two steps until the patch
assignments stop changing: an assignment step matching every accepted
query patch to its nearest database patch over the active channel stack
(source channels, the current target estimate, and relative position),
and an update step re-estimating each target pixel as the
Gaussian-weighted mean of the values proposed by all covering matched
windows.  Targets are synthesized as Laplacian bands (the Gaussian base
at the coarsest level) and the output is the collapsed band stack.

The logged objective is the sum over patches of log-similarity, i.e.
-0.5 times the total weighted squared distance of the current
assignments, evaluated after each update step.  With plain-mean
aggregation (sigma_agg = inf) this is non-decreasing within a level for
a fixed database.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import exemplars, pyramid
from .grids import (ChannelGrid, ChannelWeights, EmptyForegroundError,
                    MappingExample, aligned_mean_sq_diff,
                    fill_background_nearest, mask_centroid)
from .patches import (PatchFeatureSet, PatchIndex, PatchStack, QueryMatches,
                      StackChannel, build_index, extract_patches)

GAUSSIAN_REP = "gaussian"
BAND_REP = "band"


@dataclass(frozen=True)
class MatchChannelDef:
    """A source-side matching channel: a pyramid representation of a base channel."""

    base: str
    rep: str  # gaussian | band
    weight_key: str
    normalize: bool = False


@dataclass(frozen=True)
class TargetChannelDef:
    """A synthesized channel; matched on its current full-domain estimate."""

    base: str
    weight_key: str


@dataclass(frozen=True)
class SynthesisSchema:
    name: str
    match_channels: tuple[MatchChannelDef, ...]
    targets: tuple[TargetChannelDef, ...]

    def source_bases(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for mc in self.match_channels:
            seen.setdefault(mc.base, None)
        return tuple(seen)

    def target_bases(self) -> tuple[str, ...]:
        return tuple(t.base for t in self.targets)


@dataclass
class SynthesisConfig:
    """Knobs of the per-level hard-EM loop."""

    levels: int = 3
    patch_sizes: tuple[int, ...] = (5, 7, 9)  # coarsest -> finest
    max_iters: int = 20
    sigma_agg: float | None = None  # None -> k/3; math.inf -> plain mean
    change_tol: float = 1e-4  # mean |delta| threshold, relative to fg range
    weights: ChannelWeights | None = None
    update_exemplars: bool = False
    active_objects: int = 4
    active_limit: int = 12
    replace_fraction: float = 0.25
    merge_threshold: float = 10.0
    seed_views: tuple[tuple[float, float], ...] | None = None
    max_seed_views: int = 4
    index_mode: str = "exact"
    epsilon: float = 0.0
    record_assignments: bool = False
    seed: int = 0

    def patch_size(self, level: int) -> int:
        sizes = self.patch_sizes
        if len(sizes) != self.levels:
            raise ValueError(f"{len(sizes)} patch sizes for {self.levels} levels")
        return int(sizes[self.levels - 1 - level])

    def sigma_for(self, k: int) -> float:
        return float(k) / 3.0 if self.sigma_agg is None else float(self.sigma_agg)

    def snapshot(self) -> dict:
        d = {k: v for k, v in self.__dict__.items()}
        d["weights"] = self.weights.as_dict() if self.weights else None
        d["sigma_agg"] = None if self.sigma_agg is None else (
            "inf" if math.isinf(self.sigma_agg) else self.sigma_agg)
        return d


@dataclass
class AssignmentField:
    """Per accepted query patch: the matched database patch (the hidden variable)."""

    centers: np.ndarray        # (N, 2) int, (x, y)
    example_ids: np.ndarray    # (N,) object dtype, mapping uid strings
    match_centers: np.ndarray  # (N, 2) int, (x, y)
    distances: np.ndarray      # weighted squared L2
    iteration: int
    level: int = 0

    def __len__(self):
        return len(self.distances)

    def same_assignments(self, other: "AssignmentField") -> bool:
        return (len(self) == len(other)
                and bool(np.array_equal(self.centers, other.centers))
                and bool(np.array_equal(self.example_ids, other.example_ids))
                and bool(np.array_equal(self.match_centers, other.match_centers)))


@dataclass
class IterationRecord:
    level: int
    iteration: int
    plausibility_log: float
    changed_assignments: int
    mean_abs_change: float
    n_patches: int
    db_size: int
    db_revision: int
    active_objects: tuple[str, ...]
    active_views: tuple[tuple[float, float], ...]

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["active_objects"] = list(self.active_objects)
        d["active_views"] = [list(v) for v in self.active_views]
        return json.dumps(d)


@dataclass
class SynthesisResult:
    targets: dict[str, ChannelGrid]
    converged: bool
    history: list[IterationRecord]
    assignment_log: list[AssignmentField]
    active_keys: list[tuple[str, float, float]]
    config_snapshot: dict

    def plausibility_by_level(self) -> dict[int, list[float]]:
        out: dict[int, list[float]] = {}
        for rec in self.history:
            out.setdefault(rec.level, []).append(rec.plausibility_log)
        return out


def mapping_uid(example: MappingExample) -> str:
    a, b = example.view
    return f"{example.object_id}@{a:g},{b:g}"


# ---------------------------------------------------------------------------
# per-level cached exemplar data


class _LevelData:
    """Per-level arrays of one example: matching channels and synthesis bands."""

    __slots__ = ("mask", "centroid", "match", "target_gauss", "synth_band")

    def __init__(self):
        self.match: dict[str, np.ndarray] = {}
        self.target_gauss: dict[str, np.ndarray] = {}
        self.synth_band: dict[str, np.ndarray] = {}


def _channel_reps(example_channels: dict[str, ChannelGrid], schema: SynthesisSchema,
                  levels: int, query_side: bool) -> list[_LevelData]:
    """Build gaussian/laplacian representations for every needed base channel."""
    need_gauss = set()
    need_band = set()
    for mc in schema.match_channels:
        (need_gauss if mc.rep == GAUSSIAN_REP else need_band).add(mc.base)
    gauss_pyrs = {}
    lap_pyrs = {}
    for base in sorted(need_gauss | need_band):
        grid = example_channels[base]
        gauss_pyrs[base] = pyramid.build_gaussian(grid, levels)
        if base in need_band:
            lap_pyrs[base] = pyramid.build_laplacian(grid, levels)
    target_gauss = {}
    target_lap = {}
    if not query_side:
        for tc in schema.targets:
            grid = example_channels[tc.base]
            target_gauss[tc.base] = pyramid.build_gaussian(grid, levels)
            target_lap[tc.base] = pyramid.build_laplacian(grid, levels)

    ref = next(iter(example_channels.values()))
    mask_pyr = pyramid.build_gaussian(ref.with_values(np.zeros(ref.shape)), levels)
    out = []
    for L in range(levels):
        ld = _LevelData()
        ld.mask = mask_pyr.levels[L].mask
        ld.centroid = mask_centroid(ld.mask) if ld.mask.any() else (0.0, 0.0)
        for mc in schema.match_channels:
            key = f"{mc.base}:{mc.rep}"
            pyr = gauss_pyrs[mc.base] if mc.rep == GAUSSIAN_REP else lap_pyrs[mc.base]
            ld.match[key] = pyr.levels[L].values
        for tc in schema.targets:
            if not query_side:
                ld.target_gauss[tc.base] = target_gauss[tc.base].levels[L].values
                ld.synth_band[tc.base] = target_lap[tc.base].levels[L].values
        out.append(ld)
    return out


class _ExemplarCache:
    """Lazily built per-level data for pool examples."""

    def __init__(self, schema: SynthesisSchema, levels: int):
        self.schema = schema
        self.levels = levels
        self._data: dict[tuple, list[_LevelData]] = {}

    def get(self, example: MappingExample) -> list[_LevelData]:
        key = example.key
        if key not in self._data:
            channels = dict(example.source_channels)
            channels.update(example.target_channels)
            self._data[key] = _channel_reps(channels, self.schema, self.levels,
                                            query_side=False)
        return self._data[key]


# ---------------------------------------------------------------------------
# spec-level operations


def build_stack(level_data: _LevelData, schema: SynthesisSchema, weights: ChannelWeights,
                estimates: dict[str, np.ndarray | None]) -> PatchStack:
    """Assemble the matching channel stack for one side at one level."""
    channels = []
    for mc in schema.match_channels:
        key = f"{mc.base}:{mc.rep}"
        channels.append(StackChannel(key, level_data.match[key],
                                     weights[mc.weight_key], mc.normalize))
    for tc in schema.targets:
        channels.append(StackChannel(f"est:{tc.base}", estimates.get(tc.base),
                                     weights[tc.weight_key], False))
    return PatchStack(tuple(channels), level_data.mask, level_data.centroid,
                      weights.position)


def get_similar_patches(qset: PatchFeatureSet, index: PatchIndex,
                        examples_by_uid: dict[str, MappingExample] | None = None,
                        iteration: int = 0, level: int = 0) -> tuple[QueryMatches, AssignmentField]:
    """Hard E-step: nearest database patch for every accepted query patch.

    Increments usage_count of each matched example once per matched patch.
    """
    if index is None or len(index) == 0:
        raise ValueError("empty database")
    matches = index.query_batch(qset)
    counts = np.bincount(matches.codes, minlength=len(index.example_ids))
    if examples_by_uid is not None:
        for code, n in enumerate(counts):
            if n:
                examples_by_uid[index.example_ids[code]].usage_count += int(n)
    uid_arr = np.array(index.example_ids, dtype=object)[matches.codes]
    assign = AssignmentField(
        centers=np.stack([qset.xs, qset.ys], axis=1),
        example_ids=uid_arr,
        match_centers=np.stack([matches.xs, matches.ys], axis=1),
        distances=matches.distances,
        iteration=iteration,
        level=level,
    )
    return matches, assign


def update_depths(matches: QueryMatches, query_ys: np.ndarray, query_xs: np.ndarray,
                  band_stack: np.ndarray, mask: np.ndarray, k: int, sigma_agg: float,
                  prev: np.ndarray | None = None) -> np.ndarray:
    """M-step: per-pixel Gaussian-weighted mean of all covering estimates.

    band_stack is (n_examples, H + 2r, W + 2r), the synthesis-target values
    of each database example padded by r = k // 2 so matched windows can be
    gathered without bounds checks.  Pixels covered by no accepted window
    inherit ``prev`` (or 0).  Background stays NaN.
    """
    h, w = mask.shape
    r = k // 2
    acc = np.zeros((h, w))
    wacc = np.zeros((h, w))
    two_sigma_sq = 2.0 * sigma_agg * sigma_agg
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            g = 1.0 if math.isinf(sigma_agg) else math.exp(-(dy * dy + dx * dx) / two_sigma_sq)
            py = query_ys + dy
            px = query_xs + dx
            ok = (py >= 0) & (py < h) & (px >= 0) & (px < w)
            if not ok.any():
                continue
            vals = band_stack[matches.codes[ok], matches.ys[ok] + dy + r,
                              matches.xs[ok] + dx + r]
            np.add.at(acc, (py[ok], px[ok]), g * vals)
            np.add.at(wacc, (py[ok], px[ok]), g)
    covered = wacc > 0
    base = np.zeros((h, w)) if prev is None else np.where(mask, prev, 0.0)
    out = np.where(covered, acc / np.where(covered, wacc, 1.0), base)
    return np.where(mask, out, np.nan)


# ---------------------------------------------------------------------------
# the full coarse-to-fine loop


class _ActiveSet:
    """Active examples plus the pool they are drawn from."""

    def __init__(self, pool: Sequence[MappingExample], cfg: SynthesisConfig):
        if not pool:
            raise ValueError("empty database")
        self.pool = list(pool)
        self.by_key = {ex.key: ex for ex in self.pool}
        object_ids = sorted({ex.object_id for ex in self.pool})
        views = sorted({(float(ex.view[0]), float(ex.view[1])) for ex in self.pool})
        if cfg.seed_views is not None:
            seed_views = [tuple(map(float, v)) for v in cfg.seed_views]
        elif len(views) <= cfg.max_seed_views:
            seed_views = views
        else:
            picks = np.linspace(0, len(views) - 1, cfg.max_seed_views).round().astype(int)
            seed_views = [views[i] for i in sorted(set(picks.tolist()))]
        n_obj = min(cfg.active_objects, len(object_ids))
        max_views = max(1, cfg.active_limit // max(1, n_obj))
        self.views = list(seed_views[:max_views])
        self.objects = list(object_ids[:n_obj])
        self.available_views = views
        self.limit = cfg.active_limit
        self.revision = 0

    def examples(self) -> list[MappingExample]:
        out = []
        for oid in self.objects:
            for v in self.views:
                ex = self.by_key.get((oid, v[0], v[1]))
                if ex is not None:
                    out.append(ex)
        return out

    def pool_objects(self) -> list[str]:
        return sorted({ex.object_id for ex in self.pool})

    def mappings_of(self, oid: str) -> list[MappingExample]:
        return [ex for ex in self.pool if ex.object_id == oid]


def _query_level_data(query: dict[str, ChannelGrid], schema: SynthesisSchema,
                      levels: int) -> list[_LevelData]:
    return _channel_reps(query, schema, levels, query_side=True)


def estimate(query: dict[str, ChannelGrid], pool: Sequence[MappingExample],
             schema: SynthesisSchema, cfg: SynthesisConfig) -> SynthesisResult:
    """Coarse-to-fine hard-EM synthesis of the schema's target channels.

    The query must supply every source base channel, aligned and scaled to
    the database convention.  Returns the collapsed target grids plus the
    per-iteration diagnostics; converged=False if any level ran out of
    iterations.
    """
    weights = cfg.weights
    if weights is None:
        raise ValueError("config must carry channel weights")
    for base in schema.source_bases():
        if base not in query:
            raise ValueError(f"query is missing source channel {base!r}")
    if not next(iter(query.values())).mask.any():
        raise EmptyForegroundError("no object pixels")

    active = _ActiveSet(pool, cfg)
    cache = _ExemplarCache(schema, cfg.levels)
    qlevels = _query_level_data(query, schema, cfg.levels)

    history: list[IterationRecord] = []
    assignment_log: list[AssignmentField] = []
    bands: dict[str, list[ChannelGrid | None]] = {t.base: [None] * cfg.levels
                                                  for t in schema.targets}
    gauss_est: dict[str, np.ndarray | None] = {t.base: None for t in schema.targets}
    converged_all = True

    for level in range(cfg.levels - 1, -1, -1):
        k = cfg.patch_size(level)
        sigma = cfg.sigma_for(k)
        coarsest = level == cfg.levels - 1
        qld = qlevels[level]
        if not qld.mask.any():
            raise EmptyForegroundError(f"query has no foreground at level {level}")

        # carry the coarser result up: initial full-domain estimate at this level
        base_up: dict[str, np.ndarray | None] = {}
        for t in schema.targets:
            if coarsest:
                base_up[t.base] = None
                gauss_est[t.base] = None  # absent on the first pass
            else:
                up = pyramid.upsample(gauss_est[t.base], qlevels[level + 1].mask,
                                      qld.mask.shape, qld.mask)
                base_up[t.base] = up
                gauss_est[t.base] = up

        index, uid_map, band_stacks = _build_db(active, cache, schema, weights, level, k, cfg)
        qset = extract_patches(build_stack(qld, schema, weights, gauss_est), k, level=level)
        if len(qset) == 0:
            raise EmptyForegroundError(f"no accepted query patches at level {level}")

        prev_assign: AssignmentField | None = None
        level_converged = False
        for it in range(1, cfg.max_iters + 1):
            matches, assign = get_similar_patches(qset, index, uid_map, it, level)
            if cfg.record_assignments:
                assignment_log.append(assign)

            mean_change = 0.0
            for t in schema.targets:
                prev_band = bands[t.base][level].values if bands[t.base][level] is not None else None
                new_band = update_depths(matches, qset.ys, qset.xs, band_stacks[t.base],
                                         qld.mask, k, sigma, prev=prev_band)
                bands[t.base][level] = ChannelGrid(new_band, qld.mask)
                new_est = new_band if coarsest else base_up[t.base] + new_band
                old = gauss_est[t.base]
                fg = qld.mask
                if old is not None:
                    delta = float(np.nanmean(np.abs(new_est - old)))
                    vals = new_est[fg]
                    rng = float(vals.max() - vals.min()) if vals.size else 0.0
                    rel = delta / rng if rng > 0 else (0.0 if delta == 0 else math.inf)
                    mean_change = max(mean_change, rel)
                else:
                    mean_change = math.inf
                gauss_est[t.base] = new_est

            # objective after the update step, over the full channel stack
            qset = extract_patches(build_stack(qld, schema, weights, gauss_est), k, level=level)
            plaus = _plausibility(qset, index, matches)

            changed = len(assign) if prev_assign is None else _count_changed(prev_assign, assign)
            history.append(IterationRecord(
                level=level, iteration=it, plausibility_log=plaus,
                changed_assignments=changed, mean_abs_change=mean_change,
                n_patches=len(assign), db_size=len(uid_map),
                db_revision=active.revision,
                active_objects=tuple(active.objects),
                active_views=tuple(tuple(v) for v in active.views)))
            prev_assign = assign

            if changed == 0 or mean_change < cfg.change_tol:
                level_converged = True
                break

            if cfg.update_exemplars and coarsest and it < cfg.max_iters:
                db_changed = _update_hook(active, cache, schema, gauss_est, qld, matches,
                                          index, cfg)
                if db_changed:
                    index, uid_map, band_stacks = _build_db(active, cache, schema, weights,
                                                            level, k, cfg)
        converged_all &= level_converged

    targets = {}
    for t in schema.targets:
        pyr = pyramid.Pyramid(pyramid.LAPLACIAN, tuple(bands[t.base]))
        targets[t.base] = pyramid.collapse(pyr)
    return SynthesisResult(
        targets=targets, converged=converged_all, history=history,
        assignment_log=assignment_log,
        active_keys=[ex.key for ex in active.examples()],
        config_snapshot=cfg.snapshot())


def _plausibility(qset: PatchFeatureSet, index: PatchIndex, matches: QueryMatches) -> float:
    diff = qset.vectors - index.vectors[matches.flat]
    return -0.5 * float(np.einsum("ij,ij->", diff, diff))


def _count_changed(a: AssignmentField, b: AssignmentField) -> int:
    if len(a) != len(b) or not np.array_equal(a.centers, b.centers):
        return len(b)
    same = (a.example_ids == b.example_ids) & \
           (a.match_centers == b.match_centers).all(axis=1)
    return int((~same).sum())


def _build_db(active: _ActiveSet, cache: _ExemplarCache, schema: SynthesisSchema,
              weights: ChannelWeights, level: int, k: int, cfg: SynthesisConfig):
    """Feature index plus padded synthesis-band stacks for the active set."""
    r = k // 2
    sets = []
    uid_map = {}
    stacks_per_code: dict[str, list[np.ndarray]] = {t.base: [] for t in schema.targets}
    ordered = sorted(active.examples(), key=mapping_uid)
    for ex in ordered:
        ld = cache.get(ex)[level]
        if not ld.mask.any():
            continue
        stack = build_stack(ld, schema, weights, ld.target_gauss)
        fset = extract_patches(stack, k, provenance=mapping_uid(ex), level=level)
        if len(fset) == 0:
            continue
        uid_map[mapping_uid(ex)] = ex
        sets.append(fset)
        for t in schema.targets:
            filled = fill_background_nearest(
                np.where(ld.mask, ld.synth_band[t.base], 0.0), ld.mask)
            stacks_per_code[t.base].append(np.pad(filled, r, mode="edge"))
    if not sets:
        raise ValueError("empty database (no usable exemplar patches at this level)")
    index = build_index(sets, mode=cfg.index_mode, epsilon=cfg.epsilon)
    # index sorted sets by uid; align band stacks to index code order
    order = {uid: i for i, uid in enumerate(uid_map)}
    band_stacks = {}
    for t in schema.targets:
        arrs = stacks_per_code[t.base]
        band_stacks[t.base] = np.stack([arrs[order[uid]] for uid in index.example_ids])
    return index, uid_map, band_stacks


def _update_hook(active: _ActiveSet, cache: _ExemplarCache, schema: SynthesisSchema,
                 gauss_est: dict[str, np.ndarray | None], qld: _LevelData,
                 matches: QueryMatches, index: PatchIndex, cfg: SynthesisConfig) -> bool:
    """On-the-fly database maintenance between iterations at the coarsest level."""
    level = cfg.levels - 1
    usage_by_uid: dict[str, int] = {}
    counts = np.bincount(matches.codes, minlength=len(index.example_ids))
    for code, n in enumerate(counts):
        usage_by_uid[index.example_ids[code]] = int(n)

    changed = False
    extra_objects = 0
    if len(active.views) > 1:
        view_usage = []
        for v in active.views:
            total = 0
            for oid in active.objects:
                ex = active.by_key.get((oid, v[0], v[1]))
                if ex is not None:
                    total += usage_by_uid.get(mapping_uid(ex), 0)
            view_usage.append(total)
        vs = exemplars.ViewState(active_views=list(active.views),
                                 usage=list(view_usage),
                                 available_views=list(active.available_views),
                                 merge_threshold=cfg.merge_threshold)
        upd = exemplars.update_views(vs, view_usage)
        if upd.changed:
            active.views = list(upd.state.active_views)
            active.revision += 1
            changed = True
        if upd.merged:
            extra_objects += 1

    # object replacement against the current coarse estimate of the first target
    first_target = schema.targets[0].base
    est = gauss_est[first_target]
    if est is not None and len(active.pool_objects()) > len(active.objects):
        drop_count = 0
        if len(active.objects) > 1:
            drop_count = max(1, round(cfg.replace_fraction * len(active.objects)))
            drop_count = min(drop_count, len(active.objects) - 1)
        object_usage = {oid: 0.0 for oid in active.objects}
        for ex in active.examples():
            object_usage[ex.object_id] += usage_by_uid.get(mapping_uid(ex), 0)
        current = ChannelGrid(est, qld.mask)
        candidates = _candidate_residuals(active, cache, first_target, level, current)
        new_objects = exemplars.replace_objects(
            active_objects=active.objects,
            usage=object_usage,
            candidate_residuals=candidates,
            drop_count=drop_count,
            admit_count=drop_count + extra_objects,
            limit_objects=max(1, cfg.active_limit // max(1, len(active.views))))
        if list(new_objects) != list(active.objects):
            active.objects = list(new_objects)
            active.revision += 1
            changed = True
    return changed


def _candidate_residuals(active: _ActiveSet, cache: _ExemplarCache, target_base: str,
                         level: int, current: ChannelGrid) -> dict[str, float]:
    """Aligned mean-square depth residual per pool object at this level."""
    out: dict[str, float] = {}
    for ex in active.pool:
        ld = cache.get(ex)[level]
        if not ld.mask.any():
            continue
        cand = ChannelGrid(ld.target_gauss[target_base], ld.mask)
        resid = aligned_mean_sq_diff(current, cand)
        prev = out.get(ex.object_id)
        if prev is None or resid < prev:
            out[ex.object_id] = resid
    return out
