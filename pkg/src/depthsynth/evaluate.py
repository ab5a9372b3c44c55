"""Leave-one-out benchmark: naive baseline, L1 metric, t-test, weight search.

The per-query error is the mean absolute foreground depth difference
after removing each side's mean over the evaluated region, normalized by
the ground-truth foreground depth range, which makes errors comparable
across object scales.  The baseline copies the depth of the database
exemplar whose whole image best matches the query.  No query is ever
screened out of the aggregate.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, stats

from .grids import (ChannelGrid, ChannelWeights, DepthMap, MappingExample,
                    centroid_align_shift, fill_background_nearest, shift_values)
from .modes import MODES, ModeSpec, run_mode
from .optimizer import SynthesisConfig


def l1_depth_error(estimate: ChannelGrid | DepthMap, truth: ChannelGrid | DepthMap) -> float:
    """Range-normalized mean absolute depth error over the truth foreground.

    Both sides are mean-centered over the evaluated region first, so the
    metric ignores the arbitrary depth zero-point.  Estimate pixels missing
    inside the truth foreground are filled from their nearest estimate.
    """
    est = estimate.grid if isinstance(estimate, DepthMap) else estimate
    tru = truth.grid if isinstance(truth, DepthMap) else truth
    if est.shape != tru.shape:
        raise ValueError("estimate and truth must share dimensions")
    fg = tru.mask
    tvals = tru.values[fg]
    evals_full = fill_background_nearest(est.filled(), est.mask)
    evals = evals_full[fg]
    tvals = tvals - tvals.mean()
    evals = evals - evals.mean()
    rng = float(tvals.max() - tvals.min())
    err = float(np.mean(np.abs(evals - tvals)))
    return err / rng if rng > 0 else err


def baseline_estimate(query_image: ChannelGrid, db: list[MappingExample],
                      image_channel: str = "intensity",
                      depth_channel: str = "depth") -> tuple[DepthMap, str]:
    """Depth of the exemplar most similar in appearance to the query.

    Similarity is the mean squared intensity difference on the mask
    intersection after aligning foreground centroids; the winning depth is
    returned shifted by the same alignment.
    """
    if not db:
        raise ValueError("empty database")
    best = None
    for ex in sorted(db, key=lambda e: e.key):
        img = ex.channel(image_channel)
        dy, dx = centroid_align_shift(query_image.mask, img.mask)
        moved = shift_values(img.filled(np.nan), dy, dx)
        moved_mask = shift_values(img.mask.astype(float), dy, dx, fill=0.0) > 0.5
        both = query_image.mask & moved_mask
        if not both.any():
            continue
        diff = query_image.values[both] - moved[both]
        ssd = float(np.mean(diff * diff))
        if best is None or ssd < best[0]:
            best = (ssd, ex, dy, dx)
    if best is None:
        raise ValueError("no exemplar overlaps the query")
    _, ex, dy, dx = best
    depth = ex.channel(depth_channel)
    moved_vals = shift_values(depth.filled(np.nan), dy, dx)
    moved_mask = shift_values(depth.mask.astype(float), dy, dx, fill=0.0) > 0.5
    grid = ChannelGrid(np.where(moved_mask, moved_vals, np.nan), moved_mask)
    return DepthMap(grid), ex.object_id


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t statistic and p-value with n-1 degrees of freedom.

    Zero difference variance: p = 1 when the means agree, otherwise the
    statistic diverges and p underflows to 0.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length vectors with at least 2 entries")
    d = a - b
    n = d.size
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if float(d.mean()) == 0.0:
            warnings.warn("zero difference variance; p = 1")
            return 0.0, 1.0
        warnings.warn("zero variance with nonzero mean difference; p -> 0")
        return math.copysign(math.inf, float(d.mean())), 0.0
    t = float(d.mean()) / (sd / math.sqrt(n))
    p = 2.0 * float(stats.t.sf(abs(t), n - 1))
    return t, p


@dataclass
class QueryRow:
    object_id: str
    method_l1: float
    baseline_l1: float


@dataclass
class EvalReport:
    rows: list[QueryRow]
    method_mean: float
    method_std: float
    baseline_mean: float
    baseline_std: float
    t_stat: float
    p_value: float
    config_snapshot: dict

    @classmethod
    def from_rows(cls, rows: list[QueryRow], config_snapshot: dict) -> "EvalReport":
        rows = sorted(rows, key=lambda r: r.object_id)
        m = np.array([r.method_l1 for r in rows])
        b = np.array([r.baseline_l1 for r in rows])
        t, p = paired_t_test(m, b)
        return cls(rows=rows,
                   method_mean=float(m.mean()), method_std=float(m.std(ddof=1)),
                   baseline_mean=float(b.mean()), baseline_std=float(b.std(ddof=1)),
                   t_stat=t, p_value=p, config_snapshot=config_snapshot)

    def format_table(self) -> str:
        out = io.StringIO()
        out.write(f"{'object':<14}{'baseline':>10}{'ours':>10}\n")
        for r in self.rows:
            out.write(f"{r.object_id:<14}{r.baseline_l1:>10.4f}{r.method_l1:>10.4f}\n")
        out.write(f"{'mean +- std':<14}"
                  f"{self.baseline_mean:>7.4f} +- {self.baseline_std:.4f} | "
                  f"{self.method_mean:.4f} +- {self.method_std:.4f}\n")
        out.write(f"paired t = {self.t_stat:.3f}, p = {self.p_value:.3g}\n")
        return out.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["object_id", "baseline_l1", "method_l1"])
            for r in self.rows:
                w.writerow([r.object_id, f"{r.baseline_l1:.6f}", f"{r.method_l1:.6f}"])
            w.writerow(["aggregate_mean", f"{self.baseline_mean:.6f}",
                        f"{self.method_mean:.6f}"])
            w.writerow(["aggregate_std", f"{self.baseline_std:.6f}",
                        f"{self.method_std:.6f}"])
            w.writerow(["paired_t", f"{self.t_stat:.6f}", ""])
            w.writerow(["p_value", f"{self.p_value:.6g}", ""])
            w.writerow(["config", repr(self.config_snapshot), ""])


def leave_one_out(pool: list[MappingExample], cfg: SynthesisConfig | None = None,
                  mode: ModeSpec | str = "depth",
                  query_view: tuple[float, float] | None = None) -> EvalReport:
    """Hold out each object in turn (all its views) and estimate it.

    The query is the held-out object's source channel at its first view
    (or ``query_view``); every query enters the aggregate.
    """
    spec = MODES[mode] if isinstance(mode, str) else mode
    cfg = cfg or SynthesisConfig()
    object_ids = sorted({ex.object_id for ex in pool})
    if len(object_ids) < 3:
        raise ValueError("leave-one-out needs at least 3 objects")
    src = spec.source_channels[0]
    tgt = spec.target_channels[0]
    rows = []
    for oid in object_ids:
        held = [ex for ex in pool if ex.object_id == oid]
        db = [ex for ex in pool if ex.object_id != oid]
        query_ex = held[0]
        if query_view is not None:
            for ex in held:
                if tuple(ex.view) == tuple(query_view):
                    query_ex = ex
                    break
        query = {src: query_ex.channel(src)}
        truth = query_ex.channel(tgt)
        out = run_mode(spec, query, db, cfg)
        method_l1 = l1_depth_error(out.targets[tgt], truth)
        base_map, _ = baseline_estimate(query[src], db, image_channel=src,
                                        depth_channel=tgt)
        base_l1 = l1_depth_error(base_map, truth)
        rows.append(QueryRow(oid, method_l1, base_l1))
    return EvalReport.from_rows(rows, cfg.snapshot())


def search_weights(training: list[MappingExample], init: ChannelWeights,
                   cfg: SynthesisConfig | None = None, mode: ModeSpec | str = "depth",
                   keys: tuple[str, ...] | None = None, max_evals: int = 60,
                   objective=None) -> ChannelWeights:
    """Direct simplex search over channel weights on a small training set.

    Non-negativity comes from optimizing log-weights.  The objective is the
    mean leave-one-out L1 over the training objects unless an explicit
    callable (weights -> scalar) is injected.  Runs once per class; cache
    the result.
    """
    spec = MODES[mode] if isinstance(mode, str) else mode
    cfg = cfg or SynthesisConfig()
    if keys is None:
        keys = tuple(init.as_dict())
    x0 = np.log([max(init[k], 1e-6) for k in keys])

    if objective is None:
        if len({ex.object_id for ex in training}) < 3:
            raise ValueError("weight search needs at least 3 training objects")

        def objective(weights: ChannelWeights) -> float:
            report = leave_one_out(training, replace(cfg, weights=weights), spec)
            return report.method_mean

    def f(x):
        w = init.replaced(**{k: float(v) for k, v in zip(keys, np.exp(x))})
        return objective(w)

    f0 = f(x0)
    probe = [f(x0 + 0.25 * e) for e in np.eye(len(keys))[: min(2, len(keys))]]
    if all(abs(v - f0) == 0.0 for v in probe):
        warnings.warn("objective is flat around the start; keeping initial weights")
        return init

    res = optimize.minimize(f, x0, method="Nelder-Mead",
                            options={"maxfev": max_evals, "xatol": 1e-3,
                                     "fatol": 1e-6, "initial_simplex": None})
    best_x = res.x if res.fun <= f0 else x0
    return init.replaced(**{k: float(v) for k, v in zip(keys, np.exp(best_x))})
