"""The three applications of the synthesis engine.

depth     : image intensity -> depth, with on-the-fly exemplar update.
backside  : front depth -> occluded second depth layer.
colorize  : depth -> Y, Cb, Cr image-map; no on-the-fly update, the m
            depth-nearest exemplars are pre-selected instead.

All three run the identical optimizer with swapped channel schemas.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .grids import (ChannelGrid, ChannelWeights, DepthMap, MappingExample,
                    aligned_mean_sq_diff, normalize_depth_frame)
from .optimizer import (BAND_REP, GAUSSIAN_REP, MatchChannelDef, SynthesisConfig,
                        SynthesisResult, SynthesisSchema, TargetChannelDef, estimate)

INTENSITY = "intensity"
DEPTH = "depth"
BACK = "back"


@dataclass(frozen=True)
class ModeSpec:
    """Channel schemas and defaults for one application."""

    name: str
    source_channels: tuple[str, ...]
    target_channels: tuple[str, ...]
    schema: SynthesisSchema
    default_weights: ChannelWeights
    default_patch_sizes: tuple[int, ...]  # coarsest -> finest
    default_m: int
    update_exemplars: bool
    preselect: bool


def _depth_mode() -> ModeSpec:
    schema = SynthesisSchema(
        name="depth",
        match_channels=(
            MatchChannelDef(INTENSITY, GAUSSIAN_REP, "intensity", normalize=True),
            MatchChannelDef(INTENSITY, BAND_REP, "intensity", normalize=True),
        ),
        targets=(TargetChannelDef(DEPTH, "depth"),),
    )
    weights = ChannelWeights({"intensity": 0.2140, "depth": 0.1116, "position": 0.0092})
    return ModeSpec("depth", (INTENSITY,), (DEPTH,), schema, weights,
                    (5, 7, 9), default_m=4, update_exemplars=True, preselect=False)


def _backside_mode() -> ModeSpec:
    schema = SynthesisSchema(
        name="backside",
        match_channels=(
            MatchChannelDef(DEPTH, GAUSSIAN_REP, "depth", normalize=False),
            MatchChannelDef(DEPTH, BAND_REP, "depth_hf", normalize=False),
        ),
        targets=(TargetChannelDef(BACK, "back"),),
    )
    weights = ChannelWeights({"depth": 0.2140, "depth_hf": 0.1116,
                              "back": 0.1116, "position": 0.0092})
    return ModeSpec("backside", (DEPTH,), (BACK,), schema, weights,
                    (5, 7, 9), default_m=4, update_exemplars=False, preselect=True)


def _colorize_mode() -> ModeSpec:
    schema = SynthesisSchema(
        name="colorize",
        match_channels=(
            MatchChannelDef(DEPTH, GAUSSIAN_REP, "depth", normalize=False),
            MatchChannelDef(DEPTH, BAND_REP, "depth_hf", normalize=False),
        ),
        targets=(TargetChannelDef("Y", "Y"),
                 TargetChannelDef("Cb", "Cb"),
                 TargetChannelDef("Cr", "Cr")),
    )
    weights = ChannelWeights({"depth": 0.08, "depth_hf": 0.06,
                              "Y": 8.0, "Cb": 1.1, "Cr": 1.1, "position": 10.0})
    return ModeSpec("colorize", (DEPTH,), ("Y", "Cb", "Cr"), schema, weights,
                    (9, 11, 7), default_m=2, update_exemplars=False, preselect=True)


MODES = {m.name: m for m in (_depth_mode(), _backside_mode(), _colorize_mode())}


@dataclass
class ModeResult:
    targets: dict[str, ChannelGrid]
    result: SynthesisResult
    depth: DepthMap | None = None
    rgb: np.ndarray | None = None
    preselected: tuple[str, ...] = ()


def preselect_examples(query_depth: ChannelGrid, pool: list[MappingExample],
                       m: int, depth_channel: str = DEPTH) -> list[MappingExample]:
    """The m pool examples whose aligned depth best matches the query depth."""
    def residual(ex):
        ch = ex.source_channels.get(depth_channel) or ex.target_channels.get(depth_channel)
        return aligned_mean_sq_diff(query_depth, ch)
    ranked = sorted(pool, key=lambda ex: (residual(ex), ex.object_id, ex.view))
    chosen_objects: list[str] = []
    for ex in ranked:
        if ex.object_id not in chosen_objects:
            chosen_objects.append(ex.object_id)
        if len(chosen_objects) >= m:
            break
    return [ex for ex in pool if ex.object_id in chosen_objects]


def run_mode(spec: ModeSpec, query: dict[str, ChannelGrid], pool: list[MappingExample],
             cfg: SynthesisConfig | None = None) -> ModeResult:
    """Dispatch a query through the synthesis engine with this mode's schema."""
    if tuple(sorted(query)) != tuple(sorted(spec.source_channels)):
        raise ValueError(
            f"mode {spec.name!r} expects source channels {spec.source_channels}, "
            f"got {tuple(sorted(query))}")
    for ex in pool:
        for name in spec.source_channels + spec.target_channels:
            if name not in ex.source_channels and name not in ex.target_channels:
                raise ValueError(f"example {ex.key} lacks channel {name!r}")

    cfg = cfg or SynthesisConfig()
    if cfg.weights is None:
        cfg = replace(cfg, weights=spec.default_weights)
    if cfg.patch_sizes == SynthesisConfig.patch_sizes and \
            spec.default_patch_sizes != SynthesisConfig.patch_sizes:
        cfg = replace(cfg, patch_sizes=spec.default_patch_sizes)
    if cfg.active_objects == SynthesisConfig.active_objects and \
            spec.default_m != SynthesisConfig.active_objects:
        cfg = replace(cfg, active_objects=spec.default_m)

    preselected: tuple[str, ...] = ()
    if spec.preselect:
        chosen = preselect_examples(query[spec.source_channels[0]], pool, cfg.active_objects)
        preselected = tuple(sorted({ex.object_id for ex in chosen}))
        pool = chosen
        cfg = replace(cfg, update_exemplars=False,
                      active_objects=len(preselected))
    elif not spec.update_exemplars:
        cfg = replace(cfg, update_exemplars=False)

    result = estimate(query, pool, spec.schema, cfg)
    out = ModeResult(targets=result.targets, result=result, preselected=preselected)
    if spec.name in ("depth", "backside"):
        name = spec.target_channels[0]
        out.depth = normalize_depth_frame(DepthMap(result.targets[name]))
    if spec.name == "colorize":
        out.rgb = ycbcr_to_rgb(result.targets["Y"].filled(),
                               result.targets["Cb"].filled(0.5),
                               result.targets["Cr"].filled(0.5))
    return out


# ---------------------------------------------------------------------------
# color space (JPEG full-range YCbCr)


def rgb_to_ycbcr(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 0.5
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 0.5
    return y, cb, cr


def ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    r = y + 1.402 * (cr - 0.5)
    g = y - 0.344136 * (cb - 0.5) - 0.714136 * (cr - 0.5)
    b = y + 1.772 * (cb - 0.5)
    return np.stack([r, g, b], axis=-1)
