"""Procedural ground-truth generator: shapes, shading, and databases.

Objects are implicit surfaces rendered orthographically along the view
axis.  Each render produces a Lambertian-shaded color image, the front
depth (distance of the entry point along the ray), the back depth (exit
point), and the foreground mask.  Depths are stored in a common frame
with zero at the object's volume centroid, so layers and exemplars mix
consistently.

Three families stand in for object classes of different character:
superellipsoid two-part "busts" (structured, position matters),
blended-blob chains (articulated, hand-like), and textured heightfield
reliefs (fish-like, texture-heavy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .grids import ChannelGrid, MappingExample
from .modes import rgb_to_ycbcr

FAMILIES = ("superellipsoid", "heightfield", "blobs")

_WORLD_EXTENT = 2.4  # width of the image window in world units
_RAY_SPAN = 1.6      # rays sampled over z in [-span, span]
_RAY_STEPS = 192
_BISECT_ITERS = 48


@dataclass(frozen=True)
class TextureSpec:
    """Procedural RGB albedo: a bounded mix of 3-D cosine waves."""

    kind: str = "waves"  # waves | flat
    base: tuple[float, float, float] = (0.7, 0.6, 0.5)
    amplitude: float = 0.25
    frequency: float = 6.0
    n_waves: int = 5
    seed: int = 0

    def albedo(self, points: np.ndarray) -> np.ndarray:
        """(..., 3) albedo for (..., 3) object-frame points, clipped to [0.05, 1]."""
        base = np.asarray(self.base, float)
        if self.kind == "flat":
            return np.broadcast_to(base, points.shape[:-1] + (3,)).copy()
        rng = np.random.default_rng(self.seed)
        out = np.zeros(points.shape[:-1] + (3,))
        for c in range(3):
            acc = np.zeros(points.shape[:-1])
            for _ in range(self.n_waves):
                k = rng.uniform(0.3, 1.0, 3) * self.frequency
                phase = rng.uniform(0, 2 * np.pi)
                acc += np.cos(points @ k + phase)
            out[..., c] = base[c] + self.amplitude * acc / np.sqrt(self.n_waves)
        return np.clip(out, 0.05, 1.0)


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    params: dict[str, float]
    texture: TextureSpec = TextureSpec()
    view: tuple[float, float] = (0.0, 0.0)
    light: tuple[float, float, float] = (0.35, 0.3, 0.89)
    resolution: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        h, w = self.resolution
        if h < 8 or w < 8:
            raise ValueError("resolution too small")
        norm = math.sqrt(sum(v * v for v in self.light))
        if abs(norm - 1.0) > 1e-6:
            object.__setattr__(self, "light",
                               tuple(v / norm for v in self.light))


def _rotation(alpha_deg: float, beta_deg: float) -> np.ndarray:
    """World-from-object rotation for camera yaw alpha and pitch beta."""
    a = math.radians(alpha_deg)
    b = math.radians(beta_deg)
    ry = np.array([[math.cos(a), 0, math.sin(a)],
                   [0, 1, 0],
                   [-math.sin(a), 0, math.cos(a)]])
    rx = np.array([[1, 0, 0],
                   [0, math.cos(b), -math.sin(b)],
                   [0, math.sin(b), math.cos(b)]])
    return rx @ ry


def _implicit(family: str, params: dict[str, float]):
    """Signed inside/outside function; negative inside."""
    if family == "superellipsoid":
        a = params.get("a", 0.5)
        b = params.get("b", 0.6)
        c = params.get("c", 0.45)
        e1 = max(params.get("e1", 1.0), 0.2)
        e2 = max(params.get("e2", 1.0), 0.2)
        head = params.get("head", 0.0)
        head_r = params.get("head_r", 0.28)
        head_y = params.get("head_y", 0.62)

        def f(p):
            x, y, z = p[..., 0], p[..., 1], p[..., 2]
            horiz = (np.abs(x / a) ** (2.0 / e2) + np.abs(z / c) ** (2.0 / e2))
            body = (horiz ** (e2 / e1) + np.abs(y / b) ** (2.0 / e1)) - 1.0
            if head <= 0:
                return body
            hd = (x * x + (y - head_y) ** 2 + z * z) / (head_r * head_r) - 1.0
            return np.minimum(body, hd)
        return f

    if family == "heightfield":
        a = params.get("a", 0.95)
        b = params.get("b", 0.6)
        thickness = params.get("thickness", 0.25)
        amp = params.get("amp", 0.22)
        fx = params.get("fx", 3.0)
        fy = params.get("fy", 2.0)
        phase = params.get("phase", 0.0)

        def f(p):
            x, y, z = p[..., 0], p[..., 1], p[..., 2]
            foot = (x / a) ** 2 + (y / b) ** 2 - 1.0
            dome = 0.45 * np.clip(1.0 - foot - 1.0, -1.0, 1.0)  # bulge inside footprint
            h = amp * (np.sin(fx * x + phase) * np.cos(fy * y - phase)) + \
                amp * 0.5 * np.sin(2.1 * fx * x - 1.3 * fy * y) + dome * 0.3
            top = z - h
            bottom = -thickness - z
            return np.maximum(foot, np.maximum(top, bottom))
        return f

    if family == "blobs":
        centers = np.asarray(params["centers"], float).reshape(-1, 3)
        radii = np.asarray(params["radii"], float).reshape(-1)
        tau = params.get("tau", 1.0)

        def f(p):
            acc = np.zeros(p.shape[:-1])
            for c, r in zip(centers, radii):
                d2 = ((p - c) ** 2).sum(axis=-1)
                acc += np.exp(-d2 / (r * r))
            return tau - acc
        return f

    raise ValueError(f"unknown family {family!r}")


def _trace(f, rot: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Entry/exit z along each orthographic ray, by scan plus bisection."""
    n = xs.size
    ts = np.linspace(_RAY_SPAN, -_RAY_SPAN, _RAY_STEPS)

    def implicit_at(t):
        pts_world = np.stack([xs, ys, np.broadcast_to(t, xs.shape)], axis=-1)
        return f(pts_world @ rot)  # row form of p_obj = R^T p_world

    inside = np.empty((_RAY_STEPS, n), bool)
    for i, t in enumerate(ts):
        inside[i] = implicit_at(np.full(n, t)) <= 0.0
    hit = inside.any(axis=0)
    first = np.argmax(inside, axis=0)
    last = _RAY_STEPS - 1 - np.argmax(inside[::-1], axis=0)

    def bisect(lo_t, hi_t):
        # f(lo_t) > 0 outside, f(hi_t) <= 0 inside
        lo = lo_t.copy()
        hi = hi_t.copy()
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            is_in = implicit_at(mid) <= 0.0
            hi = np.where(is_in, mid, hi)
            lo = np.where(is_in, lo, mid)
        return 0.5 * (lo + hi)

    t_entry = np.full(n, np.nan)
    t_exit = np.full(n, np.nan)
    if hit.any():
        idx = np.nonzero(hit)[0]
        fe = first[idx]
        outside_t = ts[np.maximum(fe - 1, 0)]
        inside_t = ts[fe]
        grazing = fe == 0
        ent = bisect(np.where(grazing, inside_t, outside_t), inside_t)
        le = last[idx]
        outside_b = ts[np.minimum(le + 1, _RAY_STEPS - 1)]
        inside_b = ts[le]
        grazing_b = le == _RAY_STEPS - 1
        ext = bisect(np.where(grazing_b, inside_b, outside_b), inside_b)
        full_entry = np.full(n, np.nan)
        full_exit = np.full(n, np.nan)
        full_entry[idx] = ent
        full_exit[idx] = ext
        t_entry, t_exit = full_entry, full_exit
    return hit, t_entry, t_exit


def _normals(f, rot: np.ndarray, pts_world: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Unit world-frame normals from central differences of the implicit."""
    pts_obj = pts_world @ rot  # rot.T.T
    grad = np.empty_like(pts_obj)
    for axis in range(3):
        dp = np.zeros(3)
        dp[axis] = h
        grad[:, axis] = f(pts_obj + dp) - f(pts_obj - dp)
    grad_world = grad @ rot.T
    norm = np.linalg.norm(grad_world, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    n = grad_world / norm
    # outward normals face the camera (+z): the implicit grows outward already,
    # but numerical noise near silhouettes can flip the z component
    flip = n[:, 2] < 0
    n[flip] *= -1.0
    return n


def render(spec: ShapeSpec) -> MappingExample:
    """Render one mapping example with channels intensity, Y, Cb, Cr / depth, back."""
    h, w = spec.resolution
    scale = _WORLD_EXTENT / max(h, w)
    xs_px, ys_px = np.meshgrid(np.arange(w), np.arange(h))
    xs = (xs_px.ravel() - (w - 1) / 2.0) * scale
    ys = ((h - 1) / 2.0 - ys_px.ravel()) * scale

    f = _implicit(spec.family, spec.params)
    rot = _rotation(*spec.view)
    hit, t_entry, t_exit = _trace(f, rot, xs, ys)
    if not hit.any():
        raise ValueError("degenerate shape: empty foreground")

    mask = hit.reshape(h, w)
    depth_front = (-t_entry).reshape(h, w)
    depth_back = (-t_exit).reshape(h, w)

    # common frame: z = 0 at the uniform-density volume centroid
    fg = mask
    col = depth_back[fg] - depth_front[fg]
    mid = 0.5 * (depth_back[fg] + depth_front[fg])
    total = col.sum()
    z0 = float((mid * col).sum() / total) if total > 0 else float(mid.mean())
    depth_front = depth_front - z0
    depth_back = depth_back - z0

    idx = np.nonzero(hit)[0]
    pts_world = np.stack([xs[idx], ys[idx], t_entry[idx]], axis=-1)
    normals = _normals(f, rot, pts_world)
    light = np.asarray(spec.light, float)
    shade = np.clip(normals @ light, 0.0, 1.0)
    albedo = spec.texture.albedo(pts_world @ rot)  # texture fixed to the object
    rgb_fg = albedo * shade[:, None]

    rgb = np.zeros((h, w, 3))
    rgb.reshape(-1, 3)[idx] = rgb_fg
    y, cb, cr = rgb_to_ycbcr(rgb)
    intensity = y

    def grid(vals):
        return ChannelGrid(vals, mask)

    return MappingExample(
        object_id="shape",
        view=spec.view,
        source_channels={"intensity": grid(intensity)},
        target_channels={"depth": grid(depth_front), "back": grid(depth_back),
                         "Y": grid(y), "Cb": grid(cb), "Cr": grid(cr)},
    )


def render_rgb(spec: ShapeSpec) -> np.ndarray:
    """Convenience: the (H, W, 3) shaded color image of a render."""
    ex = render(spec)
    from .modes import ycbcr_to_rgb
    return ycbcr_to_rgb(ex.target_channels["Y"].filled(),
                        ex.target_channels["Cb"].filled(0.5),
                        ex.target_channels["Cr"].filled(0.5))


# ---------------------------------------------------------------------------
# object classes


def _draw_params(family: str, rng: np.random.Generator) -> dict:
    if family == "superellipsoid":
        return {
            "a": rng.uniform(0.38, 0.58),
            "b": rng.uniform(0.5, 0.72),
            "c": rng.uniform(0.32, 0.52),
            "e1": rng.uniform(0.7, 1.5),
            "e2": rng.uniform(0.7, 1.5),
            "head": 1.0,
            "head_r": rng.uniform(0.2, 0.33),
            "head_y": rng.uniform(0.52, 0.7),
        }
    if family == "heightfield":
        # thickness exceeds the worst-case relief dip so the slab has no holes
        return {
            "a": rng.uniform(0.8, 1.0),
            "b": rng.uniform(0.45, 0.65),
            "thickness": rng.uniform(0.45, 0.6),
            "amp": rng.uniform(0.12, 0.26),
            "fx": rng.uniform(2.0, 4.5),
            "fy": rng.uniform(1.5, 3.5),
            "phase": rng.uniform(0, 2 * np.pi),
        }
    if family == "blobs":
        n = int(rng.integers(3, 6))
        # a kinked chain of blobs, centered; scaled to stay inside the window
        angles = rng.uniform(-0.9, 0.9, n).cumsum()
        steps = rng.uniform(0.22, 0.33, n)
        pts = [np.zeros(3)]
        for ang, st in zip(angles, steps):
            d = np.array([math.cos(ang), math.sin(ang), 0.15 * math.sin(2 * ang)])
            pts.append(pts[-1] + st * d)
        pts = np.asarray(pts)
        pts -= pts.mean(axis=0)
        radii = rng.uniform(0.28, 0.42, len(pts))
        return {"centers": pts.tolist(), "radii": radii.tolist(), "tau": 0.8}
    raise ValueError(family)


def generate_database(family: str, n_objects: int, views, seed: int,
                      resolution: tuple[int, int] = (64, 64),
                      flat_texture: bool = False) -> list[MappingExample]:
    """n_objects parameter draws rendered at every view; deterministic per seed."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    rng = np.random.default_rng(seed)
    views = [tuple(map(float, v)) for v in views]
    out = []
    for i in range(n_objects):
        params = _draw_params(family, rng)
        tex_seed = int(rng.integers(0, 2 ** 31))
        texture = TextureSpec(kind="flat" if flat_texture else "waves",
                              base=tuple(rng.uniform(0.45, 0.85, 3)),
                              amplitude=0.28 if family == "heightfield" else 0.2,
                              frequency=10.0 if family == "heightfield" else 6.0,
                              seed=tex_seed)
        oid = f"{family[:5]}{i:03d}"
        for v in views:
            spec = ShapeSpec(family=family, params=params, texture=texture,
                             view=v, resolution=resolution)
            ex = render(spec)
            ex.object_id = oid
            out.append(ex)
    return out


def save_database(examples: list[MappingExample], out_dir) -> Path:
    """Write channel files plus the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    from .modes import ycbcr_to_rgb
    for ex in examples:
        a, b = ex.view
        stem = f"{ex.object_id}_a{a:+05.0f}_b{b:+05.0f}".replace("+", "p").replace("-", "m")
        paths = {
            "image": f"{stem}.image.pgm",
            "color": f"{stem}.color.ppm",
            "depth": f"{stem}.depth.f32",
            "back": f"{stem}.back.f32",
            "mask": f"{stem}.mask.pgm",
        }
        fileio.write_pgm(out_dir / paths["image"], ex.source_channels["intensity"].filled())
        rgb = ycbcr_to_rgb(ex.target_channels["Y"].filled(),
                           ex.target_channels["Cb"].filled(0.5),
                           ex.target_channels["Cr"].filled(0.5))
        fileio.write_ppm(out_dir / paths["color"], rgb)
        fileio.write_depth(out_dir / paths["depth"], ex.target_channels["depth"].values)
        fileio.write_depth(out_dir / paths["back"], ex.target_channels["back"].values)
        fileio.write_mask(out_dir / paths["mask"], ex.mask)
        entries.append(fileio.ManifestEntry(ex.object_id, ex.view, paths))
    manifest = out_dir / "manifest.txt"
    fileio.write_manifest(manifest, entries)
    return manifest


def load_database(manifest_path, source_names=("intensity",),
                  target_names=("depth",)) -> list[MappingExample]:
    """Load mapping examples from a manifest, selecting the named channels."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    out = []
    for entry in fileio.read_manifest(manifest_path):
        paths = entry.resolve(root)
        mask = fileio.read_mask(paths["mask"])
        channels: dict[str, ChannelGrid] = {}

        def get(name: str) -> ChannelGrid:
            if name in channels:
                return channels[name]
            if name == "intensity":
                g = ChannelGrid(fileio.read_pgm(paths["image"]), mask)
            elif name in ("depth", "back"):
                g = ChannelGrid(fileio.read_depth(paths[name]), mask)
            elif name in ("Y", "Cb", "Cr"):
                rgb = fileio.read_ppm(paths["color"])
                y, cb, cr = rgb_to_ycbcr(rgb)
                channels["Y"] = ChannelGrid(y, mask)
                channels["Cb"] = ChannelGrid(cb, mask)
                channels["Cr"] = ChannelGrid(cr, mask)
                return channels[name]
            else:
                raise ValueError(f"unknown channel {name!r}")
            channels[name] = g
            return g

        out.append(MappingExample(
            object_id=entry.object_id,
            view=entry.view,
            source_channels={n: get(n) for n in source_names},
            target_channels={n: get(n) for n in target_names},
        ))
    return out
