"""File formats: binary PGM/PPM images, float32 depth rasters, manifests.

Depth rasters use a 3-line ASCII header ("DEPTH", width, height) followed
by raw little-endian float32 in row-major order; background pixels carry
the IEEE quiet-NaN pattern.  Masks are PGM with 0 = background and
255 = foreground.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grids import ChannelGrid

DEPTH_MAGIC = b"DEPTH"


def _read_pnm_header(f, magic: bytes):
    """Parse a PNM header, tolerating comments and any whitespace."""
    if f.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        tok = b""
        c = f.read(1)
        while c.isspace():
            c = f.read(1)
        if c == b"#":
            f.readline()
            continue
        while c and not c.isspace():
            tok += c
            c = f.read(1)
        if not tok:
            raise ValueError("truncated PNM header")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return width, height


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a float array in [0, 1]."""
    with open(path, "rb") as f:
        width, height = _read_pnm_header(f, b"P5")
        data = np.frombuffer(f.read(width * height), dtype=np.uint8)
    return data.reshape(height, width).astype(np.float64) / 255.0


def write_pgm(path, values: np.ndarray):
    """Write floats in [0, 1] as a binary PGM (values are clipped)."""
    arr = np.clip(np.nan_to_num(np.asarray(values, float)), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) float array in [0, 1]."""
    with open(path, "rb") as f:
        width, height = _read_pnm_header(f, b"P6")
        data = np.frombuffer(f.read(width * height * 3), dtype=np.uint8)
    return data.reshape(height, width, 3).astype(np.float64) / 255.0


def write_ppm(path, rgb: np.ndarray):
    arr = np.clip(np.nan_to_num(np.asarray(rgb, float)), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_mask(path) -> np.ndarray:
    return read_pgm(path) > 0.5


def write_mask(path, mask: np.ndarray):
    write_pgm(path, mask.astype(float))


def read_depth(path) -> np.ndarray:
    """Read a float32 depth raster; NaN marks background."""
    with open(path, "rb") as f:
        if f.readline().strip() != DEPTH_MAGIC:
            raise ValueError("not a DEPTH raster")
        width = int(f.readline())
        height = int(f.readline())
        data = np.frombuffer(f.read(4 * width * height), dtype="<f4")
    if data.size != width * height:
        raise ValueError("truncated depth raster")
    return data.reshape(height, width).astype(np.float64)


def write_depth(path, values: np.ndarray):
    arr = np.asarray(values, np.float64)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"DEPTH\n%d\n%d\n" % (w, h))
        f.write(arr.astype("<f4").tobytes())


def read_depth_grid(path, mask_path=None) -> ChannelGrid:
    vals = read_depth(path)
    mask = read_mask(mask_path) if mask_path else np.isfinite(vals)
    return ChannelGrid(vals, mask)


@dataclass
class ManifestEntry:
    """One exemplar row: object id, view angles, and channel file paths."""

    object_id: str
    view: tuple[float, float]
    paths: dict[str, str]  # keys: image, color, depth, back, mask

    def resolve(self, root: Path) -> dict[str, Path]:
        return {k: root / v for k, v in self.paths.items()}


def write_manifest(path, entries: list[ManifestEntry]):
    path = Path(path)
    with open(path, "w") as f:
        for e in entries:
            parts = [e.object_id, f"{e.view[0]:g}", f"{e.view[1]:g}"]
            parts += [f"{k}={v}" for k, v in sorted(e.paths.items())]
            f.write(" ".join(parts) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 4:
                raise ValueError(f"bad manifest line: {line!r}")
            object_id, alpha, beta = parts[0], float(parts[1]), float(parts[2])
            paths = {}
            for kv in parts[3:]:
                k, _, v = kv.partition("=")
                if not v:
                    raise ValueError(f"bad manifest field {kv!r} in line: {line!r}")
                paths[k] = v
            entries.append(ManifestEntry(object_id, (alpha, beta), paths))
    return entries
