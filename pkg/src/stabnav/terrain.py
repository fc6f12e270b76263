"""Synthetic 2.5D elevation maps and robot-centric patch extraction.

Heights are stored row-major as ``heights[iy, ix]``; cell ``(ix, iy)`` has its
center at ``origin + ((ix + 0.5) * res, (iy + 0.5) * res)``.  Off-grid queries
are bilinearly interpolated between cell centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import OutOfBoundsError, ParameterError

PATCH_SIDE = 0.64
PATCH_SAMPLES = 17  # odd so the pose itself is a sample; 16 intervals of 0.04 m
PATCH_SPACING = PATCH_SIDE / (PATCH_SAMPLES - 1)

FEATURE_NAMES = ("s_sag", "s_lat", "sigma_h", "range", "g_max")

TERRAIN_KINDS = ("flat", "slope", "steps", "rough", "ramp_corridor", "composite")


@dataclass
class ElevationMap:
    origin: tuple[float, float]
    resolution: float
    heights: np.ndarray
    known: np.ndarray | None = None

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=float)
        if self.heights.ndim != 2 or min(self.heights.shape) < 1:
            raise ParameterError("heights must be a non-empty 2D grid")
        if not self.resolution > 0:
            raise ParameterError(f"resolution must be positive, got {self.resolution}")
        if self.known is None:
            self.known = np.isfinite(self.heights)
        else:
            self.known = np.asarray(self.known, dtype=bool) & np.isfinite(self.heights)
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def width(self) -> int:
        return self.heights.shape[1]

    @property
    def height(self) -> int:
        return self.heights.shape[0]

    @property
    def extent(self) -> tuple[float, float]:
        return self.width * self.resolution, self.height * self.resolution

    def cell_center(self, ix, iy):
        ix = np.asarray(ix)
        iy = np.asarray(iy)
        return (self.origin[0] + (ix + 0.5) * self.resolution,
                self.origin[1] + (iy + 0.5) * self.resolution)

    def world_to_cell(self, x, y):
        """Index of the cell containing ``(x, y)`` (may lie outside the grid)."""
        ix = np.floor((np.asarray(x) - self.origin[0]) / self.resolution).astype(int)
        iy = np.floor((np.asarray(y) - self.origin[1]) / self.resolution).astype(int)
        return ix, iy

    def contains(self, x, y):
        ix, iy = self.world_to_cell(x, y)
        return (ix >= 0) & (ix < self.width) & (iy >= 0) & (iy < self.height)

    def interpolate(self, x, y):
        """Bilinear height at world points; NaN where any support cell is unknown
        or the point falls outside the span of cell centers."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        u = (x - self.origin[0]) / self.resolution - 0.5
        v = (y - self.origin[1]) / self.resolution - 0.5
        eps = 1e-9
        inside = (u >= -eps) & (u <= self.width - 1 + eps) & (v >= -eps) & (v <= self.height - 1 + eps)
        u = np.clip(u, 0.0, self.width - 1)
        v = np.clip(v, 0.0, self.height - 1)
        i0 = np.minimum(np.floor(u).astype(int), max(self.width - 2, 0))
        j0 = np.minimum(np.floor(v).astype(int), max(self.height - 2, 0))
        i1 = np.minimum(i0 + 1, self.width - 1)
        j1 = np.minimum(j0 + 1, self.height - 1)
        fu = u - i0
        fv = v - j0
        W = self.width
        hf = np.where(self.known, self.heights, np.nan).ravel()
        a = hf.take(j0 * W + i0)
        b = hf.take(j0 * W + i1)
        c = hf.take(j1 * W + i0)
        d = hf.take(j1 * W + i1)
        out = a + fu * (b - a) + fv * (c - a) + fu * fv * (a - b - c + d)
        ok = inside & np.isfinite(out)
        return np.where(ok, out, np.nan)


@dataclass
class Patch:
    samples: np.ndarray
    yaw: float = 0.0
    spacing: float = PATCH_SPACING

    @property
    def side(self) -> float:
        return self.spacing * (self.samples.shape[0] - 1)

    @property
    def center(self) -> float:
        c = self.samples.shape[0] // 2
        return float(self.samples[c, c])


@dataclass
class TerrainSpec:
    """Recipe for a synthetic terrain.

    ``params`` per kind:
      slope: angle (rad), direction (rad, 0 = +x)
      steps: rise, run, direction
      rough: amplitude, correlation_length
      ramp_corridor: rise, ramp_length, start (distance along direction), direction
      composite: uses ``components`` instead; each component is added on top,
      restricted to its own ``region`` (xmin, ymin, xmax, ymax) when given.
    """

    kind: str = "flat"
    extent: tuple[float, float] = (10.0, 10.0)
    resolution: float = 0.04
    seed: int = 0
    params: dict = field(default_factory=dict)
    components: list = field(default_factory=list)
    region: tuple | None = None

    def validate(self):
        if self.kind not in TERRAIN_KINDS:
            raise ParameterError(f"unknown terrain kind {self.kind!r}")
        if not (self.extent[0] > 0 and self.extent[1] > 0):
            raise ParameterError("terrain extent must be positive")
        if not self.resolution > 0:
            raise ParameterError("terrain resolution must be positive")
        p = self.params
        if self.kind == "slope":
            ang = p.get("angle", 0.0)
            if not -math.pi / 2 < ang < math.pi / 2:
                raise ParameterError("slope angle must lie in (-pi/2, pi/2)")
        elif self.kind == "steps":
            if not (p.get("rise", 0) > 0 and p.get("run", 0) > 0):
                raise ParameterError("steps need rise > 0 and run > 0")
        elif self.kind == "rough":
            if not (p.get("amplitude", 0) > 0 and p.get("correlation_length", 0) > 0):
                raise ParameterError("rough terrain needs amplitude > 0 and correlation_length > 0")
        elif self.kind == "ramp_corridor":
            if not (p.get("ramp_length", 0) > 0):
                raise ParameterError("ramp_corridor needs ramp_length > 0")
        elif self.kind == "composite":
            if not self.components:
                raise ParameterError("composite terrain needs at least one component")
        if self.region is not None:
            x0, y0, x1, y1 = self.region
            if not (x1 > x0 and y1 > y0):
                raise ParameterError("region must have positive size")


def _grid_shape(spec: TerrainSpec) -> tuple[int, int]:
    nx = int(round(spec.extent[0] / spec.resolution))
    ny = int(round(spec.extent[1] / spec.resolution))
    if nx < 1 or ny < 1:
        raise ParameterError("terrain extent smaller than one cell")
    return ny, nx


def _layer(spec: TerrainSpec, xs, ys, seed: int) -> np.ndarray:
    p = spec.params
    direction = p.get("direction", 0.0)
    along = xs * math.cos(direction) + ys * math.sin(direction)
    if spec.kind == "flat":
        h = np.zeros_like(xs)
    elif spec.kind == "slope":
        h = math.tan(p["angle"]) * along
    elif spec.kind == "steps":
        h = p["rise"] * np.floor(along / p["run"] + 1e-9)
    elif spec.kind == "rough":
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal(xs.shape)
        smooth = gaussian_filter(raw, sigma=p["correlation_length"] / spec.resolution, mode="wrap")
        smooth -= smooth.mean()
        std = smooth.std()
        h = p["amplitude"] * smooth / std if std > 0 else np.zeros_like(xs)
    elif spec.kind == "ramp_corridor":
        t = np.clip((along - p.get("start", 0.0)) / p["ramp_length"], 0.0, 1.0)
        h = p.get("rise", 0.0) * t
    else:
        h = np.zeros_like(xs)
        for k, comp in enumerate(spec.components):
            comp.validate()
            h = h + _layer(comp, xs, ys, seed + 1000 * (k + 1))
    if spec.region is not None and spec.kind != "composite":
        x0, y0, x1, y1 = spec.region
        inside = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
        h = np.where(inside, h, 0.0)
    return h


def generate_terrain(spec: TerrainSpec) -> ElevationMap:
    """Build a fully known elevation map from ``spec``; a pure function of the spec."""
    spec.validate()
    ny, nx = _grid_shape(spec)
    xs = (np.arange(nx) + 0.5) * spec.resolution
    ys = (np.arange(ny) + 0.5) * spec.resolution
    X, Y = np.meshgrid(xs, ys)
    heights = _layer(spec, X, Y, spec.seed)
    return ElevationMap(origin=(0.0, 0.0), resolution=spec.resolution, heights=heights)


def _patch_offsets(n: int = PATCH_SAMPLES, spacing: float = PATCH_SPACING):
    c = (np.arange(n) - n // 2) * spacing
    LX, LY = np.meshgrid(c, c)  # LX varies along columns (patch-x, sagittal)
    return LX, LY


def extract_patches(emap: ElevationMap, xs, ys, yaws,
                    n: int = PATCH_SAMPLES, spacing: float = PATCH_SPACING):
    """Vectorized patch extraction.

    Returns ``(samples, valid)`` with samples shaped ``(K, n, n)``; invalid
    patches (footprint leaves the known region) are filled with NaN.
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    yaws = np.broadcast_to(np.asarray(yaws, dtype=float), xs.shape)
    LX, LY = _patch_offsets(n, spacing)
    c = np.cos(yaws)[:, None, None]
    s = np.sin(yaws)[:, None, None]
    wx = xs[:, None, None] + c * LX - s * LY
    wy = ys[:, None, None] + s * LX + c * LY
    h = emap.interpolate(wx, wy)
    valid = np.isfinite(h).all(axis=(1, 2))
    m = n // 2
    h = h - h[:, m:m + 1, m:m + 1]
    return h, valid


def extract_patch(emap: ElevationMap, pose) -> Patch:
    x, y, yaw = pose
    samples, valid = extract_patches(emap, [x], [y], [yaw])
    if not valid[0]:
        raise OutOfBoundsError(f"patch footprint at ({x:.3f}, {y:.3f}, yaw={yaw:.3f}) leaves the known region")
    return Patch(samples=samples[0], yaw=float(yaw))


def features_batch(samples: np.ndarray, spacing: float = PATCH_SPACING) -> np.ndarray:
    """Descriptors for a stack of patches ``(K, n, n)`` -> ``(K, 5)``.

    Columns follow FEATURE_NAMES: mean sagittal slope, mean lateral slope,
    height standard deviation, height range, max absolute cell-to-cell gradient.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 2:
        samples = samples[None]
    dx = np.diff(samples, axis=2) / spacing
    dy = np.diff(samples, axis=1) / spacing
    K = samples.shape[0]
    flat = samples.reshape(K, -1)
    out = np.empty((K, 5))
    out[:, 0] = dx.reshape(K, -1).mean(axis=1)
    out[:, 1] = dy.reshape(K, -1).mean(axis=1)
    out[:, 2] = flat.std(axis=1)
    out[:, 3] = flat.max(axis=1) - flat.min(axis=1)
    out[:, 4] = np.maximum(np.abs(dx).reshape(K, -1).max(axis=1), np.abs(dy).reshape(K, -1).max(axis=1))
    return out


def patch_features(patch: Patch) -> np.ndarray:
    return features_batch(patch.samples, patch.spacing)[0]


# --- file formats -----------------------------------------------------------

def comment_lines(comments: dict | None) -> list[str]:
    """``# key = value`` lines, sorted by key; loaders skip lines starting with '#'."""
    return [f"# {k} = {v}" for k, v in sorted((comments or {}).items())]


def save_elevation_map(emap: ElevationMap, path, comments: dict | None = None) -> None:
    """ASCII ``ELEV v1 <width> <height> <resolution> <x0> <y0>``, optional
    ``#`` comment lines, then heights row-major."""
    h = np.where(emap.known, emap.heights, np.nan)
    lines = [f"ELEV v1 {emap.width} {emap.height} {emap.resolution!r} {emap.origin[0]!r} {emap.origin[1]!r}"]
    lines += comment_lines(comments)
    for row in h:
        lines.append(" ".join("nan" if not np.isfinite(v) else repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_elevation_map(path) -> ElevationMap:
    text = " ".join(ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")).split()
    if len(text) < 7 or text[0] != "ELEV" or text[1] != "v1":
        raise ParameterError(f"{path}: not an ELEV v1 file")
    w, h = int(text[2]), int(text[3])
    res, x0, y0 = float(text[4]), float(text[5]), float(text[6])
    vals = np.array([float(t) for t in text[7:]])
    if vals.size != w * h:
        raise ParameterError(f"{path}: expected {w * h} heights, found {vals.size}")
    return ElevationMap(origin=(x0, y0), resolution=res, heights=vals.reshape(h, w))


def write_pgm(grid: np.ndarray, path, lo: float, hi: float) -> None:
    """Plain PGM (P2). Gray = round(255 * (value - lo) / (hi - lo)) clipped to
    [0, 255]; NaN cells are written as 0. Row 0 of the image is the top (max y)."""
    g = np.asarray(grid, dtype=float)
    span = hi - lo if hi > lo else 1.0
    gray = np.clip(np.round(255.0 * (g - lo) / span), 0, 255)
    gray = np.where(np.isfinite(gray), gray, 0).astype(int)[::-1]
    lines = ["P2", f"{gray.shape[1]} {gray.shape[0]}", "255"]
    lines += [" ".join(map(str, row)) for row in gray]
    Path(path).write_text("\n".join(lines) + "\n")


def write_height_pgm(emap: ElevationMap, path) -> tuple[float, float]:
    h = np.where(emap.known, emap.heights, np.nan)
    lo, hi = float(np.nanmin(h)), float(np.nanmax(h))
    write_pgm(h, path, lo, hi)
    return lo, hi
