"""Risk-sensitive command-velocity maps and the baseline traversability scores."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .instability import V_MAX, InstabilityEstimate
from .terrain import (PATCH_SPACING, ElevationMap, Patch, comment_lines,
                      extract_patches, features_batch, patch_features, write_pgm)

DELTA_LIMIT = 3.0
ALPHA = 0.97
V_STEP = 0.05
W_STEP = 0.075
V_FLOOR = 0.001
W_FLOOR = 0.001
YAW_BINS = 8
SCORE_FLOOR = 0.01

# descending sweep candidates, a_max down to zero
V_GRID = np.round(np.arange(10, -1, -1) * V_STEP, 12)
W_GRID = np.round(np.arange(10, -1, -1) * W_STEP, 12)

BASELINES = ("LearnedInS", "ManualBiped", "QuadFoothold")


@dataclass(frozen=True)
class RiskParams:
    delta_limit: float = DELTA_LIMIT
    alpha: float = ALPHA

    def __post_init__(self):
        if not self.delta_limit > 0:
            raise ParameterError("delta_limit must be positive")
        if not 0.5 < self.alpha < 1.0:
            raise ParameterError("alpha must lie in (0.5, 1)")


@dataclass(frozen=True)
class StabilityCommand:
    v_star: float
    w_star: float


# --- normal quantile ----------------------------------------------------------

# Acklam's rational approximation (relative error ~1.15e-9), refined with one
# Halley step on erfc.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ParameterError(f"quantile level must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    elif p <= 1 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log(1 - p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    e = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def var_gaussian(est: InstabilityEstimate, alpha: float) -> float:
    """Value at risk of a Gaussian instability estimate: mean + z_alpha * sigma."""
    return est.mean + normal_quantile(alpha) * est.sigma


# --- stability-aware commands -------------------------------------------------------

def _first_safe(ok, grid, floor):
    """ok: (K, len(grid)) mask in sweep order; first passing candidate or the floor.

    A passing candidate of exactly zero is also reported as the floor.
    """
    any_ok = ok.any(axis=1)
    idx = np.argmax(ok, axis=1)
    return np.maximum(np.where(any_ok, grid[idx], floor), floor)


def commands_from_features(model, features, risk: RiskParams = RiskParams()):
    """Sweep v (with w=0) and w (with v=0) downward; return ``(v_star, w_star)`` arrays."""
    f = np.atleast_2d(features)
    K = f.shape[0]
    z = normal_quantile(risk.alpha)
    fr = np.repeat(f, V_GRID.size, axis=0)
    mean, sigma = model.predict_arrays(fr, np.tile(V_GRID, K), 0.0)
    v_ok = (mean + z * sigma).reshape(K, -1) < risk.delta_limit
    fr = np.repeat(f, W_GRID.size, axis=0)
    mean, sigma = model.predict_arrays(fr, 0.0, np.tile(W_GRID, K))
    w_ok = (mean + z * sigma).reshape(K, -1) < risk.delta_limit
    return _first_safe(v_ok, V_GRID, V_FLOOR), _first_safe(w_ok, W_GRID, W_FLOOR)


def stability_aware_command(model, patch: Patch, risk: RiskParams = RiskParams()) -> StabilityCommand:
    v, w = commands_from_features(model, patch_features(patch)[None], risk)
    return StabilityCommand(float(v[0]), float(w[0]))


# --- baseline scores ---------------------------------------------------------------

def _neighbor_diff(h):
    """Max absolute height difference to the 4-neighbors, per cell."""
    h = np.asarray(h, dtype=float)
    d = np.zeros_like(h)
    dx = np.abs(np.diff(h, axis=-1))
    dy = np.abs(np.diff(h, axis=-2))
    d[..., :, :-1] = np.maximum(d[..., :, :-1], dx)
    d[..., :, 1:] = np.maximum(d[..., :, 1:], dx)
    d[..., :-1, :] = np.maximum(d[..., :-1, :], dy)
    d[..., 1:, :] = np.maximum(d[..., 1:, :], dy)
    return d


def manual_biped_scores(samples, spacing=PATCH_SPACING, max_slope_deg=20.0, max_step=0.08):
    """Fraction of cells with local slope <= 20 deg and neighbor step <= 0.08 m."""
    s = np.asarray(samples, dtype=float)
    if s.ndim == 2:
        s = s[None]
    gy, gx = np.gradient(s, spacing, axis=(1, 2))
    slope_ok = np.hypot(gx, gy) <= math.tan(math.radians(max_slope_deg)) + 1e-12
    step_ok = _neighbor_diff(s) <= max_step + 1e-12
    frac = (slope_ok & step_ok).reshape(s.shape[0], -1).mean(axis=1)
    return np.maximum(frac, SCORE_FLOOR)


def quad_foothold_scores(samples, decay=0.05, reach=2):
    """Mean of exp(-D / decay) with D the strongest nearby discontinuity,
    discounted by 1 / (1 + Chebyshev distance) up to ``reach`` cells away."""
    s = np.asarray(samples, dtype=float)
    if s.ndim == 2:
        s = s[None]
    disc = _neighbor_diff(s)
    K, n, m = s.shape
    pad = np.pad(disc, ((0, 0), (reach, reach), (reach, reach)))
    D = np.zeros_like(disc)
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            wgt = 1.0 / (1.0 + max(abs(dx), abs(dy)))
            shifted = pad[:, reach + dy:reach + dy + n, reach + dx:reach + dx + m]
            D = np.maximum(D, wgt * shifted)
    score = np.exp(-D / decay).reshape(K, -1).mean(axis=1)
    return np.maximum(score, SCORE_FLOOR)


def learned_ins_calibration(model, risk: RiskParams = RiskParams()) -> float:
    flat = np.zeros((1, 5))
    mean, sigma = model.predict_arrays(flat, V_MAX, 0.0)
    return float(mean[0] + normal_quantile(risk.alpha) * sigma[0])


def learned_ins_scores_from_features(model, features, risk: RiskParams = RiskParams(), calibration=None):
    c = learned_ins_calibration(model, risk) if calibration is None else calibration
    mean, sigma = model.predict_arrays(np.atleast_2d(features), V_MAX, 0.0)
    var = mean + normal_quantile(risk.alpha) * sigma
    with np.errstate(divide="ignore"):
        t = np.where(var > 0, np.minimum(1.0, c / var), 1.0)
    return np.maximum(t, SCORE_FLOOR)


def manual_biped_score(patch: Patch) -> float:
    return float(manual_biped_scores(patch.samples, patch.spacing)[0])


def quad_foothold_score(patch: Patch) -> float:
    return float(quad_foothold_scores(patch.samples)[0])


def learned_ins_score(model, patch: Patch, risk: RiskParams = RiskParams()) -> float:
    return float(learned_ins_scores_from_features(model, patch_features(patch)[None], risk)[0])


# --- traversability map ---------------------------------------------------------------

def bin_yaw(b: int) -> float:
    return math.atan2(math.sin(2 * math.pi * b / YAW_BINS), math.cos(2 * math.pi * b / YAW_BINS))


def nearest_bin(heading):
    return np.mod(np.round(np.asarray(heading) / (2 * math.pi / YAW_BINS)).astype(int), YAW_BINS)


def nearest_bin_scalar(heading: float) -> int:
    # round() and np.round both round half to even, so this matches nearest_bin
    return round(heading / (2 * math.pi / YAW_BINS)) % YAW_BINS


@dataclass
class TraversabilityMap:
    """Per-cell (per-yaw-bin) commands on a grid; NaN marks undefined entries.

    ``v_star``/``w_star`` are shaped ``(YAW_BINS, height, width)``; ``scores``
    maps baseline name -> ``(height, width)`` grid evaluated on yaw-0 patches.
    """

    origin: tuple
    resolution: float
    v_star: np.ndarray
    w_star: np.ndarray
    scores: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def width(self):
        return self.v_star.shape[2]

    @property
    def height(self):
        return self.v_star.shape[1]

    def cell_index(self, x, y):
        ix = np.floor((np.asarray(x, dtype=float) - self.origin[0]) / self.resolution).astype(int)
        iy = np.floor((np.asarray(y, dtype=float) - self.origin[1]) / self.resolution).astype(int)
        inside = (ix >= 0) & (ix < self.width) & (iy >= 0) & (iy < self.height)
        return np.clip(ix, 0, self.width - 1), np.clip(iy, 0, self.height - 1), inside

    def cell_center(self, ix, iy):
        return (self.origin[0] + (np.asarray(ix) + 0.5) * self.resolution,
                self.origin[1] + (np.asarray(iy) + 0.5) * self.resolution)

    def _lookup(self, layer, x, y):
        ix, iy, inside = self.cell_index(x, y)
        return np.where(inside, layer[..., iy, ix], np.nan)

    def lookup_v(self, x, y, heading):
        b = nearest_bin(heading)
        ix, iy, inside = self.cell_index(x, y)
        return np.where(inside, self.v_star[b, iy, ix], np.nan)

    def lookup_w(self, x, y, heading):
        b = nearest_bin(heading)
        ix, iy, inside = self.cell_index(x, y)
        return np.where(inside, self.w_star[b, iy, ix], np.nan)

    def values_along(self, layer, b, xs, ys):
        """Fast path for one yaw bin over 1-D point arrays; NaN outside the grid."""
        fx = (xs - self.origin[0]) / self.resolution
        fy = (ys - self.origin[1]) / self.resolution
        inside = (fx >= 0) & (fx < self.width) & (fy >= 0) & (fy < self.height)
        if inside.all():
            return layer[b, fy.astype(int), fx.astype(int)]
        out = np.full(xs.shape, np.nan)
        out[inside] = layer[b, fy[inside].astype(int), fx[inside].astype(int)]
        return out

    def value_at(self, layer, b, x, y) -> float:
        ix = math.floor((x - self.origin[0]) / self.resolution)
        iy = math.floor((y - self.origin[1]) / self.resolution)
        if 0 <= ix < self.width and 0 <= iy < self.height:
            return float(layer[b, iy, ix])
        return math.nan

    def lookup_score(self, name, x, y):
        return self._lookup(self.scores[name], x, y)

    def mean_v_at(self, x, y) -> float:
        ix, iy, inside = self.cell_index(x, y)
        if not inside:
            return math.nan
        col = self.v_star[:, iy, ix]
        return float(np.mean(col[np.isfinite(col)])) if np.isfinite(col).any() else math.nan

    def mean_v(self):
        """Bin-averaged v* per cell (NaN where no bin is defined)."""
        ok = np.isfinite(self.v_star)
        n = ok.sum(axis=0)
        total = np.where(ok, self.v_star, 0.0).sum(axis=0)
        return np.where(n > 0, total / np.maximum(n, 1), np.nan)


def build_traversability_map(emap: ElevationMap, model, risk: RiskParams = RiskParams(),
                             stride: int = 1, baselines: bool = True,
                             workers: int = 1, chunk: int = 4096) -> TraversabilityMap:
    """Evaluate commands on the patch at every (cell, yaw bin) of a grid that
    takes every ``stride``-th elevation cell.

    Work is split in fixed chunks, so any ``workers`` count returns identical
    arrays.
    """
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    res = emap.resolution * stride
    W = max(emap.width // stride, 0)
    H = max(emap.height // stride, 0)
    v_star = np.full((YAW_BINS, H, W), np.nan)
    w_star = np.full((YAW_BINS, H, W), np.nan)
    scores = {name: np.full((H, W), np.nan) for name in BASELINES} if baselines else {}
    out = TraversabilityMap(emap.origin, res, v_star, w_star, scores,
                            meta={"delta_limit": risk.delta_limit, "alpha": risk.alpha, "stride": stride})
    if W == 0 or H == 0:
        return out
    iy, ix = np.mgrid[0:H, 0:W]
    xs, ys = out.cell_center(ix.ravel(), iy.ravel())
    n_cells = xs.size
    calib = learned_ins_calibration(model, risk) if baselines else None

    jobs = []
    for b in range(YAW_BINS):
        for lo in range(0, n_cells, chunk):
            jobs.append((b, lo, min(lo + chunk, n_cells)))

    def run(job):
        b, lo, hi = job
        samples, valid = extract_patches(emap, xs[lo:hi], ys[lo:hi], bin_yaw(b))
        res_v = np.full(hi - lo, np.nan)
        res_w = np.full(hi - lo, np.nan)
        sc = {}
        if valid.any():
            feats = features_batch(samples[valid])
            v, w = commands_from_features(model, feats, risk)
            res_v[valid], res_w[valid] = v, w
            if baselines and b == 0:
                for name, vals in (
                        ("LearnedInS", learned_ins_scores_from_features(model, feats, risk, calib)),
                        ("ManualBiped", manual_biped_scores(samples[valid])),
                        ("QuadFoothold", quad_foothold_scores(samples[valid]))):
                    col = np.full(hi - lo, np.nan)
                    col[valid] = vals
                    sc[name] = col
        return res_v, res_w, sc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for (b, lo, hi), (rv, rw, sc) in zip(jobs, results):
        v_star[b].reshape(-1)[lo:hi] = rv
        w_star[b].reshape(-1)[lo:hi] = rw
        for name, col in sc.items():
            scores[name].reshape(-1)[lo:hi] = col
    return out


# --- export ------------------------------------------------------------------------

def _write_grid_csv(grid, path):
    lines = [",".join("nan" if not np.isfinite(v) else repr(float(v)) for v in row) for row in grid]
    Path(path).write_text("\n".join(lines) + "\n")


def _read_grid_csv(path):
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array([[float(v) for v in r] for r in rows], dtype=float)


def save_travmap(tm: TraversabilityMap, out_dir, comments: dict | None = None) -> Path:
    """Directory layout: ``travmap.txt`` header, ``v_star_bin<b>.csv``,
    ``w_star_bin<b>.csv``, ``score_<name>.csv`` (rows ordered by increasing y)."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    head = [f"TRAVMAP v1 {tm.width} {tm.height} {tm.resolution!r} {tm.origin[0]!r} {tm.origin[1]!r} {YAW_BINS}",
            "scores " + " ".join(sorted(tm.scores))]
    head += [f"meta {k} {v}" for k, v in sorted(tm.meta.items())]
    head += comment_lines(comments)
    (d / "travmap.txt").write_text("\n".join(head) + "\n")
    for b in range(YAW_BINS):
        _write_grid_csv(tm.v_star[b], d / f"v_star_bin{b}.csv")
        _write_grid_csv(tm.w_star[b], d / f"w_star_bin{b}.csv")
    for name, grid in tm.scores.items():
        _write_grid_csv(grid, d / f"score_{name}.csv")
    return d


def load_travmap(in_dir) -> TraversabilityMap:
    d = Path(in_dir)
    lines = [ln for ln in (d / "travmap.txt").read_text().splitlines() if not ln.startswith("#")]
    head = lines[0].split()
    if head[:2] != ["TRAVMAP", "v1"]:
        raise ParameterError(f"{d}: not a TRAVMAP v1 directory")
    W, H = int(head[2]), int(head[3])
    res, x0, y0, bins = float(head[4]), float(head[5]), float(head[6]), int(head[7])
    if bins != YAW_BINS:
        raise ParameterError(f"{d}: expected {YAW_BINS} yaw bins, found {bins}")
    names = lines[1].split()[1:] if len(lines) > 1 else []
    meta = {}
    for ln in lines[2:]:
        parts = ln.split()
        if len(parts) == 3 and parts[0] == "meta":
            meta[parts[1]] = float(parts[2])
    v = np.stack([_read_grid_csv(d / f"v_star_bin{b}.csv") for b in range(bins)]).reshape(bins, H, W)
    w = np.stack([_read_grid_csv(d / f"w_star_bin{b}.csv") for b in range(bins)]).reshape(bins, H, W)
    scores = {n: _read_grid_csv(d / f"score_{n}.csv").reshape(H, W) for n in names}
    return TraversabilityMap((x0, y0), res, v, w, scores, meta)


def write_v_star_pgm(tm: TraversabilityMap, path) -> None:
    """Bin-averaged v* as PGM; gray is linear from 0.001 (0) to 0.5 (255)."""
    write_pgm(tm.mean_v(), path, V_FLOOR, V_MAX)
