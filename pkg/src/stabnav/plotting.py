"""Figures for the CLI: PPM overlays (no dependencies) and matplotlib PNGs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .traversability import V_FLOOR, V_MAX, TraversabilityMap  # noqa: E402

# overlay palette (RGB)
PATH_COLOR = (255, 0, 0)
TRAJ_COLOR = (0, 120, 255)
START_COLOR = (0, 200, 0)
GOAL_COLOR = (255, 200, 0)
UNDEFINED_COLOR = (0, 0, 0)

plt.rcParams.update({"font.size": 9, "figure.dpi": 110, "savefig.bbox": "tight"})


def _to_pixel(grid_origin, res, shape, x, y):
    ix = int(np.floor((x - grid_origin[0]) / res))
    iy = int(np.floor((y - grid_origin[1]) / res))
    if 0 <= ix < shape[1] and 0 <= iy < shape[0]:
        return shape[0] - 1 - iy, ix
    return None


def _draw_polyline(img, origin, res, pts, color):
    H, W = img.shape[:2]
    for a, b in zip(pts, pts[1:]):
        n = max(2, int(np.ceil(np.hypot(b[0] - a[0], b[1] - a[1]) / (0.5 * res))) + 1)
        for t in np.linspace(0.0, 1.0, n):
            px = _to_pixel(origin, res, (H, W), a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
            if px is not None:
                img[px] = color


def overlay_image(grid, origin, res, lo, hi, path_pts=(), traj_pts=(), start=None, goal=None):
    """RGB image (top row = max y) of a scalar grid in gray with overlays."""
    g = np.asarray(grid, dtype=float)
    span = hi - lo if hi > lo else 1.0
    gray = np.clip(np.round(255.0 * (g - lo) / span), 0, 255)
    img = np.repeat(np.where(np.isfinite(gray), gray, 0).astype(np.uint8)[::-1, :, None], 3, axis=2)
    img[np.isnan(g)[::-1]] = UNDEFINED_COLOR
    if len(path_pts) > 1:
        _draw_polyline(img, origin, res, list(path_pts), PATH_COLOR)
    if len(traj_pts) > 1:
        _draw_polyline(img, origin, res, list(traj_pts), TRAJ_COLOR)
    for p, col in ((start, START_COLOR), (goal, GOAL_COLOR)):
        if p is None:
            continue
        px = _to_pixel(origin, res, img.shape[:2], p[0], p[1])
        if px is not None:
            r0, c0 = px
            img[max(r0 - 1, 0):r0 + 2, max(c0 - 1, 0):c0 + 2] = col
    return img


def write_ppm(img, path) -> None:
    """Plain PPM (P3)."""
    img = np.asarray(img, dtype=np.uint8)
    H, W = img.shape[:2]
    lines = ["P3", f"{W} {H}", "255"]
    lines += [" ".join(map(str, row.reshape(-1))) for row in img]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ppm(path) -> np.ndarray:
    tok = Path(path).read_text().split()
    if tok[0] != "P3":
        raise ValueError(f"{path}: not a plain PPM")
    W, H = int(tok[1]), int(tok[2])
    return np.array(tok[4:4 + 3 * W * H], dtype=int).reshape(H, W, 3)


def travmap_overlay(tm: TraversabilityMap, path_pts=(), traj_pts=(), start=None, goal=None):
    return overlay_image(tm.mean_v(), tm.origin, tm.resolution, V_FLOOR, V_MAX,
                         path_pts, traj_pts, start, goal)


# --- matplotlib figures ------------------------------------------------------------

def _extent(origin, res, shape):
    return (origin[0], origin[0] + shape[1] * res, origin[1], origin[1] + shape[0] * res)


def plot_elevation(emap, path, title="elevation"):
    fig, ax = plt.subplots(figsize=(5, 4))
    h = np.where(emap.known, emap.heights, np.nan)
    im = ax.imshow(h, origin="lower", extent=_extent(emap.origin, emap.resolution, h.shape), cmap="terrain")
    fig.colorbar(im, ax=ax, label="height [m]")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title)
    fig.savefig(path)
    plt.close(fig)


def plot_travmap(tm: TraversabilityMap, path, path_pts=(), traj_pts=(), start=None, goal=None,
                 title="bin-averaged v* [m/s]"):
    fig, ax = plt.subplots(figsize=(5, 4))
    mv = tm.mean_v()
    im = ax.imshow(mv, origin="lower", extent=_extent(tm.origin, tm.resolution, mv.shape),
                   cmap="viridis", vmin=0.0, vmax=V_MAX)
    fig.colorbar(im, ax=ax, label="v* [m/s]")
    if len(path_pts):
        p = np.asarray(path_pts)
        ax.plot(p[:, 0], p[:, 1], "r.-", lw=1, ms=3, label="plan")
    if len(traj_pts):
        t = np.asarray(traj_pts)
        ax.plot(t[:, 0], t[:, 1], color="tab:cyan", lw=1, label="executed")
    if start is not None:
        ax.plot(*start[:2], "go", ms=5)
    if goal is not None:
        ax.plot(*goal[:2], "y*", ms=9)
    if len(path_pts) or len(traj_pts):
        ax.legend(loc="upper right", fontsize=7)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title)
    fig.savefig(path)
    plt.close(fig)


def plot_instability_trace(result, path, fall=None):
    d = np.array([x[2] for x in result.trajectory])
    fig, ax = plt.subplots(figsize=(5, 2.6))
    if d.size:
        ax.plot(np.arange(1, d.size + 1), d, lw=1)
    if fall is not None:
        ax.axhline(fall.delta0, color="r", ls="--", lw=0.8, label="fall midpoint")
        ax.legend(fontsize=7)
    ax.set_xlabel("step")
    ax.set_ylabel("sampled instability")
    ax.set_title(f"{result.label} seed {result.seed}: {result.reason}")
    fig.savefig(path)
    plt.close(fig)


def plot_losses(logs: dict, path):
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for name, lg in logs.items():
        ax.plot(np.arange(1, len(lg.epoch_losses) + 1), lg.epoch_losses, "o-", ms=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.savefig(path)
    plt.close(fig)


def plot_benchmark(report, path):
    cells = report.cells
    labels = [f"{c.world}\n{c.planner}" for c in cells]
    x = np.arange(len(cells))
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(max(6, 1.3 * len(cells)), 3.2))
    a1.bar(x, [100 * c.success_rate for c in cells], color="tab:green")
    a1.set_ylabel("success rate [%]")
    mx = [c.max_instability if c.max_instability is not None else 0.0 for c in cells]
    mn = [c.mean_instability if c.mean_instability is not None else 0.0 for c in cells]
    a2.bar(x - 0.2, mn, 0.4, label="mean")
    a2.bar(x + 0.2, mx, 0.4, label="max")
    a2.set_ylabel("instability (successful trials)")
    a2.legend(fontsize=7)
    for a in (a1, a2):
        a.set_xticks(x)
        a.set_xticklabels(labels, fontsize=6)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
