"""Closed-loop episodes (global plan -> MPC tracking -> sampled instability and
falls) and a seeded benchmark harness."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParameterError, ParseError
from .global_planner import Path2D, PlannerConfig, plan
from .instability import OracleModel, oracle_mean, oracle_sigma
from .local_planner import Control, LipParams, MpcConfig, RobotState, lip_step, mpc_solve, wrap
from .terrain import ElevationMap, TerrainSpec, extract_patches, features_batch, generate_terrain, load_elevation_map
from .traversability import (BASELINES, SCORE_FLOOR, V_FLOOR, W_FLOOR, RiskParams,
                             TraversabilityMap, build_traversability_map)
from .instability import V_MAX, W_MAX

PLANNERS = ("STATE",) + BASELINES


@dataclass(frozen=True)
class FallModel:
    """Per-step fall probability ``sigmoid(k (delta - delta0))``."""

    k: float = 2.0
    delta0: float = 6.0

    def probability(self, delta: float) -> float:
        z = self.k * (delta - self.delta0)
        if z >= 0:
            return 1.0 / (1.0 + math.exp(-z))
        e = math.exp(z)
        return e / (1.0 + e)


@dataclass
class EpisodeConfig:
    world: object                     # TerrainSpec, ElevationMap or path to an ELEV file
    start: tuple                      # (x, y, heading)
    goal: tuple                       # (x, y)
    planner: str = "STATE"
    weight: float = 0.5               # w of the baseline cost
    risk: RiskParams = field(default_factory=RiskParams)
    seed: int = 0
    advance_radius: float = 0.5
    waypoint_spacing: float = 0.25
    goal_radius: float = 0.3
    max_steps: int = 500
    fall: FallModel = field(default_factory=FallModel)
    lip: LipParams = field(default_factory=LipParams)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    planner_config: PlannerConfig = field(default_factory=PlannerConfig)
    travmap_stride: int = 3
    model: object = None              # None -> oracle mean/sigma
    world_name: str = "world"

    def validate(self):
        if self.planner not in PLANNERS:
            raise ParameterError(f"unknown planner {self.planner!r}; choose from {PLANNERS}")
        if self.weight < 0:
            raise ParameterError("weight must be >= 0")
        if len(self.start) != 3 or len(self.goal) != 2:
            raise ParameterError("start is (x, y, heading) and goal is (x, y)")
        if not (self.advance_radius > 0 and self.waypoint_spacing > 0 and self.goal_radius > 0 and self.max_steps >= 1):
            raise ParameterError("radii must be positive and max_steps >= 1")
        if self.travmap_stride < 1:
            raise ParameterError("travmap_stride must be >= 1")
        self.mpc.validate()
        self.planner_config.validate()

    @property
    def label(self) -> str:
        return self.planner if self.planner == "STATE" else f"{self.planner}(w={self.weight:g})"


@dataclass
class EpisodeResult:
    success: bool
    reason: str
    steps: int
    navigation_time: float
    mean_instability: float
    max_instability: float
    trajectory: list                  # (RobotState, Control, delta) per executed step
    path: Path2D | None = None
    seed: int = 0
    label: str = ""


@dataclass
class PreparedWorld:
    emap: ElevationMap
    travmap: TraversabilityMap


def load_world(world) -> ElevationMap:
    if isinstance(world, ElevationMap):
        return world
    if isinstance(world, TerrainSpec):
        return generate_terrain(world)
    if isinstance(world, (str, Path)):
        return load_elevation_map(world)
    raise ParameterError(f"cannot build a world from {type(world).__name__}")


def prepare_world(config: EpisodeConfig) -> PreparedWorld:
    emap = load_world(config.world)
    model = config.model if config.model is not None else OracleModel()
    tm = build_traversability_map(emap, model, config.risk, stride=config.travmap_stride)
    return PreparedWorld(emap, tm)


def _commands_at(config: EpisodeConfig, tm: TraversabilityMap, xs, ys, headings):
    """Per-step (v*, w*) at the given poses; undefined cells give the floor."""
    if config.planner == "STATE":
        v = tm.lookup_v(xs, ys, headings)
        w = tm.lookup_w(xs, ys, headings)
    else:
        t = tm.lookup_score(config.planner, xs, ys)
        t = np.where(np.isfinite(t), t, SCORE_FLOOR)
        v, w = t * V_MAX, t * W_MAX
    v = np.where(np.isfinite(v), np.maximum(v, V_FLOOR), V_FLOOR)
    w = np.where(np.isfinite(w), np.maximum(w, W_FLOOR), W_FLOOR)
    return np.column_stack([v, w])


def densify_path(points, spacing: float):
    """Resample a polyline at most ``spacing`` apart (excluding its first point).

    Returns the waypoints and the heading of the segment leading into each.
    Tracking a dense path with the fixed advance radius keeps the robot close
    to the planned corridor instead of cutting corners between sparse nodes.
    """
    out, heads = [], []
    for a, b in zip(points, points[1:]):
        L = math.hypot(b[0] - a[0], b[1] - a[1])
        if L <= 1e-12:
            continue
        h = math.atan2(b[1] - a[1], b[0] - a[0])
        m = max(1, math.ceil(L / spacing))
        for j in range(1, m + 1):
            out.append((a[0] + (b[0] - a[0]) * j / m, a[1] + (b[1] - a[1]) * j / m))
            heads.append(h)
    return out, heads


def _failed(reason, config, traj=(), path=None) -> EpisodeResult:
    return _result(False, reason, config, list(traj), path)


def _result(success, reason, config, traj, path) -> EpisodeResult:
    deltas = [d for _, _, d in traj]
    mean_d = float(np.mean(deltas)) if deltas else math.nan
    max_d = float(np.max(deltas)) if deltas else math.nan
    return EpisodeResult(success, reason, len(traj), len(traj) * config.lip.T, mean_d, max_d,
                         traj, path, config.seed, config.label)


def run_episode(config: EpisodeConfig, prepared: PreparedWorld | None = None) -> EpisodeResult:
    """Plan once, then track the plan step by step until the goal, a fall or the
    step budget.  Deterministic in ``config.seed``."""
    config.validate()
    prepared = prepared or prepare_world(config)
    emap, tm = prepared.emap, prepared.travmap
    sx, sy, sphi = (float(c) for c in config.start)
    gx, gy = (float(c) for c in config.goal)
    if math.hypot(gx - sx, gy - sy) <= config.goal_radius:
        return _result(True, "start within goal radius", config, [], None)

    pc = config.planner_config
    if config.planner == "STATE":
        pc = replace(pc, mode="state")
    else:
        pc = replace(pc, mode="baseline", scorer=config.planner, weight=config.weight)
    try:
        path = plan((sx, sy), (gx, gy), pc, tm, seed=config.seed,
                    start_heading=sphi if config.planner == "STATE" else None)
    except ParameterError as exc:
        return _failed(f"planning failed: {exc}", config)
    if not path.success:
        return _failed(f"planning failed: {path.reason}", config, path=path)

    wps, wp_heading = densify_path([(sx, sy)] + [tuple(p) for p in path.waypoints[1:]] + [(gx, gy)],
                                   config.waypoint_spacing)

    noise_rng, fall_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    n = config.mpc.horizon + 1
    T = config.lip.T
    state = RobotState(sx, sy, wrap(sphi), 0.0)
    predicted = None
    traj = []
    k = 0
    for _ in range(config.max_steps):
        while k < len(wps) - 1 and math.hypot(wps[k][0] - state.x, wps[k][1] - state.y) < config.advance_radius:
            k += 1
        # commands frozen at the previous prediction, shifted by one step
        if predicted is None:
            poses = np.tile([state.x, state.y, state.phi], (n, 1))
        else:
            poses = np.vstack([[state.x, state.y, state.phi], predicted[2:n + 1, :3]])
        commands = _commands_at(config, tm, poses[:, 0], poses[:, 1], poses[:, 2])
        res = mpc_solve(state, (wps[k][0], wps[k][1], wp_heading[k]), commands, config.mpc, config.lip)
        u: Control = res.first
        new = lip_step(state, u, config.lip)
        v_eff = math.hypot(new.x - state.x, new.y - state.y) / T
        w_eff = abs(u.u_dphi) / T
        samples, valid = extract_patches(emap, [new.x], [new.y], [new.phi])
        if not valid[0]:
            return _failed("left the known map", config, traj, path)
        f = features_batch(samples)[0]
        delta = float(oracle_mean(f, v_eff, w_eff)) + float(oracle_sigma(f, v_eff, w_eff)) * noise_rng.standard_normal()
        traj.append((new, u, delta))
        if fall_rng.random() < config.fall.probability(delta):
            return _failed("fell", config, traj, path)
        state = new
        predicted = res.states
        if math.hypot(gx - state.x, gy - state.y) <= config.goal_radius:
            return _result(True, "goal reached", config, traj, path)
    return _failed("step budget exhausted", config, traj, path)


# --- trajectory dump ---------------------------------------------------------------

def save_trajectory(result: EpisodeResult, path, extra: dict | None = None) -> None:
    lines = [f"TRAJ v1 label={result.label} seed={result.seed} success={int(result.success)} "
             f"steps={result.steps} navigation_time={result.navigation_time!r}"]
    lines.append(f"# reason = {result.reason}")
    for k, v in sorted((extra or {}).items()):
        lines.append(f"# {k} = {v}")
    lines.append("# step x y phi v_loc u_f u_dphi delta")
    for i, (st, u, d) in enumerate(result.trajectory):
        lines.append(" ".join([str(i + 1)] + [repr(float(c)) for c in
                                               (st.x, st.y, st.phi, st.v_loc, u.u_f, u.u_dphi, d)]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path):
    """Returns ``(header dict, array (steps, 8))``."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split()[:2] != ["TRAJ", "v1"]:
        raise ParseError(f"{path}: not a TRAJ v1 file")
    head = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
    rows = [[float(t) for t in ln.split()] for ln in lines[1:] if ln.strip() and not ln.startswith("#")]
    return head, np.array(rows).reshape(-1, 8)


# --- benchmark ---------------------------------------------------------------------

@dataclass
class CellResult:
    world: str
    planner: str
    trials: int
    successes: int
    mean_instability: float | None    # mean over successful trials of per-trial means
    max_instability: float | None     # mean over successful trials of per-trial maxima
    navigation_time: float | None

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0


def summarize_cell(world: str, planner: str, episodes) -> CellResult:
    ok = [e for e in episodes if e.success and e.steps > 0]
    ok_any = [e for e in episodes if e.success]
    mean_i = float(np.mean([e.mean_instability for e in ok])) if ok else None
    max_i = float(np.mean([e.max_instability for e in ok])) if ok else None
    nav = float(np.mean([e.navigation_time for e in ok_any])) if ok_any else None
    return CellResult(world, planner, len(episodes), len(ok_any), mean_i, max_i, nav)


@dataclass
class BenchmarkReport:
    cells: list
    episodes: dict                    # (world, planner) -> list of EpisodeResult in seed order
    seeds: list

    def cell(self, world, planner) -> CellResult:
        for c in self.cells:
            if c.world == world and c.planner == planner:
                return c
        raise KeyError((world, planner))

    COLUMNS = ("world", "planner", "trials", "successes", "success_rate",
               "mean_instability", "max_instability", "navigation_time_s")

    def _row(self, c: CellResult):
        def fmt(x):
            return "NA" if x is None else f"{x:.6f}"
        return [c.world, c.planner, str(c.trials), str(c.successes), f"{c.success_rate:.4f}",
                fmt(c.mean_instability), fmt(c.max_instability), fmt(c.navigation_time)]

    def to_csv(self, extra: dict | None = None) -> str:
        buf = io.StringIO()
        buf.write(f"# BENCH v1 seeds={','.join(map(str, self.seeds))}\n")
        for k, v in sorted((extra or {}).items()):
            buf.write(f"# {k} = {v}\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.COLUMNS)
        for c in self.cells:
            wr.writerow(self._row(c))
        return buf.getvalue()

    def format_table(self) -> str:
        rows = [list(self.COLUMNS)] + [[("-" if v == "NA" else v) for v in self._row(c)] for c in self.cells]
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        out = []
        for j, r in enumerate(rows):
            out.append("  ".join(v.ljust(widths[i]) if i < 2 else v.rjust(widths[i]) for i, v in enumerate(r)))
            if j == 0:
                out.append("  ".join("-" * w for w in widths))
        return "\n".join(out)


def run_benchmark(suite, trials: int, base_seed: int = 0, workers: int = 1,
                  prepared: dict | None = None) -> BenchmarkReport:
    """Run every template in ``suite`` for ``trials`` seeds ``base_seed + k``.

    Templates sharing a world object (and risk/model/stride) share one
    traversability map.  Results are merged in (template, seed) order.
    """
    if trials < 1:
        raise ParameterError("need at least one trial per cell")
    seeds = [base_seed + k for k in range(trials)]
    prepared = {} if prepared is None else prepared

    def key(t: EpisodeConfig):
        return (id(t.world), t.risk, t.travmap_stride, id(t.model))

    for t in suite:
        t.validate()
        if key(t) not in prepared:
            prepared[key(t)] = prepare_world(t)

    jobs = [(i, replace(t, seed=s)) for i, t in enumerate(suite) for s in seeds]

    def run(job):
        i, cfg = job
        return run_episode(cfg, prepared[key(suite[i])])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    episodes = {}
    for (i, _), r in zip(jobs, results):
        t = suite[i]
        episodes.setdefault((t.world_name, t.label), []).append(r)
    cells = [summarize_cell(w, p, eps) for (w, p), eps in episodes.items()]
    return BenchmarkReport(cells, episodes, seeds)
