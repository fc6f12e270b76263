"""TravRRT*: RRT* over a traversability map with traversal-time edge costs.

Two cost modes:

* ``state``: expected traversal time, sum of dl / v* over points along the
  edge plus the heading change at the edge start divided by w*;
* ``baseline``: sum of (1 + w / t) dl with ``t`` a baseline score layer.

Edge costs in ``state`` mode depend on the heading of the parent's incoming
edge, so a rewire is accepted only when neither the rewired node nor any of
its direct children gets more expensive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .traversability import YAW_BINS, TraversabilityMap, nearest_bin_scalar


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return -np.mod(math.pi - np.asarray(a, dtype=float), 2 * math.pi) + math.pi


@dataclass
class PlannerConfig:
    iterations: int = 500
    steer_step: float = 1.0
    gamma: float = 12.0
    goal_bias: float = 0.05
    mode: str = "state"           # "state" | "baseline"
    scorer: str = "LearnedInS"    # score layer used in baseline mode
    weight: float = 0.5           # w of the baseline trade-off cost
    spacing: float = 0.1
    goal_tolerance: float = 0.3
    sample_floor: float = 0.02

    def validate(self):
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if not self.spacing > 0 or not self.steer_step > 0:
            raise ParameterError("spacing and steer_step must be positive")
        if self.mode not in ("state", "baseline"):
            raise ParameterError(f"unknown cost mode {self.mode!r}")
        if self.weight < 0:
            raise ParameterError("baseline weight must be >= 0")


@dataclass
class Path2D:
    waypoints: list
    total_cost: float
    edge_costs: list
    success: bool = True
    reason: str = ""
    mode: str = "state"
    seed: int = 0

    def length(self):
        p = np.asarray(self.waypoints, dtype=float)
        return float(np.sum(np.hypot(*np.diff(p, axis=0).T))) if len(p) > 1 else 0.0


def _edge_points(p, q, spacing):
    L = math.hypot(q[0] - p[0], q[1] - p[1])
    M = max(2, math.ceil(L / spacing - 1e-9))
    t = (np.arange(M) + 0.5) / M
    return L, p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]), L / M


def edge_cost_state(p, q, prev_heading, travmap: TraversabilityMap, spacing=0.1, heading=None):
    """Traversal time from ``p`` to ``q`` in seconds (inf if infeasible).

    ``heading`` overrides the edge direction (needed for in-place turns);
    ``prev_heading=None`` charges no turn.
    """
    L, xs, ys, dl = _edge_points(p, q, spacing)
    if heading is None:
        heading = math.atan2(q[1] - p[1], q[0] - p[0]) if L > 0 else prev_heading
    cost = 0.0
    if L > 0:
        v = travmap.values_along(travmap.v_star, nearest_bin_scalar(heading), xs, ys)
        if not np.all(v > 0):
            return math.inf
        cost = float(np.sum(dl / v))
    if prev_heading is not None and heading is not None:
        dtheta = abs(math.pi - (math.pi - (heading - prev_heading)) % (2 * math.pi))
        if dtheta > 0:
            w = travmap.value_at(travmap.w_star, nearest_bin_scalar(prev_heading), xs[0], ys[0])
            if not w > 0:
                return math.inf
            cost += dtheta / w
    return cost


def edge_cost_baseline(p, q, travmap: TraversabilityMap, scorer: str, w: float, spacing=0.1):
    L, xs, ys, dl = _edge_points(p, q, spacing)
    if L == 0:
        return 0.0
    t = travmap.values_along(travmap.scores[scorer][None], 0, xs, ys)
    if not np.all(t > 0):
        return math.inf
    return float(np.sum((1.0 + w / t) * dl))


def _batch_points(P, Q, spacing):
    """Midpoint samples for many edges, padded to a common length.

    Returns lengths, xs, ys (k, Mmax), per-edge dl and a validity mask; the
    samples of each row match ``_edge_points`` for that edge.
    """
    d = Q - P
    L = np.hypot(d[:, 0], d[:, 1])
    M = np.maximum(2, np.ceil(L / spacing - 1e-9)).astype(int)
    j = np.arange(M.max())
    mask = j[None, :] < M[:, None]
    t = (j[None, :] + 0.5) / M[:, None]
    xs = P[:, 0:1] + t * d[:, 0:1]
    ys = P[:, 1:2] + t * d[:, 1:2]
    return L, xs, ys, L / M, mask


def _layer_lookup(tm: TraversabilityMap, layer, b, xs, ys):
    fx = (xs - tm.origin[0]) / tm.resolution
    fy = (ys - tm.origin[1]) / tm.resolution
    inside = (fx >= 0) & (fx < tm.width) & (fy >= 0) & (fy < tm.height)
    ix = np.clip(fx, 0, tm.width - 1).astype(int)
    iy = np.clip(fy, 0, tm.height - 1).astype(int)
    return np.where(inside, layer[b, iy, ix], np.nan)


def edge_costs_state_many(P, Q, prev_headings, travmap: TraversabilityMap, spacing=0.1):
    """Vectorized ``edge_cost_state`` for edges ``P[k] -> Q[k]``.

    ``prev_headings`` holds NaN where no turn is charged.  Returns
    ``(costs, headings)``.
    """
    P = np.asarray(P, dtype=float).reshape(-1, 2)
    Q = np.asarray(Q, dtype=float).reshape(-1, 2)
    prev = np.asarray(prev_headings, dtype=float)
    L, xs, ys, dl, mask = _batch_points(P, Q, spacing)
    heading = np.where(L > 0, np.arctan2(Q[:, 1] - P[:, 1], Q[:, 0] - P[:, 0]), prev)
    b = np.mod(np.round(np.nan_to_num(heading) / (2 * math.pi / YAW_BINS)).astype(int), YAW_BINS)
    v = _layer_lookup(travmap, travmap.v_star, b[:, None], xs, ys)
    ok = np.where(mask, v > 0, True).all(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cost = np.where(mask, dl[:, None] / v, 0.0).sum(axis=1)
    cost = np.where(L > 0, cost, 0.0)
    cost = np.where(ok | (L == 0), cost, math.inf)
    turn = np.isfinite(prev) & np.isfinite(heading)
    if turn.any():
        dth = np.abs(math.pi - np.mod(math.pi - (heading - prev), 2 * math.pi))
        pb = np.mod(np.round(np.nan_to_num(prev) / (2 * math.pi / YAW_BINS)).astype(int), YAW_BINS)
        w = _layer_lookup(travmap, travmap.w_star, pb, xs[:, 0], ys[:, 0])
        charge = turn & (dth > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            extra = np.where(charge, np.where(w > 0, dth / w, math.inf), 0.0)
        cost = cost + extra
    return cost, heading


def edge_costs_baseline_many(P, Q, travmap: TraversabilityMap, scorer: str, w: float, spacing=0.1):
    P = np.asarray(P, dtype=float).reshape(-1, 2)
    Q = np.asarray(Q, dtype=float).reshape(-1, 2)
    L, xs, ys, dl, mask = _batch_points(P, Q, spacing)
    t = _layer_lookup(travmap, travmap.scores[scorer][None], 0, xs, ys)
    ok = np.where(mask, t > 0, True).all(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cost = np.where(mask, (1.0 + w / t) * dl[:, None], 0.0).sum(axis=1)
    cost = np.where(L > 0, np.where(ok, cost, math.inf), 0.0)
    heading = np.arctan2(Q[:, 1] - P[:, 1], Q[:, 0] - P[:, 0])
    return cost, heading


def sampling_weights(travmap: TraversabilityMap, config: PlannerConfig | None = None):
    """Per-cell sampling weights (flattened, row-major); zero on undefined cells."""
    floor = config.sample_floor if config else 0.02
    if config is None or config.mode == "state":
        tv = travmap.mean_v() / 0.5
    else:
        tv = np.where(np.isfinite(travmap.scores[config.scorer]), 1.0, np.nan)
    w = np.where(np.isfinite(tv), np.maximum(tv, floor), 0.0)
    return w.ravel()


def sample_state(travmap: TraversabilityMap, rng, weights=None):
    """Draw a point with probability proportional to its cell weight."""
    if weights is None:
        weights = sampling_weights(travmap)
    cdf = np.cumsum(weights)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    k = min(k, cdf.size - 1)
    iy, ix = divmod(k, travmap.width)
    jx, jy = rng.random(2)
    return (travmap.origin[0] + (ix + jx) * travmap.resolution,
            travmap.origin[1] + (iy + jy) * travmap.resolution)


@dataclass
class PlanTree:
    pos: list = field(default_factory=list)
    parent: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    heading: list = field(default_factory=list)   # heading of the incoming edge
    children: list = field(default_factory=list)

    def add(self, p, parent, cost, heading):
        self.pos.append((float(p[0]), float(p[1])))
        self.parent.append(parent)
        self.cost.append(cost)
        self.heading.append(heading)
        self.children.append(set())
        if parent is not None:
            self.children[parent].add(len(self.pos) - 1)
        return len(self.pos) - 1

    def path_to(self, i):
        out = []
        while i is not None:
            out.append(i)
            i = self.parent[i]
        return out[::-1]


class TravRRTStar:
    def __init__(self, travmap: TraversabilityMap, config: PlannerConfig, seed: int = 0,
                 start_heading=None):
        config.validate()
        self.tm = travmap
        self.cfg = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.weights = sampling_weights(travmap, config)
        self.start_heading = start_heading
        self.tree = PlanTree()

    def edge_cost(self, i, q):
        """Cost of an edge from node ``i`` to point ``q`` and its heading."""
        p = self.tree.pos[i]
        h = math.atan2(q[1] - p[1], q[0] - p[0])
        if self.cfg.mode == "state":
            return edge_cost_state(p, q, self.tree.heading[i], self.tm, self.cfg.spacing), h
        return edge_cost_baseline(p, q, self.tm, self.cfg.scorer, self.cfg.weight, self.cfg.spacing), h

    def edge_costs_many(self, sources, targets, prev_headings):
        P = np.asarray([self.tree.pos[i] for i in sources]) if len(sources) else np.zeros((0, 2))
        Q = np.broadcast_to(np.asarray(targets, dtype=float), P.shape)
        if self.cfg.mode == "state":
            return edge_costs_state_many(P, Q, prev_headings, self.tm, self.cfg.spacing)
        return edge_costs_baseline_many(P, Q, self.tm, self.cfg.scorer, self.cfg.weight, self.cfg.spacing)

    def _defined(self, q):
        if self.cfg.mode == "state":
            return bool(np.isfinite(self.tm.mean_v_at(q[0], q[1])))
        return bool(np.isfinite(self.tm.lookup_score(self.cfg.scorer, q[0], q[1])))

    def _propagate(self, i, delta):
        stack = list(self.tree.children[i])
        while stack:
            j = stack.pop()
            self.tree.cost[j] += delta
            stack.extend(self.tree.children[j])

    def _rewire_gain(self, n, new_parent, edge=None):
        """Return (new_cost_n, new_heading_n, child_updates) or None if not better.

        ``edge`` is an optional precomputed ``(cost, heading)`` of new_parent -> n.
        """
        t = self.tree
        c_edge, h = edge if edge is not None else self.edge_cost(new_parent, t.pos[n])
        new_cost = t.cost[new_parent] + c_edge
        if not new_cost < t.cost[n] - 1e-12:
            return None
        updates = []
        if self.cfg.mode == "state":
            old_h = t.heading[n]
            t.heading[n] = h
            try:
                for c in t.children[n]:
                    ce, _ = self.edge_cost(n, t.pos[c])
                    cand = new_cost + ce
                    if cand > t.cost[c] + 1e-12:
                        return None
                    updates.append((c, cand))
            finally:
                t.heading[n] = old_h
        else:
            updates = [(c, t.cost[c] - (t.cost[n] - new_cost)) for c in t.children[n]]
        return new_cost, h, updates

    def _apply_rewire(self, n, new_parent, new_cost, h, updates):
        t = self.tree
        t.children[t.parent[n]].discard(n)
        t.parent[n] = new_parent
        t.children[new_parent].add(n)
        t.cost[n] = new_cost
        t.heading[n] = h
        for c, cc in updates:
            delta = cc - t.cost[c]
            t.cost[c] = cc
            self._propagate(c, delta)

    def near_radius(self):
        n = len(self.tree.pos)
        if n < 2:
            return 2 * self.cfg.steer_step
        return min(2 * self.cfg.steer_step, self.cfg.gamma * math.sqrt(math.log(n) / n))

    def best_goal_node(self, goal):
        P = np.asarray(self.tree.pos)
        d = np.hypot(P[:, 0] - goal[0], P[:, 1] - goal[1])
        cand = np.nonzero(d <= self.cfg.goal_tolerance)[0]
        if cand.size == 0:
            return None
        costs = np.asarray(self.tree.cost)[cand]
        if not np.isfinite(costs).any():
            return None
        return int(cand[np.argmin(costs)])

    def iterate(self, goal):
        cfg, t = self.cfg, self.tree
        if self.rng.random() < cfg.goal_bias:
            s = (float(goal[0]), float(goal[1]))
        else:
            s = sample_state(self.tm, self.rng, self.weights)
        P = np.asarray(t.pos)
        d = np.hypot(P[:, 0] - s[0], P[:, 1] - s[1])
        i_near = int(np.argmin(d))
        if d[i_near] < 1e-9:
            return
        if d[i_near] > cfg.steer_step:
            f = cfg.steer_step / d[i_near]
            q = (P[i_near, 0] + f * (s[0] - P[i_near, 0]), P[i_near, 1] + f * (s[1] - P[i_near, 1]))
        else:
            q = s
        dq = np.hypot(P[:, 0] - q[0], P[:, 1] - q[1])
        r = self.near_radius()
        near = [int(i) for i in np.nonzero(dq <= r)[0]]
        if i_near not in near:
            near.append(i_near)
        near = sorted(near)
        prev = [np.nan if t.heading[i] is None else t.heading[i] for i in near]
        c, h = self.edge_costs_many(near, q, prev)
        total = np.asarray([t.cost[i] for i in near]) + c
        k = int(np.argmin(total))  # first minimum, as in a strict-< scan
        if not math.isfinite(total[k]):
            return
        best = near[k]
        new = t.add(q, best, float(total[k]), float(h[k]))
        others = [i for i in near if i != best and i != 0]
        if not others:
            return
        ce, he = self.edge_costs_many([new] * len(others), [t.pos[i] for i in others],
                                      np.full(len(others), t.heading[new]))
        for i, c_i, h_i in zip(others, ce, he):
            if not t.cost[new] + c_i < t.cost[i] - 1e-12:
                continue
            gain = self._rewire_gain(i, new, (float(c_i), float(h_i)))
            if gain is not None:
                self._apply_rewire(i, new, *gain)

    def extract(self, goal):
        i = self.best_goal_node(goal)
        if i is None:
            return Path2D([], math.inf, [], success=False, reason="no path within iterations",
                          mode=self.cfg.mode, seed=self.seed)
        idx = self.tree.path_to(i)
        wps = [self.tree.pos[k] for k in idx]
        edges = [self.tree.cost[b] - self.tree.cost[a] for a, b in zip(idx, idx[1:])]
        return Path2D(wps, self.tree.cost[i], edges, mode=self.cfg.mode, seed=self.seed)


def plan(start, goal, config: PlannerConfig, travmap: TraversabilityMap, seed: int = 0,
         start_heading=None, checkpoints=(), on_iteration=None):
    """Run TravRRT* from ``start`` to ``goal``.

    Returns the best path found; ``checkpoints`` (iteration counts) add a
    ``history`` attribute with the best cost seen at each of them.
    """
    config.validate()
    planner = TravRRTStar(travmap, config, seed, start_heading)
    start = (float(start[0]), float(start[1]))
    goal = (float(goal[0]), float(goal[1]))
    for name, p in (("start", start), ("goal", goal)):
        if not planner._defined(p):
            raise ParameterError(f"{name} {p} lies outside the defined traversability region")
    planner.tree.add(start, None, 0.0, start_heading)
    history = {}
    if math.hypot(goal[0] - start[0], goal[1] - start[1]) <= 1e-12:
        path = Path2D([start], 0.0, [], mode=config.mode, seed=seed)
        path.history = history
        return path
    for it in range(1, config.iterations + 1):
        planner.iterate(goal)
        if on_iteration is not None:
            on_iteration(it, planner)
        if it in checkpoints:
            history[it] = planner.extract(goal).total_cost
    path = planner.extract(goal)
    path.history = history
    path.tree = planner.tree
    return path


def save_path(path: Path2D, file, extra: dict | None = None) -> None:
    lines = [f"PATH v1 mode={path.mode} seed={path.seed} success={int(path.success)} "
             f"n={len(path.waypoints)} total_cost={path.total_cost!r}"]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"# {k} = {v}")
    if path.reason:
        lines.append(f"# reason = {path.reason}")
    for i, (x, y) in enumerate(path.waypoints):
        ec = path.edge_costs[i - 1] if i > 0 else 0.0
        lines.append(f"{x!r} {y!r} {ec!r}")
    Path(file).write_text("\n".join(lines) + "\n")


def load_path(file) -> Path2D:
    lines = Path(file).read_text().splitlines()
    head = lines[0].split()
    if head[:2] != ["PATH", "v1"]:
        raise ParameterError(f"{file}: not a PATH v1 file")
    kv = dict(tok.split("=", 1) for tok in head[2:])
    wps, edges = [], []
    for ln in lines[1:]:
        if not ln.strip() or ln.startswith("#"):
            continue
        x, y, ec = (float(t) for t in ln.split())
        if wps:
            edges.append(ec)
        wps.append((x, y))
    return Path2D(wps, float(kv["total_cost"]), edges, bool(int(kv["success"])), mode=kv["mode"],
                  seed=int(kv["seed"]))
