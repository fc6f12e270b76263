import math

import numpy as np
import pytest
from scipy.stats import chisquare

from stabnav.errors import ParameterError
from stabnav.global_planner import (PlannerConfig, TravRRTStar, edge_cost_baseline, edge_cost_state,
                                    edge_costs_baseline_many, edge_costs_state_many, load_path, plan,
                                    sample_state, sampling_weights, save_path)
from stabnav.traversability import TraversabilityMap, nearest_bin_scalar


def const_map(v=0.45, w=0.675, shape=(20, 20), res=0.5, score=1.0):
    H, W = shape
    scores = {name: np.full(shape, score) for name in ("LearnedInS", "ManualBiped", "QuadFoothold")}
    return TraversabilityMap((0.0, 0.0), res, np.full((8, H, W), v), np.full((8, H, W), w), scores)


def path_cost_recomputed(path, tm, start_heading=None):
    total, h = 0.0, start_heading
    for p, q in zip(path.waypoints, path.waypoints[1:]):
        total += edge_cost_state(p, q, h, tm)
        h = math.atan2(q[1] - p[1], q[0] - p[0])
    return total


def test_state_edge_cost_examples():
    tm = const_map()
    assert edge_cost_state((1.0, 1.0), (2.0, 1.0), 0.0, tm) == pytest.approx(1 / 0.45, abs=1e-12)
    assert edge_cost_state((1.0, 1.0), (1.0, 1.0), 0.0, tm) == 0.0
    turn = edge_cost_state((1.0, 1.0), (1.0, 1.0), 0.0, tm, heading=math.pi / 2)
    assert turn == pytest.approx((math.pi / 2) / 0.675, abs=1e-12)
    # turn charged once, then straight travel
    c = edge_cost_state((1.0, 1.0), (1.0, 2.0), 0.0, tm)
    assert c == pytest.approx(1 / 0.45 + (math.pi / 2) / 0.675, abs=1e-12)
    # wrapped heading difference: 350 deg -> 10 deg is a 20 deg turn
    c = edge_cost_state((1.0, 1.0), (1.0 + math.cos(0.17), 1.0 + math.sin(0.17)), -0.17 + 2 * math.pi, tm)
    assert c == pytest.approx(1 / 0.45 + 0.34 / 0.675, abs=1e-9)


def test_state_edge_cost_density_invariance():
    tm = const_map()
    a = edge_cost_state((1.0, 1.0), (4.3, 2.2), 0.3, tm, spacing=0.1)
    b = edge_cost_state((1.0, 1.0), (4.3, 2.2), 0.3, tm, spacing=0.05)
    assert abs(a - b) < 1e-9


def test_edges_leaving_the_map_are_infeasible():
    tm = const_map()
    assert edge_cost_state((1.0, 1.0), (12.0, 1.0), 0.0, tm) == math.inf
    assert edge_cost_baseline((1.0, 1.0), (12.0, 1.0), tm, "ManualBiped", 0.5) == math.inf
    tm.v_star[:, 2, 4] = np.nan
    assert edge_cost_state((1.0, 1.25), (3.0, 1.25), 0.0, tm) == math.inf


def test_baseline_edge_cost_examples():
    tm = const_map()
    assert edge_cost_baseline((1.0, 1.0), (2.0, 1.0), tm, "ManualBiped", 0.5) == pytest.approx(1.5)
    assert edge_cost_baseline((1.0, 1.0), (3.0, 2.5), tm, "ManualBiped", 0.0) == pytest.approx(math.hypot(2, 1.5))
    low = const_map(score=0.01)
    assert edge_cost_baseline((1.0, 1.0), (2.0, 1.0), low, "QuadFoothold", 3.0) == pytest.approx(301.0)


def test_batched_edge_costs_match_scalar(band_gap):
    _, prepared = band_gap
    tm = prepared.travmap
    rng = np.random.default_rng(0)
    for _ in range(100):
        P = rng.uniform(-0.5, 10.5, (6, 2))
        Q = rng.uniform(-0.5, 10.5, (6, 2))
        Q[0] = P[0] + rng.uniform(-0.3, 0.3, 2)
        prev = rng.uniform(-4, 4, 6)
        prev[1] = np.nan
        c, _ = edge_costs_state_many(P, Q, prev, tm)
        cb, _ = edge_costs_baseline_many(P, Q, tm, "QuadFoothold", 0.5)
        for k in range(6):
            ref = edge_cost_state(tuple(P[k]), tuple(Q[k]), None if np.isnan(prev[k]) else prev[k], tm)
            refb = edge_cost_baseline(tuple(P[k]), tuple(Q[k]), tm, "QuadFoothold", 0.5)
            for got, want in ((c[k], ref), (cb[k], refb)):
                if math.isinf(want):
                    assert got == want
                else:
                    assert got == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_uniform_map_samples_uniformly():
    tm = const_map(shape=(4, 5), res=1.0)
    rng = np.random.default_rng(0)
    counts = np.zeros(20)
    for _ in range(100_000):
        x, y = sample_state(tm, rng)
        counts[int(y) * 5 + int(x)] += 1
    expected = 100_000 / 20
    assert np.all(np.abs(counts - expected) <= 3 * math.sqrt(expected * (1 - 1 / 20)))
    assert chisquare(counts).pvalue > 0.001


def test_sampling_follows_floored_weights():
    tm = const_map(v=0.5, shape=(2, 2), res=1.0)
    tm.v_star[:, :, 1] = 0.001                     # right column is impassable
    w = sampling_weights(tm)
    assert w.tolist() == [1.0, 0.02, 1.0, 0.02]
    rng = np.random.default_rng(1)
    right = sum(sample_state(tm, rng, w)[0] >= 1.0 for _ in range(100_000))
    ratio = (100_000 - right) / right
    assert ratio == pytest.approx(50.0, rel=0.1)


def test_sampling_is_seeded():
    tm = const_map()
    a = [sample_state(tm, np.random.default_rng(3)) for _ in range(3)]
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [sample_state(tm, r1) for _ in range(20)] == [sample_state(tm, r2) for _ in range(20)]
    assert a[0] == a[1]


def test_planner_config_validation():
    for kw in ({"iterations": 0}, {"spacing": 0.0}, {"mode": "fast"}, {"weight": -1.0}):
        with pytest.raises(ParameterError):
            PlannerConfig(**kw).validate()


def test_start_equal_goal_is_a_single_node():
    p = plan((2.0, 2.0), (2.0, 2.0), PlannerConfig(), const_map())
    assert p.success and p.waypoints == [(2.0, 2.0)] and p.total_cost == 0.0


def test_endpoints_must_be_defined():
    with pytest.raises(ParameterError):
        plan((2.0, 2.0), (50.0, 2.0), PlannerConfig(), const_map())


def test_no_path_is_a_failure_result():
    p = plan((1.0, 1.0), (9.0, 9.0), PlannerConfig(iterations=2), const_map())
    assert not p.success and p.total_cost == math.inf and p.reason


def test_tree_costs_stay_consistent_and_rewiring_never_raises_costs():
    tm = const_map()
    cfg = PlannerConfig(iterations=150)
    seen = {}

    def check(it, planner):
        t = planner.tree
        for i in range(1, len(t.pos)):
            p = t.parent[i]
            h = t.heading[p]
            edge = edge_cost_state(t.pos[p], t.pos[i], h, tm)
            assert t.cost[i] == pytest.approx(t.cost[p] + edge, abs=1e-9)
            if i in seen:
                assert t.cost[i] <= seen[i] + 1e-12
            seen[i] = t.cost[i]

    plan((1.0, 1.0), (9.0, 9.0), cfg, tm, seed=2, start_heading=0.0, on_iteration=check)


def test_cost_is_monotone_across_checkpoints(flat_travmap):
    p = plan((1.0, 1.0), (9.0, 9.0), PlannerConfig(), flat_travmap, seed=0, checkpoints=(100, 300, 500))
    h = p.history
    assert h[100] >= h[300] >= h[500] == p.total_cost
    assert p.total_cost == pytest.approx(sum(p.edge_costs), abs=1e-9)
    assert p.total_cost == pytest.approx(path_cost_recomputed(p, flat_travmap), abs=1e-9)
    assert all(a != b for a, b in zip(p.waypoints, p.waypoints[1:]))


def test_planning_is_deterministic(flat_travmap):
    a = plan((1.0, 1.0), (9.0, 9.0), PlannerConfig(iterations=200), flat_travmap, seed=5)
    b = plan((1.0, 1.0), (9.0, 9.0), PlannerConfig(iterations=200), flat_travmap, seed=5)
    assert a.waypoints == b.waypoints and a.total_cost == b.total_cost


def test_zero_weight_baseline_cost_is_euclidean_length(flat_travmap):
    cfg = PlannerConfig(iterations=200, mode="baseline", scorer="ManualBiped", weight=0.0)
    p = plan((1.0, 1.0), (9.0, 9.0), cfg, flat_travmap, seed=1)
    assert p.success and p.total_cost == pytest.approx(p.length(), abs=1e-9)


def test_band_gap_plans_use_the_gap(band_gap):
    world, prepared = band_gap
    tm = prepared.travmap
    for seed in range(3):
        p = plan(world.start[:2], world.goal, PlannerConfig(), tm, seed=seed, start_heading=world.start[2])
        assert p.success
        pts = np.array(p.waypoints)
        for a, b in zip(pts, pts[1:]):
            s = np.linspace(0.0, 1.0, 50)
            b_edge = nearest_bin_scalar(math.atan2(b[1] - a[1], b[0] - a[0]))
            v = tm.values_along(tm.v_star, b_edge, a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]))
            assert np.all(v > 0.001)
        crossing = [q for q in pts if 4.0 <= q[0] <= 6.0]
        assert all(6.0 <= q[1] <= 8.0 for q in crossing)


def test_path_file_round_trip(tmp_path, flat_travmap):
    p = plan((1.0, 1.0), (5.0, 3.0), PlannerConfig(iterations=100), flat_travmap, seed=3)
    save_path(p, tmp_path / "p.txt", extra={"run.seed": 3})
    first = (tmp_path / "p.txt").read_text().splitlines()[0]
    assert first.startswith("PATH v1 mode=state seed=3 success=1")
    back = load_path(tmp_path / "p.txt")
    assert back.waypoints == p.waypoints and back.total_cost == p.total_cost
    assert back.edge_costs == pytest.approx(p.edge_costs, abs=0)
