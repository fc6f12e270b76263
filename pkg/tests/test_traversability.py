import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import bisect_quantile
from stabnav.errors import ParameterError
from stabnav.instability import InstabilityEstimate, OracleModel, oracle_mean, oracle_sigma
from stabnav.terrain import (PATCH_SAMPLES, PATCH_SPACING, ElevationMap, Patch, TerrainSpec, extract_patch,
                             extract_patches, generate_terrain, patch_features)
from stabnav.traversability import (BASELINES, RiskParams, StabilityCommand, TraversabilityMap, bin_yaw,
                                    build_traversability_map, learned_ins_score, load_travmap,
                                    manual_biped_score, nearest_bin, nearest_bin_scalar, normal_quantile,
                                    quad_foothold_score, save_travmap, stability_aware_command, var_gaussian,
                                    write_v_star_pgm)

N = PATCH_SAMPLES
ORACLE = OracleModel()
_, LX = np.mgrid[0:N, 0:N] * PATCH_SPACING


def zero_patch():
    return Patch(np.zeros((N, N)))


def brute_force_command(f, risk):
    """Largest grid value whose VaR is strictly below the limit, else the floor."""
    z = bisect_quantile(risk.alpha)
    v_best = w_best = 0.001
    for k in range(11):
        v = 0.05 * k
        if oracle_mean(f, v, 0.0) + z * oracle_sigma(f, v, 0.0) < risk.delta_limit and v > v_best:
            v_best = v
        w = 0.075 * k
        if oracle_mean(f, 0.0, w) + z * oracle_sigma(f, 0.0, w) < risk.delta_limit and w > w_best:
            w_best = w
    return v_best, w_best


def random_patches(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        amp = rng.uniform(0.0, 0.06)
        emap = generate_terrain(TerrainSpec("rough", extent=(1.5, 1.5), seed=int(rng.integers(1 << 30)),
                                            params={"amplitude": amp, "correlation_length": rng.uniform(0.1, 0.5)}))
        tilt = rng.uniform(-0.2, 0.2, 2)
        p = extract_patch(emap, (0.75, 0.75, rng.uniform(-math.pi, math.pi))).samples
        out.append(Patch(p + tilt[0] * (LX - LX[0, N // 2]) + tilt[1] * (LX.T - LX.T[N // 2, 0])))
    return out


def test_quantile_against_bisection():
    assert normal_quantile(0.5) == 0.0
    assert normal_quantile(0.97) == pytest.approx(1.880794, abs=1e-5)
    for p in np.concatenate([np.linspace(0.001, 0.999, 97), [1e-6, 0.02, 0.98, 1 - 1e-6]]):
        assert normal_quantile(p) == pytest.approx(bisect_quantile(p), abs=1e-6)
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ParameterError):
            normal_quantile(bad)


def test_var_examples():
    assert var_gaussian(InstabilityEstimate(2.0, 0.0), 0.97) == 2.0
    assert var_gaussian(InstabilityEstimate(2.0, 1.0), 0.5) == 2.0
    assert var_gaussian(InstabilityEstimate(2.0, 1.0), 0.97) == pytest.approx(3.880794, abs=1e-5)
    with pytest.raises(ParameterError):
        var_gaussian(InstabilityEstimate(2.0, 1.0), 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.one_of(st.just(0.0), st.floats(0.01, 3.0)), st.floats(0.51, 0.98), st.floats(0.001, 0.01))
def test_var_is_increasing_in_alpha_and_sigma(mu, sigma, alpha, d):
    base = var_gaussian(InstabilityEstimate(mu, sigma), alpha)
    assert base - mu == pytest.approx(normal_quantile(alpha) * sigma, abs=1e-12)
    assert var_gaussian(InstabilityEstimate(mu, sigma + d), alpha) > base
    if sigma > 0:
        assert var_gaussian(InstabilityEstimate(mu, sigma), alpha + d) > base


def test_risk_params_validation():
    RiskParams()
    for kw in ({"delta_limit": 0.0}, {"alpha": 0.5}, {"alpha": 1.0}):
        with pytest.raises(ParameterError):
            RiskParams(**kw)


def test_flat_patch_command_is_045():
    cmd = stability_aware_command(ORACLE, zero_patch())
    assert cmd == StabilityCommand(0.45, 0.75)
    z = bisect_quantile(0.97)
    assert 2.5 + z * 0.35 >= 3.0 > 2.35 + z * 0.335


def test_hopeless_patch_gets_the_floor():
    steep = Patch(10.0 * (LX - LX[0, N // 2]))
    assert stability_aware_command(ORACLE, steep) == StabilityCommand(0.001, 0.001)


def test_unbounded_limit_gives_maximum_candidates():
    assert stability_aware_command(ORACLE, zero_patch(), RiskParams(delta_limit=1e9)) == StabilityCommand(0.5, 0.75)


def test_tie_at_limit_rejects_candidate():
    # VaR at v = 0 on flat ground is exactly 1 + 0.2 z; a limit equal to it rejects v = 0
    z = normal_quantile(0.97)
    limit = 1.0 + 0.2 * z
    cmd = stability_aware_command(ORACLE, zero_patch(), RiskParams(delta_limit=limit))
    assert cmd.v_star == 0.001


def test_sweep_equals_brute_force_on_random_patches():
    for p in random_patches(60, seed=1):
        f = patch_features(p)
        for risk in (RiskParams(), RiskParams(2.5, 0.9)):
            cmd = stability_aware_command(ORACLE, p, risk)
            assert (cmd.v_star, cmd.w_star) == pytest.approx(brute_force_command(f, risk), abs=1e-15)


def test_baseline_scores_on_reference_patches():
    assert manual_biped_score(zero_patch()) == 1.0
    assert quad_foothold_score(zero_patch()) == 1.0
    assert learned_ins_score(ORACLE, zero_patch()) == 1.0
    cliffs = Patch(np.where((np.indices((N, N)).sum(axis=0)) % 2 == 0, 0.0, 1.0))
    assert manual_biped_score(cliffs) == 0.01
    assert quad_foothold_score(cliffs) == 0.01
    assert learned_ins_score(ORACLE, Patch(50.0 * LX)) == 0.01


def test_manual_biped_half_violating_patch():
    # left half flat, right half at 45 degrees (cell steps of 0.04 m stay under 0.08 m)
    h = np.where(LX > LX[0, N // 2], LX - LX[0, N // 2], 0.0)
    assert abs(manual_biped_score(Patch(h)) - 0.5) <= 1.0 / N


def test_quad_foothold_edge_monotonicity():
    def edge(height):
        return Patch(np.where(LX > LX[0, N // 2], height, 0.0))
    big, small = quad_foothold_score(edge(0.05)), quad_foothold_score(edge(0.01))
    assert 0.01 < big < small < 1.0


class ShiftModel:
    """Mean 1 + s_sag, no spread: flat VaR is exactly 1."""

    def predict_arrays(self, features, v, w):
        f = np.atleast_2d(features)
        return 1.0 + np.abs(f[:, 0]), np.zeros(f.shape[0])


def test_learned_ins_scaled_inverse():
    p = Patch(LX - LX[0, N // 2])          # mean sagittal slope exactly 1
    assert learned_ins_score(ShiftModel(), p) == pytest.approx(0.5)


def test_bins():
    assert nearest_bin_scalar(0.0) == 0
    assert nearest_bin_scalar(math.pi) == 4
    assert nearest_bin_scalar(-math.pi / 4 + 0.01) == 7
    assert np.array_equal(nearest_bin(np.array([bin_yaw(b) for b in range(8)])), np.arange(8))


def test_flat_map_replicates_the_flat_command(flat_travmap):
    tm = flat_travmap
    v, w = tm.v_star[np.isfinite(tm.v_star)], tm.w_star[np.isfinite(tm.w_star)]
    assert v.size > 0 and np.all(v == 0.45) and np.all(w == 0.75)
    for name in BASELINES:
        s = tm.scores[name]
        assert np.all(s[np.isfinite(s)] == 1.0)


def square_rough_map():
    rough = TerrainSpec("rough", seed=2, params={"amplitude": 0.05, "correlation_length": 0.2},
                        region=(1.5, 1.5, 2.5, 2.5))
    return generate_terrain(TerrainSpec("composite", extent=(4.0, 4.0), components=[rough]))


def test_rough_square_is_slower_than_surroundings():
    emap = square_rough_map()
    tm = build_traversability_map(emap, ORACLE, stride=2)
    iy, ix = np.mgrid[0:tm.height, 0:tm.width]
    cx, cy = tm.cell_center(ix, iy)
    inside = (np.abs(cx - 2.0) < 0.3) & (np.abs(cy - 2.0) < 0.3)
    outside = (np.maximum(np.abs(cx - 2.0), np.abs(cy - 2.0)) > 0.5 + 0.46)
    for layer in (tm.v_star, tm.w_star):
        vin = layer[:, inside]
        vout = layer[:, outside]
        assert np.nanmax(vin) <= np.nanmin(vout)
    assert np.nanmax(tm.v_star[:, inside]) < 0.45


def test_map_entries_equal_patch_commands_and_definedness():
    emap = square_rough_map()
    tm = build_traversability_map(emap, ORACLE, stride=4)
    rng = np.random.default_rng(0)
    for _ in range(40):
        b, iy, ix = rng.integers(8), rng.integers(tm.height), rng.integers(tm.width)
        x, y = tm.cell_center(ix, iy)
        _, valid = extract_patches(emap, [x], [y], [bin_yaw(b)])
        if not valid[0]:
            assert np.isnan(tm.v_star[b, iy, ix]) and np.isnan(tm.w_star[b, iy, ix])
            continue
        cmd = stability_aware_command(ORACLE, extract_patch(emap, (x, y, bin_yaw(b))))
        assert (tm.v_star[b, iy, ix], tm.w_star[b, iy, ix]) == (cmd.v_star, cmd.w_star)


def test_parallel_build_is_identical():
    emap = square_rough_map()
    a = build_traversability_map(emap, ORACLE, stride=3)
    b = build_traversability_map(emap, ORACLE, stride=3, workers=3, chunk=37)
    assert np.array_equal(a.v_star, b.v_star, equal_nan=True)
    assert np.array_equal(a.w_star, b.w_star, equal_nan=True)
    for k in a.scores:
        assert np.array_equal(a.scores[k], b.scores[k], equal_nan=True)


def test_tiny_map_is_undefined():
    emap = ElevationMap((0.0, 0.0), 0.04, np.zeros((1, 1)))
    tm = build_traversability_map(emap, ORACLE)
    assert tm.v_star.shape == (8, 1, 1) and np.all(np.isnan(tm.v_star))


def test_command_invariants_on_rough_map():
    tm = build_traversability_map(square_rough_map(), ORACLE, stride=3)
    v = tm.v_star[np.isfinite(tm.v_star)]
    w = tm.w_star[np.isfinite(tm.w_star)]
    assert np.all((v == 0.001) | np.isclose(v / 0.05, np.round(v / 0.05)))
    assert np.all((w == 0.001) | np.isclose(w / 0.075, np.round(w / 0.075)))
    assert v.min() >= 0.001 and v.max() <= 0.5 and w.min() >= 0.001 and w.max() <= 0.75
    for s in tm.scores.values():
        s = s[np.isfinite(s)]
        assert s.min() >= 0.01 and s.max() <= 1.0


def test_travmap_file_round_trip(tmp_path):
    tm = build_traversability_map(square_rough_map(), ORACLE, stride=4)
    save_travmap(tm, tmp_path / "tm", comments={"run.seed": 0})
    back = load_travmap(tmp_path / "tm")
    assert back.origin == tm.origin and back.resolution == tm.resolution
    assert np.array_equal(back.v_star, tm.v_star, equal_nan=True)
    assert np.array_equal(back.w_star, tm.w_star, equal_nan=True)
    assert sorted(back.scores) == sorted(tm.scores)
    write_v_star_pgm(tm, tmp_path / "v.pgm")
    tok = (tmp_path / "v.pgm").read_text().split()
    assert tok[0] == "P2" and int(tok[1]) == tm.width and int(tok[2]) == tm.height
    gray = np.array(tok[4:], dtype=int)
    assert gray.min() >= 0 and gray.max() <= 255
