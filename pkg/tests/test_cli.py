import math
import subprocess
import sys

import numpy as np
import pytest

from stabnav.cli import main
from stabnav.config import parse_config_text
from stabnav.errors import ConfigError
from stabnav.fallover import synthetic_gait_log, write_gait_log
from stabnav.global_planner import load_path
from stabnav.instability import load_dataset, load_model
from stabnav.simulator import load_trajectory
from stabnav.terrain import load_elevation_map
from stabnav.traversability import load_travmap


def run(tmp_path, *argv):
    return main(["--out-dir", str(tmp_path), *map(str, argv)])


def body(path):
    """File contents without comment lines."""
    return [l for l in path.read_text().splitlines() if not l.startswith("#")]


def test_config_parsing():
    cfg = parse_config_text("[risk]\ndelta_limit = 4  # inline\n[lip]\nT = 0.5\n[benchmark]\nworlds = flat, rough\n")
    assert cfg == {"risk": {"delta_limit": 4.0}, "lip": {"T": 0.5}, "benchmark": {"worlds": ("flat", "rough")}}
    for text, field in (("[risk]\nalpha = high\n", "risk.alpha"), ("[risk]\nspeed = 1\n", "risk.speed"),
                        ("[warp]\nx = 1\n", "warp"), ("[episode]\nstart = 1 2\n", "episode.start")):
        with pytest.raises(ConfigError) as exc:
            parse_config_text(text)
        assert exc.value.field == field
        assert field in str(exc.value)


def test_gen_terrain_flat_slope_and_seeding(tmp_path, capsys):
    assert run(tmp_path, "gen-terrain", "--kind", "flat", "--out", "flat.elev") == 0
    emap = load_elevation_map(tmp_path / "flat.elev")
    assert emap.width == 250 and np.all(emap.heights == 0.0)
    assert (tmp_path / "flat.pgm").exists() and (tmp_path / "flat.png").exists()
    capsys.readouterr()
    assert run(tmp_path, "gen-terrain", "--kind", "slope", "--angle", 10, "--out", "slope.elev") == 0
    out = capsys.readouterr().out
    # cell centers span 0.02 .. 9.98 m, so the tallest sample is 9.98 tan(10 deg)
    assert f"max {9.98 * math.tan(math.radians(10)):.4f} m" in out
    for name in ("a", "b"):
        assert run(tmp_path / name, "--seed", 7, "gen-terrain", "--kind", "rough", "--extent", 3, 3,
                   "--amplitude", 0.05, "--out", "r.elev") == 0
    a, b = (tmp_path / "a" / "r.elev").read_text(), (tmp_path / "b" / "r.elev").read_text()
    assert a == b and "# run.seed = 7" in a


def test_named_world_and_bad_spec(tmp_path):
    assert run(tmp_path, "gen-terrain", "--world", "band_gap", "--out", "bg.elev") == 0
    assert run(tmp_path, "gen-terrain", "--kind", "slope", "--angle", 95) == 2
    assert run(tmp_path, "gen-terrain", "--world", "moon") == 2


def test_dataset_training_and_model_round_trip(tmp_path, capsys):
    run(tmp_path, "gen-terrain", "--kind", "flat", "--extent", 3, 3, "--out", "flat.elev")
    assert run(tmp_path, "make-dataset", "--terrain", tmp_path / "flat.elev", "--samples", 0, "--out", "empty.csv") == 0
    assert body(tmp_path / "empty.csv") == ["s_sag,s_lat,sigma_h,range,g_max,v,w,delta"]
    assert run(tmp_path, "make-dataset", "--terrain", tmp_path / "flat.elev", "--samples", 40,
               "--noiseless", "--out", "ds.csv") == 0
    ds = load_dataset(tmp_path / "ds.csv")
    assert len(ds) == 40
    for i in (0, 17, 39):
        v, w = ds.commands[i]
        assert ds.delta[i] == pytest.approx(1.0 + 3.0 * v + 1.2 * abs(w), abs=1e-12)
    run(tmp_path / "again", "make-dataset", "--terrain", tmp_path / "flat.elev", "--samples", 40, "--noiseless",
        "--out", "ds.csv")
    assert (tmp_path / "ds.csv").read_text() == (tmp_path / "again" / "ds.csv").read_text()

    capsys.readouterr()
    assert run(tmp_path, "train", "--dataset", tmp_path / "ds.csv", "--phases", 1, "--epochs", 3,
               "--out", "m1.instab") == 0
    out = capsys.readouterr().out
    assert out.count("epoch") == 3
    assert load_model(tmp_path / "m1.instab").sigma_head is False
    assert (tmp_path / "m1.instab").read_text().splitlines()[0].endswith(" 0")
    for name in ("a", "b"):
        assert run(tmp_path / name, "train", "--dataset", tmp_path / "ds.csv", "--epochs", 2, "--epochs-phase2", 2,
                   "--out", "m2.instab", "--quiet") == 0
    assert (tmp_path / "a" / "m2.instab").read_text() == (tmp_path / "b" / "m2.instab").read_text()
    assert load_model(tmp_path / "a" / "m2.instab").sigma_head is True
    # downstream commands accept the model unmodified
    assert run(tmp_path, "travmap", "--terrain", tmp_path / "flat.elev", "--model", tmp_path / "a" / "m2.instab",
               "--out", "tm_model") == 0


def test_training_losses_are_non_increasing_on_constant_targets(tmp_path, capsys):
    rows = ["s_sag,s_lat,sigma_h,range,g_max,v,w,delta"] + ["0,0,0,0,0,0,0,2.0"] * 500
    (tmp_path / "c.csv").write_text("\n".join(rows) + "\n")
    assert run(tmp_path, "train", "--dataset", tmp_path / "c.csv", "--phases", 1, "--epochs", 10) == 0
    losses = [float(l.split()[-1]) for l in capsys.readouterr().out.splitlines() if l.strip().startswith("epoch")]
    assert len(losses) == 10 and all(b <= a for a, b in zip(losses, losses[1:]))


def test_analyze_features(tmp_path, capsys):
    write_gait_log(tmp_path / "gait.csv", *synthetic_gait_log())
    assert run(tmp_path, "analyze-features", "--log", tmp_path / "gait.csv") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["feature", "McFadden", "R2", "AUC-ROC"]
    assert lines[1].split()[0] == "tilt"
    const = [l for l in lines if l.startswith("constant")][0]
    assert abs(float(const.split()[-1]) - 0.5) <= 0.02
    (tmp_path / "empty.csv").write_text("")
    assert run(tmp_path, "analyze-features", "--log", tmp_path / "empty.csv") == 1


def test_travmap_commands(tmp_path):
    run(tmp_path, "gen-terrain", "--kind", "flat", "--extent", 3, 3, "--out", "flat.elev")
    assert run(tmp_path, "travmap", "--terrain", tmp_path / "flat.elev", "--out", "tm") == 0
    tm = load_travmap(tmp_path / "tm")
    v = tm.v_star[np.isfinite(tm.v_star)]
    assert v.size and np.all(v == 0.45)
    assert (tmp_path / "tm" / "v_star.pgm").exists() and (tmp_path / "tm" / "v_star.png").exists()
    assert "# risk.delta_limit" not in (tmp_path / "tm" / "travmap.txt").read_text()
    assert run(tmp_path, "travmap", "--terrain", tmp_path / "flat.elev", "--delta-limit", 1e9, "--out", "tm_max") == 0
    tm = load_travmap(tmp_path / "tm_max")
    assert np.all(tm.v_star[np.isfinite(tm.v_star)] == 0.5) and np.all(tm.w_star[np.isfinite(tm.w_star)] == 0.75)
    assert "# risk.delta_limit = 1000000000.0" in (tmp_path / "tm_max" / "travmap.txt").read_text()
    assert run(tmp_path, "travmap", "--terrain", tmp_path / "flat.elev", "--world", "flat") == 2
    assert run(tmp_path, "travmap", "--terrain", tmp_path / "missing.elev") == 1


def test_travmap_rough_square_is_slower(tmp_path):
    assert run(tmp_path, "travmap", "--world", "band_gap", "--out", "bg") == 0
    tm = load_travmap(tmp_path / "bg")
    mv = tm.mean_v()
    iy, ix = np.mgrid[0:tm.height, 0:tm.width]
    cx, cy = tm.cell_center(ix, iy)
    band = (cx > 4.5) & (cx < 5.5) & ((cy < 5.5) | (cy > 8.5)) & np.isfinite(mv)
    clear = ((cx < 3.3) | (cx > 6.7)) & np.isfinite(mv)
    assert np.max(mv[band]) < np.min(mv[clear])


@pytest.fixture(scope="module")
def flat_tm_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("plan")
    assert main(["--out-dir", str(d), "travmap", "--world", "flat", "--out", "tm", "--quiet"]) == 0
    return d


def test_plan_state_and_baseline(flat_tm_dir):
    d = flat_tm_dir
    assert run(d, "plan", "--travmap", d / "tm", "--start", 1, 1, "--goal", 9, 9, "--out", "p.txt") == 0
    p = load_path(d / "p.txt")
    assert p.success and p.total_cost <= 1.15 * math.hypot(8, 8) / 0.45
    assert (d / "p.ppm").read_text().startswith("P3")
    assert run(d / "again", "plan", "--travmap", d / "tm", "--start", 1, 1, "--goal", 9, 9, "--out", "p.txt") == 0
    assert (d / "p.txt").read_text() == (d / "again" / "p.txt").read_text()
    assert run(d, "plan", "--travmap", d / "tm", "--start", 1, 1, "--goal", 9, 9, "--mode", "ManualBiped",
               "--weight", 0, "--iterations", 200, "--out", "b.txt") == 0
    b = load_path(d / "b.txt")
    assert b.total_cost == pytest.approx(b.length(), abs=1e-9)


def test_plan_failures(flat_tm_dir):
    d = flat_tm_dir
    assert run(d, "plan", "--travmap", d / "tm", "--start", 1, 1, "--goal", 9, 9, "--iterations", 1,
               "--out", "f.txt") == 1
    assert "success=0" in (d / "f.txt").read_text().splitlines()[0]
    assert run(d, "plan", "--travmap", d / "tm", "--start", 1, 1, "--goal", 9, 9, "--mode", "Teleport") == 2
    assert run(d, "plan", "--travmap", d / "tm", "--start", 1, "--goal", 9, 9) == 2


def test_simulate_with_config_file(tmp_path):
    (tmp_path / "run.ini").write_text(
        "[run]\nseed = 4\n\n[terrain]\n\n[episode]\nworld = flat\nstart = 1 1 0\ngoal = 4 3\nmax_steps = 200\n"
        "[planner]\niterations = 200\n")
    assert run(tmp_path, "--config", tmp_path / "run.ini", "simulate", "--out", "traj.txt") == 0
    head, rows = load_trajectory(tmp_path / "traj.txt")
    assert head["seed"] == "4" and head["success"] == "1" and len(rows) == int(head["steps"])
    text = (tmp_path / "traj.txt").read_text()
    assert "# planner.iterations = 200" in text and "# episode.world = flat" in text
    # flags override the file
    assert run(tmp_path, "--config", tmp_path / "run.ini", "simulate", "--seed", 5, "--out", "traj5.txt") == 0
    assert load_trajectory(tmp_path / "traj5.txt")[0]["seed"] == "5"
    (tmp_path / "bad.ini").write_text("[episode]\nmax_steps = many\n")
    assert run(tmp_path, "--config", tmp_path / "bad.ini", "simulate", "--world", "flat") == 2


def test_benchmark_rows(tmp_path, capsys):
    (tmp_path / "b.ini").write_text("[episode]\nmax_steps = 60\n[planner]\niterations = 100\n")
    assert run(tmp_path, "--config", tmp_path / "b.ini", "benchmark", "--worlds", "flat", "rough",
               "--planners", "STATE", "ManualBiped", "--trials", 1, "--out", "bench") == 0
    rows = body(tmp_path / "bench" / "benchmark.csv")
    assert len(rows) == 1 + 2 * 2
    assert rows[0].startswith("world,planner")
    assert len(list((tmp_path / "bench").glob("traj_*.txt"))) == 4
    assert "ManualBiped(w=0.5)" in capsys.readouterr().out
    assert run(tmp_path, "benchmark", "--planners", "Rocket") == 2


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["fly"]) == 2
    assert main(["travmap", "--stride", "x"]) == 2
    assert main(["--config", str(tmp_path / "nope.ini"), "travmap", "--world", "flat"]) == 2


def test_console_script_and_module_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "stabnav", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-terrain" in r.stdout
