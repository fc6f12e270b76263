"""Command-line entry point: ``stabnav <subcommand> [options]``.

Exit status: 0 on success, 1 on a domain failure (e.g. no path found,
unreadable input), 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plotting
from .config import RunConfig, load_config
from .errors import ConfigError, ParameterError, StabnavError
from .fallover import analyze_features, format_feature_table, parse_gait_cycles, read_gait_log
from .global_planner import PlannerConfig, plan, save_path
from .instability import (InstabilityModel, OracleModel, TrainingLog, load_dataset, load_model,
                          sample_oracle_dataset, save_dataset, save_model, train_phase1, train_phase2)
from .local_planner import LipParams, MpcConfig
from .simulator import (PLANNERS, EpisodeConfig, FallModel, load_world, prepare_world, run_benchmark,
                        run_episode, save_trajectory)
from .terrain import TerrainSpec, generate_terrain, load_elevation_map, save_elevation_map, write_height_pgm
from .traversability import (RiskParams, build_traversability_map, load_travmap, save_travmap,
                             write_v_star_pgm)
from .worlds import WORLDS, get_world

log = logging.getLogger("stabnav")


# --- helpers -------------------------------------------------------------------------

def _say(run: RunConfig, *msg):
    if not run.quiet:
        print(*msg)


def _out_path(run: RunConfig, name) -> Path:
    p = Path(name)
    if not p.is_absolute():
        p = Path(run.out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _build(section, ctor, **kwargs):
    """Construct a typed object from config values; invariant violations are
    configuration errors naming the section."""
    try:
        obj = ctor(**{k: v for k, v in kwargs.items() if v is not None})
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except ParameterError as exc:
        raise ConfigError(f"[{section}] {exc}", field=section) from None


def _risk(run):
    return _build("risk", RiskParams, delta_limit=run.get("risk", "delta_limit"),
                  alpha=run.get("risk", "alpha"))


def _lip(run):
    return _build("lip", LipParams, T=run.get("lip", "T"), H=run.get("lip", "H"), g=run.get("lip", "g"))


def _mpc(run):
    return _build("mpc", MpcConfig, **run.values.get("mpc", {}))


def _planner_config(run):
    kw = dict(run.values.get("planner", {}))
    kw.pop("mode", None)
    kw.pop("weight", None)
    return _build("planner", PlannerConfig, **kw)


def _model(run, path):
    if not path:
        return OracleModel()
    return load_model(path)


def _world_from(run, section):
    """(World or None, ElevationMap source) from a named world or a terrain file."""
    name = run.get(section, "world")
    tfile = run.get(section, "terrain_file")
    if name and tfile:
        raise ConfigError(f"[{section}] give either world or terrain_file, not both", field=f"{section}.world")
    if name:
        if name not in WORLDS:
            raise ConfigError(f"[{section}] unknown world {name!r}; choose from {sorted(WORLDS)}",
                              field=f"{section}.world")
        w = get_world(name)
        return w, w.terrain
    if tfile:
        return None, tfile
    raise ConfigError(f"[{section}] a world name or terrain_file is required", field=f"{section}.world")


# --- subcommands ---------------------------------------------------------------------

def cmd_gen_terrain(run: RunConfig) -> int:
    world = run.get("terrain", "world")
    if world:
        if world not in WORLDS:
            raise ConfigError(f"unknown world {world!r}; choose from {sorted(WORLDS)}", field="terrain.world")
        spec = get_world(world, seed=run.seed).terrain
    else:
        kind = run.get("terrain", "kind", "flat")
        params = {}

        def g(key):
            return run.get("terrain", key)
        if g("angle_deg") is not None:
            params["angle"] = math.radians(g("angle_deg"))
        if g("direction_deg") is not None:
            params["direction"] = math.radians(g("direction_deg"))
        for key, name in (("amplitude", "amplitude"), ("correlation_length", "correlation_length"),
                          ("rise", "rise"), ("run", "run"), ("ramp_length", "ramp_length"), ("start", "start")):
            if g(key) is not None:
                params[name] = g(key)
        if kind == "rough":
            params.setdefault("correlation_length", 0.3)
        spec = _build("terrain", TerrainSpec, kind=kind, extent=g("extent") or (10.0, 10.0),
                      resolution=g("resolution") or 0.04, seed=run.seed, params=params)
    try:
        emap = generate_terrain(spec)
    except ParameterError as exc:
        raise ConfigError(f"[terrain] {exc}", field="terrain") from None
    out = _out_path(run, run.get("terrain", "out", "terrain.elev"))
    save_elevation_map(emap, out, comments=run.flat())
    lo, hi = write_height_pgm(emap, out.with_suffix(".pgm"))
    plotting.plot_elevation(emap, out.with_suffix(".png"), title=f"{spec.kind} (seed {run.seed})")
    w, h = emap.extent
    _say(run, f"wrote {out}")
    _say(run, f"grid {emap.width} x {emap.height} cells at {emap.resolution:g} m ({w:g} m x {h:g} m)")
    _say(run, f"height min {lo:.4f} m  max {hi:.4f} m  range {hi - lo:.4f} m")
    return 0


def cmd_make_dataset(run: RunConfig) -> int:
    files = run.get("dataset", "terrain_files") or []
    if not files:
        raise ConfigError("make-dataset needs at least one --terrain file", field="dataset.terrain")
    n = run.get("dataset", "samples", 1000)
    if n < 0:
        raise ConfigError("samples must be >= 0", field="dataset.samples")
    maps = [load_elevation_map(f) for f in files]
    ds = sample_oracle_dataset(maps, n, seed=run.seed, noise=not run.get("dataset", "noiseless", False))
    out = _out_path(run, run.get("dataset", "out", "dataset.csv"))
    save_dataset(ds, out, comments=run.flat())
    _say(run, f"wrote {len(ds)} rows to {out}")
    return 0


def cmd_train(run: RunConfig) -> int:
    ds = load_dataset(run.get("train", "dataset"))
    phases = run.get("train", "phases", 2)
    if phases not in (1, 2):
        raise ConfigError("phases must be 1 or 2", field="train.phases")
    bs = run.get("train", "batch_size", 32)
    model = InstabilityModel.initialized(seed=run.seed)
    logs = {"phase 1 (MSE)": TrainingLog()}
    model = train_phase1(model, ds, epochs=run.get("train", "epochs", 10), lr=run.get("train", "lr", 1e-2),
                         batch_size=bs, seed=run.seed, log_to=logs["phase 1 (MSE)"])
    if phases == 2:
        logs["phase 2 (NLL)"] = TrainingLog()
        model = train_phase2(model, ds, epochs=run.get("train", "epochs_phase2", 10),
                             lr=run.get("train", "lr_phase2", 1e-3), batch_size=bs, seed=run.seed + 1,
                             log_to=logs["phase 2 (NLL)"])
    for name, lg in logs.items():
        _say(run, f"{name}: initial loss {lg.initial_loss:.6f}")
        for k, loss in enumerate(lg.epoch_losses, 1):
            _say(run, f"  epoch {k:3d}  loss {loss:.6f}")
    out = _out_path(run, run.get("train", "out", "model.instab"))
    save_model(model, out, comments=run.flat())
    plotting.plot_losses(logs, out.with_suffix(".losses.png"))
    _say(run, f"wrote {out}")
    return 0


def cmd_analyze_features(run: RunConfig) -> int:
    signals, markers, falls = read_gait_log(run.get("analysis", "log"))
    records = parse_gait_cycles(signals, markers, falls, horizon=run.get("analysis", "horizon", 2))
    table = format_feature_table(analyze_features(records))
    _say(run, table)
    out = run.get("analysis", "out")
    if out:
        _out_path(run, out).write_text(table + "\n")
    return 0


def cmd_travmap(run: RunConfig) -> int:
    _, source = _world_from(run, "travmap")
    emap = load_world(source)
    model = _model(run, run.get("travmap", "model"))
    risk = _risk(run)
    stride = run.get("travmap", "stride", 3)
    if stride < 1:
        raise ConfigError("stride must be >= 1", field="travmap.stride")
    tm = build_traversability_map(emap, model, risk, stride=stride, workers=run.get("travmap", "workers", 1))
    out = _out_path(run, run.get("travmap", "out", "travmap"))
    save_travmap(tm, out, comments=run.flat())
    write_v_star_pgm(tm, out / "v_star.pgm")
    plotting.plot_travmap(tm, out / "v_star.png")
    mv = tm.mean_v()
    defined = np.isfinite(mv)
    _say(run, f"wrote {out} ({tm.width} x {tm.height} cells at {tm.resolution:g} m)")
    if defined.any():
        _say(run, f"bin-averaged v*: mean {np.mean(mv[defined]):.4f}  min {np.min(mv[defined]):.4f}  "
                  f"max {np.max(mv[defined]):.4f}  floor cells {int(np.sum(mv[defined] <= 0.001))}")
    return 0


def _planner_mode(run, section):
    mode = run.get(section, "planner") or run.get("planner", "mode") or "STATE"
    if mode.lower() == "state":
        mode = "STATE"
    if mode not in PLANNERS:
        raise ConfigError(f"unknown planner {mode!r}; choose from {PLANNERS}", field=f"{section}.planner")
    return mode


def cmd_plan(run: RunConfig) -> int:
    tm = load_travmap(run.get("plan", "travmap"))
    mode = _planner_mode(run, "plan")
    weight = run.get("planner", "weight", 0.5)
    pc = _planner_config(run)
    pc = replace(pc, mode="state") if mode == "STATE" else replace(pc, mode="baseline", scorer=mode, weight=weight)
    if weight < 0:
        raise ConfigError("[planner] weight must be >= 0", field="planner.weight")
    start = run.get("plan", "start")
    goal = run.get("plan", "goal")
    if start is None or goal is None or len(start) not in (2, 3):
        raise ConfigError("plan needs --start x y [heading] and --goal x y", field="plan.start")
    heading = start[2] if len(start) > 2 else None
    path = plan(start[:2], goal, pc, tm, seed=run.seed, start_heading=heading if mode == "STATE" else None)
    out = _out_path(run, run.get("plan", "out", "path.txt"))
    save_path(path, out, extra=run.flat())
    img = plotting.travmap_overlay(tm, path.waypoints, (), start, goal)
    plotting.write_ppm(img, out.with_suffix(".ppm"))
    plotting.plot_travmap(tm, out.with_suffix(".png"), path.waypoints, (), start, goal,
                          title=f"{mode} plan, seed {run.seed}")
    if not path.success:
        _say(run, f"planning failed: {path.reason}")
        return 1
    _say(run, f"wrote {out}: {len(path.waypoints)} waypoints, length {path.length():.3f} m, "
              f"cost {path.total_cost:.4f}")
    return 0


def _episode_template(run: RunConfig, world, source, planner, model) -> EpisodeConfig:
    start = run.get("episode", "start") or (world.start if world else None)
    goal = run.get("episode", "goal") or (world.goal if world else None)
    if start is None or goal is None:
        raise ConfigError("start and goal are required for a terrain file", field="episode.start")
    fall = _build("episode", FallModel, k=run.get("episode", "fall_k"), delta0=run.get("episode", "fall_delta0"))
    kw = dict(world=source, start=tuple(start), goal=tuple(goal), planner=planner,
              risk=_risk(run), seed=run.seed, fall=fall, lip=_lip(run), mpc=_mpc(run),
              planner_config=_planner_config(run), model=model,
              world_name=world.name if world else Path(str(source)).stem)
    for key, name in (("weight", "weight"), ("advance_radius", "advance_radius"),
                      ("goal_radius", "goal_radius"), ("max_steps", "max_steps"), ("stride", "travmap_stride")):
        v = run.get("episode", key)
        if v is None and key == "weight":
            v = run.get("planner", "weight")
        if v is not None:
            kw[name] = v
    return _build("episode", EpisodeConfig, **kw)


def cmd_simulate(run: RunConfig) -> int:
    world, source = _world_from(run, "episode")
    model = _model(run, run.get("episode", "model"))
    cfg = _episode_template(run, world, source, _planner_mode(run, "episode"), model)
    prepared = prepare_world(cfg)
    tm = prepared.travmap
    res = run_episode(cfg, prepared)
    out = _out_path(run, run.get("episode", "out", "trajectory.txt"))
    save_trajectory(res, out, extra=run.flat())
    wps = res.path.waypoints if res.path is not None else ()
    traj = [(cfg.start[0], cfg.start[1])] + [(s.x, s.y) for s, _, _ in res.trajectory]
    plotting.write_ppm(plotting.travmap_overlay(tm, wps, traj, cfg.start, cfg.goal), out.with_suffix(".ppm"))
    plotting.plot_travmap(tm, out.with_suffix(".png"), wps, traj, cfg.start, cfg.goal,
                          title=f"{cfg.label}, seed {cfg.seed}: {res.reason}")
    plotting.plot_instability_trace(res, out.with_suffix(".instability.png"), cfg.fall)
    _say(run, f"{cfg.label} seed {cfg.seed}: {res.reason}; steps {res.steps}, "
              f"time {res.navigation_time:.1f} s, mean instability {res.mean_instability:.3f}, "
              f"max {res.max_instability:.3f}")
    _say(run, f"wrote {out}")
    return 1 if res.reason.startswith("planning failed") else 0


def cmd_benchmark(run: RunConfig) -> int:
    worlds = run.get("benchmark", "worlds") or ("two_corridor",)
    planners = run.get("benchmark", "planners") or PLANNERS
    for p in planners:
        if p not in PLANNERS:
            raise ConfigError(f"unknown planner {p!r}; choose from {PLANNERS}", field="benchmark.planners")
    trials = run.get("benchmark", "trials", 10)
    if trials < 1:
        raise ConfigError("trials must be >= 1", field="benchmark.trials")
    model = _model(run, run.get("episode", "model"))
    suite = []
    for name in worlds:
        if name not in WORLDS:
            raise ConfigError(f"unknown world {name!r}; choose from {sorted(WORLDS)}", field="benchmark.worlds")
        w = get_world(name)
        for p in planners:
            suite.append(_episode_template(run, w, w.terrain, p, model))
    base = run.get("benchmark", "base_seed", run.seed)
    report = run_benchmark(suite, trials, base_seed=base, workers=run.get("benchmark", "workers", 1))
    out = _out_path(run, run.get("benchmark", "out", "benchmark"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "benchmark.csv").write_text(report.to_csv(extra=run.flat()))
    (out / "benchmark.txt").write_text(report.format_table() + "\n")
    for (wname, label), eps in report.episodes.items():
        safe = label.replace("(", "_").replace(")", "").replace("=", "")
        for e in eps:
            save_trajectory(e, out / f"traj_{wname}_{safe}_seed{e.seed}.txt")
    plotting.plot_benchmark(report, out / "benchmark.png")
    _say(run, report.format_table())
    _say(run, f"wrote {out}")
    return 0


COMMANDS = {
    "gen-terrain": cmd_gen_terrain,
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "analyze-features": cmd_analyze_features,
    "travmap": cmd_travmap,
    "plan": cmd_plan,
    "simulate": cmd_simulate,
    "benchmark": cmd_benchmark,
}


# --- argument parsing -------------------------------------------------------------------

def _opt(p, flag, section, key, **kw):
    """Flags default to None so that only explicitly given ones override the config."""
    p.add_argument(flag, dest=f"{section}__{key}", default=None, **kw)


def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="random seed (default 0)")
    p.add_argument("--config", default=d, help="key = value config file with [section] headers")
    p.add_argument("--out-dir", dest="out_dir", default=d, help="directory for outputs (default .)")
    p.add_argument("--quiet", action="store_true", default=d, help="suppress progress output")


def _risk_flags(p):
    _opt(p, "--delta-limit", "risk", "delta_limit", type=float, help="instability limit (default 3)")
    _opt(p, "--alpha", "risk", "alpha", type=float, help="VaR level (default 0.97)")


def _planner_flags(p):
    _opt(p, "--weight", "planner", "weight", type=float, help="baseline trade-off weight w (default 0.5)")
    _opt(p, "--iterations", "planner", "iterations", type=int, help="RRT* iterations (default 500)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stabnav", description="Stability-aware navigation toolkit.")
    _global_flags(ap, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-terrain", parents=[common], help="generate a synthetic elevation map")
    _opt(p, "--kind", "terrain", "kind", choices=["flat", "slope", "steps", "rough", "ramp_corridor"])
    _opt(p, "--world", "terrain", "world", help=f"named world instead of --kind: {', '.join(WORLDS)}")
    _opt(p, "--extent", "terrain", "extent", type=float, nargs=2, metavar=("W", "H"))
    _opt(p, "--resolution", "terrain", "resolution", type=float)
    _opt(p, "--amplitude", "terrain", "amplitude", type=float)
    _opt(p, "--correlation-length", "terrain", "correlation_length", type=float)
    _opt(p, "--angle", "terrain", "angle_deg", type=float, help="slope angle in degrees")
    _opt(p, "--direction", "terrain", "direction_deg", type=float, help="uphill direction in degrees")
    _opt(p, "--rise", "terrain", "rise", type=float)
    _opt(p, "--run", "terrain", "run", type=float)
    _opt(p, "--ramp-length", "terrain", "ramp_length", type=float)
    _opt(p, "--ramp-start", "terrain", "start", type=float)
    _opt(p, "--out", "terrain", "out", help="output ELEV file (default terrain.elev)")

    p = sub.add_parser("make-dataset", parents=[common], help="sample an oracle-labeled dataset")
    _opt(p, "--terrain", "dataset", "terrain_files", nargs="+", help="ELEV files to sample poses on")
    _opt(p, "--samples", "dataset", "samples", type=int)
    _opt(p, "--noiseless", "dataset", "noiseless", action="store_const", const=True,
         help="label with the oracle mean")
    _opt(p, "--out", "dataset", "out", help="output CSV (default dataset.csv)")

    p = sub.add_parser("train", parents=[common], help="two-phase training of the instability model")
    _opt(p, "--dataset", "train", "dataset", required=True)
    _opt(p, "--phases", "train", "phases", type=int)
    _opt(p, "--epochs", "train", "epochs", type=int)
    _opt(p, "--epochs-phase2", "train", "epochs_phase2", type=int)
    _opt(p, "--lr", "train", "lr", type=float)
    _opt(p, "--lr-phase2", "train", "lr_phase2", type=float)
    _opt(p, "--batch-size", "train", "batch_size", type=int)
    _opt(p, "--out", "train", "out", help="output model file (default model.instab)")

    p = sub.add_parser("analyze-features", parents=[common], help="fallover regression per gait feature")
    _opt(p, "--log", "analysis", "log", required=True, help="gait log CSV (step, fall, signals...)")
    _opt(p, "--horizon", "analysis", "horizon", type=int, help="cycles before a fall labeled 1 (default 2)")
    _opt(p, "--out", "analysis", "out", help="also write the table to this file")

    p = sub.add_parser("travmap", parents=[common], help="build a stability-aware traversability map")
    _opt(p, "--terrain", "travmap", "terrain_file")
    _opt(p, "--world", "travmap", "world")
    _opt(p, "--model", "travmap", "model", help="INSTAB model file (default: oracle)")
    _opt(p, "--stride", "travmap", "stride", type=int, help="elevation cells per map cell (default 3)")
    _opt(p, "--workers", "travmap", "workers", type=int)
    _risk_flags(p)
    _opt(p, "--out", "travmap", "out", help="output directory (default travmap)")

    p = sub.add_parser("plan", parents=[common], help="global TravRRT* plan on a traversability map")
    _opt(p, "--travmap", "plan", "travmap", required=True)
    _opt(p, "--start", "plan", "start", type=float, nargs="+", metavar="X", help="x y [heading]")
    _opt(p, "--goal", "plan", "goal", type=float, nargs=2, metavar=("X", "Y"))
    _opt(p, "--mode", "plan", "planner", help=f"one of {', '.join(PLANNERS)}")
    _planner_flags(p)
    _opt(p, "--out", "plan", "out", help="output PATH file (default path.txt)")

    p = sub.add_parser("simulate", parents=[common], help="run one closed-loop episode")
    _opt(p, "--world", "episode", "world")
    _opt(p, "--terrain", "episode", "terrain_file")
    _opt(p, "--model", "episode", "model")
    _opt(p, "--start", "episode", "start", type=float, nargs=3, metavar=("X", "Y", "HEADING"))
    _opt(p, "--goal", "episode", "goal", type=float, nargs=2, metavar=("X", "Y"))
    _opt(p, "--planner", "episode", "planner", help=f"one of {', '.join(PLANNERS)}")
    _opt(p, "--max-steps", "episode", "max_steps", type=int)
    _planner_flags(p)
    _risk_flags(p)
    _opt(p, "--out", "episode", "out", help="trajectory file (default trajectory.txt)")

    p = sub.add_parser("benchmark", parents=[common], help="seeded planner comparison")
    _opt(p, "--worlds", "benchmark", "worlds", nargs="+")
    _opt(p, "--planners", "benchmark", "planners", nargs="+")
    _opt(p, "--trials", "benchmark", "trials", type=int)
    _opt(p, "--base-seed", "benchmark", "base_seed", type=int)
    _opt(p, "--workers", "benchmark", "workers", type=int)
    _opt(p, "--model", "episode", "model")
    _planner_flags(p)
    _risk_flags(p)
    _opt(p, "--out", "benchmark", "out", help="output directory (default benchmark)")
    return ap


def make_run_config(args) -> RunConfig:
    run = RunConfig(args.command)
    if args.config:
        run.values = load_config(args.config)
    r = run.values.get("run", {})
    run.seed = args.seed if args.seed is not None else r.get("seed", 0)
    run.out_dir = args.out_dir if args.out_dir is not None else r.get("out_dir", ".")
    run.quiet = bool(args.quiet) or r.get("quiet", False)
    for dest, val in vars(args).items():
        if "__" in dest and val is not None:
            section, key = dest.split("__", 1)
            if isinstance(val, list):
                val = tuple(val)
            run.set(section, key, val)
    return run


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run = make_run_config(args)
        return COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"stabnav: config error: {exc}", file=sys.stderr)
        return 2
    except (StabnavError, OSError) as exc:
        print(f"stabnav: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
