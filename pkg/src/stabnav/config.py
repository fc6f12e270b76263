"""Line-oriented run configuration (``key = value`` under ``[section]`` headers).

Precedence is defaults < config file < command-line flags.  Every value is
type-checked against SCHEMA; unknown sections or keys are errors, so typos
do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .errors import ConfigError


def _floats(n):
    def parse(text):
        vals = [float(t) for t in text.replace(",", " ").split()]
        if len(vals) != n:
            raise ValueError(f"expected {n} numbers")
        return tuple(vals)
    parse.__name__ = f"{n} floats"
    return parse


def _names(text):
    return tuple(t for t in text.replace(",", " ").split() if t)


_names.__name__ = "list of names"


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


_bool.__name__ = "bool"

SCHEMA = {
    "run": {"seed": int, "out_dir": str, "quiet": _bool},
    "terrain": {"kind": str, "world": str, "extent": _floats(2), "resolution": float,
                "amplitude": float, "correlation_length": float, "angle_deg": float,
                "direction_deg": float, "rise": float, "run": float, "ramp_length": float,
                "start": float, "out": str},
    "dataset": {"terrain_files": _names, "samples": int, "noiseless": _bool, "out": str},
    "train": {"dataset": str, "out": str, "phases": int, "epochs": int, "epochs_phase2": int, "lr": float,
              "lr_phase2": float, "batch_size": int},
    "risk": {"delta_limit": float, "alpha": float},
    "analysis": {"log": str, "horizon": int, "out": str},
    "travmap": {"world": str, "terrain_file": str, "model": str, "stride": int, "workers": int,
                "out": str},
    "plan": {"travmap": str, "start": _floats(3), "goal": _floats(2), "planner": str, "out": str},
    "planner": {"iterations": int, "steer_step": float, "gamma": float, "goal_bias": float,
                "spacing": float, "goal_tolerance": float, "mode": str, "weight": float},
    "mpc": {"horizon": int, "w_g": float, "w_phi": float, "w_r": float, "u_f_max": float,
            "u_dphi_max": float, "max_iter": int, "tol": float},
    "lip": {"T": float, "H": float, "g": float},
    "episode": {"world": str, "terrain_file": str, "model": str, "start": _floats(3),
                "goal": _floats(2), "planner": str, "weight": float, "advance_radius": float,
                "goal_radius": float, "max_steps": int, "fall_k": float, "fall_delta0": float,
                "stride": int, "out": str},
    "benchmark": {"worlds": _names, "planners": _names, "trials": int, "base_seed": int,
                  "workers": int, "out": str},
}


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    out_dir: str = "."
    quiet: bool = False
    values: dict = field(default_factory=dict)    # section -> {key: value}

    def get(self, section, key, default=None):
        return self.values.get(section, {}).get(key, default)

    def set(self, section, key, value):
        if value is not None:
            self.values.setdefault(section, {})[key] = value

    def flat(self) -> dict:
        """Effective settings as ``section.key -> value`` (for file headers)."""
        out = {"run.command": self.command, "run.seed": self.seed}
        for sec, kv in sorted(self.values.items()):
            for k, v in sorted(kv.items()):
                out[f"{sec}.{k}"] = v
        return out


def parse_config_text(text: str, source: str = "<config>") -> dict:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case (T, H)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    out = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]", field=sec)
        for key, raw in cp.items(sec):
            name = f"{sec}.{key}"
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {name}", field=name)
            conv = SCHEMA[sec][key]
            try:
                val = conv(raw)
            except ValueError:
                raise ConfigError(f"{source}: {name} = {raw!r} is not a valid {conv.__name__}",
                                  field=name) from None
            out.setdefault(sec, {})[key] = val
    return out


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))
