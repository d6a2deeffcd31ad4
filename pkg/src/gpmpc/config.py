"""
Experiment configuration: YAML file merged over built-in defaults.

Every section is optional in a user file; unknown keys are rejected so typos
do not silently fall back to defaults. See ``configs/default.yaml`` for the
documented schema.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import yaml

from gpmpc.mpc import DEFAULT_Q, DEFAULT_R, MpcProblem, SolverSettings
from gpmpc.quad_core import QuadParams
from gpmpc.sim import SimConfig
from gpmpc.trajectories import TrajectorySpec


class ConfigError(ValueError):
    pass


ROSTER_NAMES = ("ideal", "nominal", "rdrv", "gp")

DEFAULTS: dict = {
    "seed": 0,
    "out": "results",
    "timing": "wall",  # wall | off (off writes nan solve times, for byte-identical reruns)
    "quad": QuadParams().to_dict(),
    "control_dt": 0.01,
    "sim": {
        "sim_dt": 0.0005,
        "crash_distance": 5.0,
        "drag": {"linear": [0.1, 0.1, 0.05], "quadratic": [0.09, 0.09, 0.03], "board_y": 0.0},
        "noise": {"force_std": 0.1, "torque_std": 0.001, "motor_std": 0.02, "motor_bias_std": 0.02},
    },
    "mpc": {
        "N": 20,
        "dt": 0.05,
        "Q": list(DEFAULT_Q),
        "R": list(DEFAULT_R),
        "u_min": 0.0,
        "settings": {"max_sqp_iters": 1, "qp_tol": 1e-9, "kkt_tol": 1e-6, "line_search": False,
                     "warm_start": True, "correction_eval": "node"},
    },
    "collect": {
        "n_trajectories": 4,
        "random_poly": {"n_waypoints": 8, "box": [20.0, 20.0, 20.0], "axis_v_max": 16.0, "accel_max": 25.0},
    },
    "fit": {"n_points": 20, "budget": 150, "hyper_rows": 1000, "holdout_fraction": 0.2},
    "evaluate": {
        "roster": ["ideal", "nominal", "rdrv", "gp"],
        "speeds": [4.0, 8.0, 12.0],
        "trajectories": [
            {"kind": "circle", "scale": 5.0},
            {"kind": "lemniscate", "scale": 3.0},
        ],
        "ramp_accel": 4.0,
        "hold_time": 4.0,
        "speed_bins": [0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0],
    },
    "tradeoff": {
        "n_points": [3, 5, 10, 15, 20, 40, 75, 100],
        "trajectory": {"kind": "circle", "scale": 5.0, "v_peak": 8.0, "hold_time": 2.0},
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and base[key] and not isinstance(val, dict):
            raise ConfigError(f"config key {where!r} must be a mapping")
        if isinstance(base[key], dict) and base[key]:
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    # --- construction -------------------------------------------------------------------

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "ExperimentConfig":
        user = {}
        if path is not None:
            try:
                with open(path) as fh:
                    user = yaml.safe_load(fh) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            except yaml.YAMLError as exc:
                raise ConfigError(f"invalid YAML in {path}: {exc}") from None
            if not isinstance(user, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
        raw = _merge(DEFAULTS, user)
        if overrides:
            raw = _merge(raw, overrides)
        cfg = cls(raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.params
            self.sim
            self.problem()
            self.eval_specs(1.0)
            self.tradeoff_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        roster = self.raw["evaluate"]["roster"]
        if not roster:
            raise ConfigError("evaluate.roster must be nonempty")
        bad = [r for r in roster if r not in ROSTER_NAMES]
        if bad:
            raise ConfigError(f"unknown roster entries {bad}; choose from {list(ROSTER_NAMES)}")
        if self.raw["timing"] not in ("wall", "off"):
            raise ConfigError("timing must be 'wall' or 'off'")
        ratio = self.raw["mpc"]["dt"] / self.control_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("mpc.dt must be an integer multiple of control_dt")
        n = self.control_dt / self.sim.sim_dt
        if abs(n - round(n)) > 1e-9:
            raise ConfigError("control_dt must be an integer multiple of sim.sim_dt")
        if not 0.0 < self.raw["fit"]["holdout_fraction"] < 1.0:
            raise ConfigError("fit.holdout_fraction must be in (0, 1)")

    # --- typed views ----------------------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def timing(self) -> bool:
        return self.raw["timing"] == "wall"

    @property
    def control_dt(self) -> float:
        return float(self.raw["control_dt"])

    @property
    def params(self) -> QuadParams:
        return QuadParams.from_dict(self.raw["quad"])

    @property
    def sim(self) -> SimConfig:
        return SimConfig.from_dict(self.raw["sim"]).with_seed(self.seed)

    @property
    def ideal_sim(self) -> SimConfig:
        """The configured simulator with drag and noise removed."""
        s = self.sim
        return SimConfig(s.sim_dt, seed=s.seed, crash_distance=s.crash_distance)

    def problem(self, model=None) -> MpcProblem:
        """MPC problem; every controller shares these settings and differs only in ``model``."""
        m = self.raw["mpc"]
        return MpcProblem(self.params, int(m["N"]), float(m["dt"]), m["Q"], m["R"], float(m["u_min"]),
                          None, model, SolverSettings(**m["settings"]))

    def collect_spec(self, seed: int) -> TrajectorySpec:
        rp = self.raw["collect"]["random_poly"]
        return TrajectorySpec("random_poly", 1.0, seed=seed, sample_dt=self.control_dt,
                              n_waypoints=int(rp["n_waypoints"]), box=tuple(rp["box"]),
                              axis_v_max=float(rp["axis_v_max"]), accel_max=float(rp["accel_max"]))

    def eval_specs(self, v_peak: float) -> list[TrajectorySpec]:
        ev = self.raw["evaluate"]
        return [TrajectorySpec(**{"ramp_accel": ev["ramp_accel"], "hold_time": ev["hold_time"], **t,
                                  "v_peak": float(v_peak), "sample_dt": self.control_dt})
                for t in ev["trajectories"]]

    def tradeoff_spec(self) -> TrajectorySpec:
        return TrajectorySpec(**{**self.raw["tradeoff"]["trajectory"], "sample_dt": self.control_dt})

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.raw, fh, sort_keys=True)
