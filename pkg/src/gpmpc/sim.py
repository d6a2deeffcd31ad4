"""
Ground-truth simulator and the closed-loop runner.

The plant is the nominal rigid body plus rotor drag (linear in body velocity),
fuselage drag (quadratic), zero-mean force/torque noise and an asymmetric
per-motor thrust error. It is integrated with RK4 at ``sim_dt`` while the MPC
runs at ``control_dt`` on exact state feedback.

The inner integrator works on plain Python floats: for a single 13-state it
is several times faster than the broadcasting numpy path, and
:func:`plant_derivative` (the array form) is kept as the reference it is
tested against.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from gpmpc.augmentation import corrected_derivative
from gpmpc.dataset import FlightLogRecord, ResidualDataset, build_residuals
from gpmpc.mpc import MpcController, MpcProblem, MpcSolverError
from gpmpc.qp import QpError
from gpmpc.quad_core import IntegrationError, QuadParams, QuadState, _as_state_array, nominal_derivative, rk4
from gpmpc.quaternion import quat_to_rotmat
from gpmpc.trajectories import ReferenceTrajectory

log = logging.getLogger(__name__)

RESULTS_HEADER = ["scenario", "model", "v_peak", "rmse_m", "solve_time_ms_mean", "crashed"]


@dataclass(frozen=True)
class DragConfig:
    linear: tuple[float, float, float] = (0.0, 0.0, 0.0)  # rotor drag [1/s]
    quadratic: tuple[float, float, float] = (0.0, 0.0, 0.0)  # fuselage drag [1/m]
    board_y: float = 0.0  # extra quadratic y coefficient of the drag board [1/m]

    def __post_init__(self):
        for name in ("linear", "quadratic"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != 3 or min(vals) < 0:
                raise ValueError(f"drag.{name} must be three non-negative numbers, got {vals}")
            object.__setattr__(self, name, vals)
        if self.board_y < 0:
            raise ValueError("drag.board_y must be non-negative")

    @property
    def quadratic_effective(self) -> tuple[float, float, float]:
        qx, qy, qz = self.quadratic
        return (qx, qy + self.board_y, qz)


@dataclass(frozen=True)
class NoiseConfig:
    force_std: float = 0.0  # [N], per simulation step, world frame
    torque_std: float = 0.0  # [N m], per simulation step, body frame
    motor_std: float = 0.0  # relative per-step thrust noise
    motor_bias_std: float = 0.0  # relative per-motor bias, drawn once per rollout

    def __post_init__(self):
        if min(self.force_std, self.torque_std, self.motor_std, self.motor_bias_std) < 0:
            raise ValueError("noise standard deviations must be non-negative")


@dataclass(frozen=True)
class SimConfig:
    sim_dt: float = 0.0005
    drag: DragConfig = field(default_factory=DragConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    crash_distance: float = 5.0  # position error that ends a rollout [m]

    def __post_init__(self):
        if self.sim_dt <= 0:
            raise ValueError("sim_dt must be positive")
        if self.crash_distance <= 0:
            raise ValueError("crash_distance must be positive")

    def with_seed(self, seed: int) -> "SimConfig":
        return SimConfig(self.sim_dt, self.drag, self.noise, int(seed), self.crash_distance)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        drag = DragConfig(**d.pop("drag", {}))
        noise = NoiseConfig(**d.pop("noise", {}))
        return cls(drag=drag, noise=noise, **d)


def drag_accel_body(v_B, drag: DragConfig) -> np.ndarray:
    """Body-frame drag acceleration -D_lin v_B - D_quad v_B |v_B| (axis-wise)."""
    v_B = np.asarray(v_B, dtype=float)
    return -np.asarray(drag.linear) * v_B - np.asarray(drag.quadratic_effective) * v_B * np.abs(v_B)


def plant_derivative(x, u_applied, cfg: SimConfig, params: QuadParams,
                     force_W=None, torque_B=None) -> np.ndarray:
    """Array form of the plant: f_dyn plus drag and the given noise draw."""
    x = _as_state_array(x)
    R_cols = quat_to_rotmat(x[3:7])
    v_B = R_cols.T @ x[7:10]
    accel = R_cols @ drag_accel_body(v_B, cfg.drag)
    if force_W is not None:
        accel = accel + np.asarray(force_W) / params.m
    xd = nominal_derivative(x, np.asarray(u_applied, dtype=float), params, accel)
    if torque_B is not None:
        xd[10:13] += np.asarray(torque_B) / params.inertia
    return xd


class _ScalarPlant:
    """Plant RK4 on Python floats (same equations as :func:`plant_derivative`)."""

    def __init__(self, params: QuadParams, drag: DragConfig):
        self.m = params.m
        self.J = tuple(float(j) for j in params.inertia)
        self.g = tuple(float(v) for v in params.gravity)
        self.A = [tuple(float(v) for v in row) for row in params.allocation]
        self.dl = drag.linear
        self.dq = drag.quadratic_effective

    def deriv(self, s, T, fx, fy, fz, tx, ty, tz):
        _, _, _, qw, qx, qy, qz, vx, vy, vz, wx, wy, wz = s
        # homogeneous rotation matrix, valid for non-unit q at stage points
        ww, xx, yy, zz = qw * qw, qx * qx, qy * qy, qz * qz
        xy, xz, yz, wx_, wy_, wz_ = qx * qy, qx * qz, qy * qz, qw * qx, qw * qy, qw * qz
        r00, r01, r02 = ww + xx - yy - zz, 2 * (xy - wz_), 2 * (xz + wy_)
        r10, r11, r12 = 2 * (xy + wz_), ww - xx + yy - zz, 2 * (yz - wx_)
        r20, r21, r22 = 2 * (xz - wy_), 2 * (yz + wx_), ww - xx - yy + zz
        bx = r00 * vx + r10 * vy + r20 * vz
        by = r01 * vx + r11 * vy + r21 * vz
        bz = r02 * vx + r12 * vy + r22 * vz
        dl, dq = self.dl, self.dq
        ax = -dl[0] * bx - dq[0] * bx * abs(bx)
        ay = -dl[1] * by - dq[1] * by * abs(by)
        az = -dl[2] * bz - dq[2] * bz * abs(bz)
        m = self.m
        c = (T[0] + T[1] + T[2] + T[3]) / m
        g = self.g
        dvx = r02 * c + r00 * ax + r01 * ay + r02 * az + g[0] + fx / m
        dvy = r12 * c + r10 * ax + r11 * ay + r12 * az + g[1] + fy / m
        dvz = r22 * c + r20 * ax + r21 * ay + r22 * az + g[2] + fz / m
        dqw = 0.5 * (-qx * wx - qy * wy - qz * wz)
        dqx = 0.5 * (qw * wx + qy * wz - qz * wy)
        dqy = 0.5 * (qw * wy - qx * wz + qz * wx)
        dqz = 0.5 * (qw * wz + qx * wy - qy * wx)
        A = self.A
        Jx, Jy, Jz = self.J
        tau_x = A[0][0] * T[0] + A[0][1] * T[1] + A[0][2] * T[2] + A[0][3] * T[3] + tx
        tau_y = A[1][0] * T[0] + A[1][1] * T[1] + A[1][2] * T[2] + A[1][3] * T[3] + ty
        tau_z = A[2][0] * T[0] + A[2][1] * T[1] + A[2][2] * T[2] + A[2][3] * T[3] + tz
        dwx = (tau_x - (wy * Jz * wz - wz * Jy * wy)) / Jx
        dwy = (tau_y - (wz * Jx * wx - wx * Jz * wz)) / Jy
        dwz = (tau_z - (wx * Jy * wy - wy * Jx * wx)) / Jz
        return (vx, vy, vz, dqw, dqx, dqy, dqz, dvx, dvy, dvz, dwx, dwy, dwz)

    def step(self, s, T, noise, dt):
        fx, fy, fz, tx, ty, tz = noise
        d = self.deriv
        k1 = d(s, T, fx, fy, fz, tx, ty, tz)
        h = 0.5 * dt
        k2 = d([a + h * b for a, b in zip(s, k1)], T, fx, fy, fz, tx, ty, tz)
        k3 = d([a + h * b for a, b in zip(s, k2)], T, fx, fy, fz, tx, ty, tz)
        k4 = d([a + dt * b for a, b in zip(s, k3)], T, fx, fy, fz, tx, ty, tz)
        c = dt / 6.0
        out = [a + c * (b1 + 2.0 * b2 + 2.0 * b3 + b4) for a, b1, b2, b3, b4 in zip(s, k1, k2, k3, k4)]
        n = math.sqrt(out[3] ** 2 + out[4] ** 2 + out[5] ** 2 + out[6] ** 2)
        if not math.isfinite(n) or n == 0.0 or not all(math.isfinite(v) for v in out):
            raise IntegrationError("non-finite plant state")
        if out[3] < 0:
            n = -n
        out[3:7] = [out[3] / n, out[4] / n, out[5] / n, out[6] / n]
        return out


@dataclass
class SimWorld:
    """Mutable ground-truth state of one rollout (owned by that rollout)."""

    x: np.ndarray
    params: QuadParams
    cfg: SimConfig
    t: float = 0.0
    rng: np.random.Generator = None
    motor_bias: np.ndarray = None
    _plant: _ScalarPlant = field(default=None, repr=False)

    def __post_init__(self):
        self.x = _as_state_array(self.x).copy()
        if self.rng is None:
            self.rng = np.random.default_rng(self.cfg.seed)
        if self.motor_bias is None:
            self.motor_bias = 1.0 + self.cfg.noise.motor_bias_std * self.rng.standard_normal(4)
        self._plant = _ScalarPlant(self.params, self.cfg.drag)

    @property
    def state(self) -> QuadState:
        return QuadState.from_array(self.x)


def step_sim(world: SimWorld, u_cmd, duration: float) -> SimWorld:
    """Hold ``u_cmd`` for ``duration`` seconds of RK4 substeps (with noise)."""
    cfg = world.cfg
    n_float = duration / cfg.sim_dt
    n = int(round(n_float))
    if n < 1 or abs(n - n_float) * cfg.sim_dt > 1e-12:
        raise ValueError(f"duration {duration} is not a multiple of sim_dt {cfg.sim_dt}")
    nz = cfg.noise
    draws = world.rng.standard_normal((n, 10))
    u_cmd = np.asarray(u_cmd, dtype=float)
    base = u_cmd * world.motor_bias
    T_all = np.clip(base * (1.0 + nz.motor_std * draws[:, 6:10]), 0.0, world.params.T_max).tolist()
    fn = np.column_stack([nz.force_std * draws[:, 0:3], nz.torque_std * draws[:, 3:6]]).tolist()
    s = world.x.tolist()
    step = world._plant.step
    dt = cfg.sim_dt
    for k in range(n):
        s = step(s, T_all[k], fn[k], dt)
    world.x = np.array(s)
    world.t += n * dt
    return world


@dataclass
class RolloutResult:
    scenario: str
    model: str
    v_peak: float
    t: np.ndarray
    pos_err: np.ndarray  # |p - p_ref| per control tick [m]
    speed: np.ndarray  # |v_WB| per control tick [m/s]
    log: list = field(repr=False, default_factory=list)
    telemetry: list = field(repr=False, default_factory=list)
    crashed: bool = False
    crash_reason: str = ""

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.pos_err ** 2))) if self.pos_err.size else float("nan")

    @property
    def max_speed(self) -> float:
        return float(self.speed.max()) if self.speed.size else 0.0

    @property
    def solve_times(self) -> np.ndarray:
        return np.array([row[2] for row in self.telemetry])

    @property
    def solve_time_ms_mean(self) -> float:
        st = self.solve_times
        return float(st.mean()) if st.size else float("nan")

    def residuals(self, params: QuadParams | None = None) -> ResidualDataset:
        return build_residuals(self.log, params)


def run_closed_loop(traj: ReferenceTrajectory, problem: MpcProblem, cfg: SimConfig,
                    control_dt: float = 0.01, x0=None, scenario: str = "", v_peak: float = float("nan"),
                    timing: bool = True) -> RolloutResult:
    """Track ``traj`` with RTI-MPC on the simulated plant.

    At every reference sample the exact state is read, one RTI tick computes
    the input, and the plant is advanced by ``control_dt``. Solver or plant
    failures, and position errors beyond ``cfg.crash_distance``, end the
    rollout early with ``crashed`` set.
    """
    if abs(traj.dt - control_dt) > 1e-12:
        raise ValueError(f"reference sample spacing {traj.dt} differs from control_dt {control_dt}")
    ratio = problem.dt / control_dt
    stride = int(round(ratio))
    if abs(stride - ratio) > 1e-9:
        raise ValueError("MPC node spacing must be an integer multiple of control_dt")

    params = problem.params
    model = problem.dynamics_mode
    world = SimWorld(traj.x_ref[0].copy() if x0 is None else x0, params, cfg)
    ctrl = MpcController(problem, control_dt, timing=timing)
    M = len(traj)
    errs = np.full(M, np.nan)
    speeds = np.full(M, np.nan)
    records: list[FlightLogRecord] = []
    crashed, reason = False, ""
    u = traj.u_ref[0]
    for i in range(M):
        x = world.x.copy()
        errs[i] = np.linalg.norm(x[0:3] - traj.x_ref[i, 0:3])
        speeds[i] = np.linalg.norm(x[7:10])
        if errs[i] > cfg.crash_distance:
            crashed, reason = True, f"position error {errs[i]:.2f} m at t={traj.t[i]:.2f} s"
            break
        try:
            sol = ctrl.tick(traj.t[i], x, traj.window(i, problem.N, stride))
            u = sol.u_traj[0]
            v_pred = _predict_velocity(x, u, control_dt, params, model)
            step_sim(world, u, control_dt)
        except (MpcSolverError, QpError, IntegrationError, np.linalg.LinAlgError) as exc:
            crashed, reason = True, f"{type(exc).__name__}: {exc}"
            break
        records.append(FlightLogRecord(float(traj.t[i]), x, u.copy(), v_pred, control_dt))
    if not crashed:
        records.append(FlightLogRecord(float(traj.t[-1] + control_dt), world.x.copy(), u.copy(),
                                       np.full(3, np.nan), control_dt))
    n = len(records) if crashed else M
    if crashed:
        log.warning("rollout %s/%s crashed: %s", scenario, problem.mode_name, reason)
    return RolloutResult(scenario, problem.mode_name, v_peak, traj.t[:n].copy(), errs[:n], speeds[:n],
                         records, list(ctrl.telemetry), crashed, reason)


def _predict_velocity(x, u, dt, params, model):
    return rk4(lambda xx, uu: corrected_derivative(xx, uu, params, model), x, u, dt)[7:10]


def speed_binned_rmse(result: RolloutResult, edges) -> list[tuple[float, float, float | None, int]]:
    """RMSE per speed bin ``[lo, hi)`` by |v_WB|; empty bins report ``None``."""
    edges = np.asarray(edges, dtype=float)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (result.speed >= lo) & (result.speed < hi)
        n = int(mask.sum())
        out.append((float(lo), float(hi), float(np.sqrt(np.mean(result.pos_err[mask] ** 2))) if n else None, n))
    return out


def write_results(results, path, timing: bool = True) -> None:
    """Results CSV, rows sorted by (scenario, model, v_peak)."""
    rows = sorted(results, key=lambda r: (r.scenario, r.model, r.v_peak))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in rows:
            st = f"{r.solve_time_ms_mean:.4f}" if timing else "nan"
            w.writerow([r.scenario, r.model, f"{r.v_peak:g}", f"{r.rmse:.9f}", st, int(r.crashed)])


def playback_result(traj: ReferenceTrajectory) -> RolloutResult:
    """Replay of the reference itself (zero tracking error by construction)."""
    return RolloutResult("playback", "reference", float(traj.speed.max()), traj.t.copy(),
                         np.linalg.norm(traj.x_ref[:, 0:3] - traj.x_ref[:, 0:3], axis=1), traj.speed.copy())


__all__ = [
    "SimConfig", "DragConfig", "NoiseConfig", "SimWorld", "RolloutResult", "plant_derivative",
    "step_sim", "run_closed_loop", "speed_binned_rmse", "write_results", "drag_accel_body",
]
