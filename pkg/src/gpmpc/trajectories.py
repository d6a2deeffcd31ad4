"""
Reference trajectories: circle, lemniscate and seeded random polynomials.

Paths are time-warped by a smooth speed ramp (0 -> peak -> 0) and turned into
full state/input references by differential flatness with zero yaw.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from gpmpc.quad_core import NX, QuadParams
from gpmpc.quaternion import quat_canonical

TRAJECTORY_CSV_HEADER = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz",
                         "vx", "vy", "vz", "wx", "wy", "wz", "T0", "T1", "T2", "T3"]

# peak of the derivative of the C3 smoothstep 35t^4 - 84t^5 + 70t^6 - 20t^7
_SMOOTHSTEP_PEAK_SLOPE = 35.0 / 16.0


class InfeasibleTrajectoryError(ValueError):
    """The requested reference needs rotor thrusts outside [0, T_max]."""


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "circle"  # circle | lemniscate | random_poly
    v_peak: float = 4.0
    scale: float = 5.0  # circle radius, or lemniscate amplitude multiplier [m]
    ramp_accel: float = 4.0  # peak tangential acceleration on the ramps [m/s^2]
    hold_time: float = 4.0  # time spent at peak speed [s]
    z0: float = 0.0
    center: tuple[float, float] = (0.0, 0.0)
    sample_dt: float = 0.01
    # random_poly only
    seed: int = 0
    n_waypoints: int = 8
    box: tuple[float, float, float] = (20.0, 20.0, 20.0)  # half-extents [m]
    axis_v_max: float = 16.0
    accel_max: float = 25.0

    def __post_init__(self):
        if self.kind not in ("circle", "lemniscate", "random_poly"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.v_peak <= 0 or self.scale <= 0 or self.sample_dt <= 0:
            raise ValueError("v_peak, scale and sample_dt must be positive")
        if self.ramp_accel <= 0 or self.hold_time < 0:
            raise ValueError("ramp_accel must be positive and hold_time non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectorySpec":
        kw = dict(d)
        for key in ("center", "box"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass
class ReferenceTrajectory:
    t: np.ndarray  # (M,)
    x_ref: np.ndarray  # (M, 13)
    u_ref: np.ndarray  # (M, 4)
    name: str = ""
    derivatives: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return self.t.shape[0]

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self) > 1 else 0.0

    @property
    def speed(self) -> np.ndarray:
        return np.linalg.norm(self.x_ref[:, 7:10], axis=1)

    def window(self, i: int, N: int, stride: int):
        """MPC reference window starting at sample ``i``; pads with the final sample."""
        from gpmpc.mpc import ReferenceWindow

        idx = np.minimum(i + stride * np.arange(N + 1), len(self) - 1)
        return ReferenceWindow(self.x_ref[idx], self.u_ref[idx[:N]])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_CSV_HEADER)
            for k in range(len(self)):
                w.writerow([repr(float(v)) for v in (self.t[k], *self.x_ref[k], *self.u_ref[k])])

    @classmethod
    def from_csv(cls, path, name: str = "") -> "ReferenceTrajectory":
        a = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(a[:, 0], a[:, 1:14], a[:, 14:18], name)


# --- flatness -------------------------------------------------------------------------------


def _normalize_derivs(a, da, dda):
    """Unit vector a/|a| and its first two time derivatives."""
    r = np.linalg.norm(a, axis=-1, keepdims=True)
    u = a / r
    dr = np.sum(u * da, axis=-1, keepdims=True)
    du = (da - u * dr) / r
    ddr = np.sum(du * da, axis=-1, keepdims=True) + np.sum(u * dda, axis=-1, keepdims=True)
    ddu = (dda - 2.0 * du * dr - u * ddr) / r
    return u, du, ddu


def _rotmat_to_quat(R):
    """Rotation matrices (M, 3, 3) to unit quaternions (M, 4), scalar first."""
    M = R.shape[0]
    q = np.empty((M, 4))
    tr = np.trace(R, axis1=1, axis2=2)
    for k in range(M):
        m = R[k]
        if tr[k] > 0:
            s = 2.0 * np.sqrt(tr[k] + 1.0)
            q[k] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q[k] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q[k] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q[k] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return quat_canonical(q)


def flat_references(pos, vel, acc, jerk, snap, params: QuadParams, check_bounds: bool = True):
    """Full state and rotor-thrust references from position derivatives (zero yaw).

    The body z axis follows the required specific thrust ``acc - g``; body
    rates and angular accelerations come from jerk and snap, torques from the
    rigid-body equation, and rotor thrusts from inverting the allocation.
    Where the specific thrust vanishes the attitude falls back to level.
    """
    pos, vel, acc, jerk, snap = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (pos, vel, acc, jerk, snap))
    M = pos.shape[0]
    a_T = acc - params.gravity
    c = np.linalg.norm(a_T, axis=1)
    degenerate = c < 1e-6
    a_T = np.where(degenerate[:, None], np.array([0.0, 0.0, 1.0]), a_T)
    jerk = np.where(degenerate[:, None], 0.0, jerk)
    snap = np.where(degenerate[:, None], 0.0, snap)

    z, dz, ddz = _normalize_derivs(a_T, jerk, snap)
    x_c = np.array([1.0, 0.0, 0.0])
    n, dn, ddn = np.cross(z, x_c), np.cross(dz, x_c), np.cross(ddz, x_c)
    y, dy, ddy = _normalize_derivs(n, dn, ddn)
    x = np.cross(y, z)
    dx = np.cross(dy, z) + np.cross(y, dz)
    ddx = np.cross(ddy, z) + 2.0 * np.cross(dy, dz) + np.cross(y, ddz)

    R = np.stack([x, y, z], axis=-1)
    omega = np.stack([np.sum(z * dy, 1), np.sum(x * dz, 1), np.sum(y * dx, 1)], axis=1)
    domega = np.stack([
        np.sum(dz * dy, 1) + np.sum(z * ddy, 1),
        np.sum(dx * dz, 1) + np.sum(x * ddz, 1),
        np.sum(dy * dx, 1) + np.sum(y * ddx, 1),
    ], axis=1)

    J = params.inertia
    tau = domega * J + np.cross(omega, omega * J)
    thrust = params.m * np.where(degenerate, 0.0, c)
    alloc = np.vstack([np.ones(4), params.allocation])
    u_ref = np.linalg.solve(alloc, np.column_stack([thrust, tau]).T).T

    x_ref = np.zeros((M, NX))
    x_ref[:, 0:3] = pos
    x_ref[:, 3:7] = _rotmat_to_quat(R)
    x_ref[:, 7:10] = vel
    x_ref[:, 10:13] = omega
    if check_bounds:
        lo, hi = u_ref.min(), u_ref.max()
        if lo < -1e-9 or hi > params.T_max + 1e-9:
            raise InfeasibleTrajectoryError(
                f"reference needs rotor thrusts in [{lo:.3f}, {hi:.3f}] N, outside [0, {params.T_max:.3f}] N; "
                "lower the peak speed or enlarge the path")
    return x_ref, np.clip(u_ref, 0.0, params.T_max)


# --- speed ramps and path composition -----------------------------------------------------


def _smoothstep_derivs(tau):
    """C3 smoothstep S(tau) integrated once, plus S and its three derivatives."""
    t = np.clip(tau, 0.0, 1.0)
    inside = (tau > 0) & (tau < 1)
    S_int = 7.0 * t ** 5 - 14.0 * t ** 6 + 10.0 * t ** 7 - 2.5 * t ** 8
    S = 35 * t ** 4 - 84 * t ** 5 + 70 * t ** 6 - 20 * t ** 7
    S1 = np.where(inside, 140 * t ** 3 - 420 * t ** 4 + 420 * t ** 5 - 140 * t ** 6, 0.0)
    S2 = np.where(inside, 420 * t ** 2 - 1680 * t ** 3 + 2100 * t ** 4 - 840 * t ** 5, 0.0)
    S3 = np.where(inside, 840 * t - 5040 * t ** 2 + 8400 * t ** 3 - 4200 * t ** 4, 0.0)
    return S_int, S, S1, S2, S3


def ramp_profile(t, rate_peak: float, ramp_time: float, hold_time: float):
    """Phase and its first four derivatives for a rate ramping 0 -> peak -> 0.

    Returns an array (5, M): phase, rate, and rate derivatives up to third order.
    """
    t = np.asarray(t, dtype=float)
    Tr, Th = ramp_time, hold_time
    out = np.zeros((5,) + t.shape)
    up = _smoothstep_derivs(t / Tr)
    down = _smoothstep_derivs((t - Tr - Th) / Tr)
    phase_up_total = rate_peak * Tr * 0.5  # integral of the ramp
    # ramp up
    out[0] = rate_peak * Tr * up[0]
    out[1] = rate_peak * up[1]
    out[2] = rate_peak * up[2] / Tr
    out[3] = rate_peak * up[3] / Tr ** 2
    out[4] = rate_peak * up[4] / Tr ** 3
    hold = t > Tr
    out[0] = np.where(hold, phase_up_total + rate_peak * np.minimum(t - Tr, Th), out[0])
    tail = t > Tr + Th
    # ramp down: rate = peak * (1 - S)
    tau_d = (t - Tr - Th) / Tr
    td = np.clip(tau_d, 0.0, 1.0)
    out[0] = np.where(tail, phase_up_total + rate_peak * Th + rate_peak * Tr * (td - down[0]), out[0])
    out[1] = np.where(tail, rate_peak * (1.0 - down[1]), out[1])
    out[2] = np.where(tail, -rate_peak * down[2] / Tr, out[2])
    out[3] = np.where(tail, -rate_peak * down[3] / Tr ** 2, out[3])
    out[4] = np.where(tail, -rate_peak * down[4] / Tr ** 3, out[4])
    return out


def _faa_di_bruno(f, th):
    """Time derivatives 0..4 of f(theta(t)) from f^(i)(theta) and theta^(i)(t)."""
    f0, f1, f2, f3, f4 = f
    t1, t2, t3, t4 = (th[i][:, None] for i in range(1, 5))
    d0 = f0
    d1 = f1 * t1
    d2 = f2 * t1 ** 2 + f1 * t2
    d3 = f3 * t1 ** 3 + 3.0 * f2 * t1 * t2 + f1 * t3
    d4 = f4 * t1 ** 4 + 6.0 * f3 * t1 ** 2 * t2 + f2 * (4.0 * t1 * t3 + 3.0 * t2 ** 2) + f1 * t4
    return d0, d1, d2, d3, d4


def _ramp_times(spec: TrajectorySpec, path_speed_peak: float):
    ramp_time = _SMOOTHSTEP_PEAK_SLOPE * spec.v_peak / spec.ramp_accel
    total = 2.0 * ramp_time + spec.hold_time
    # the last sample lands at or just past the end of the ramp-down, i.e. at rest
    n = int(np.ceil(total / spec.sample_dt - 1e-9))
    t = np.arange(n + 1) * spec.sample_dt
    return t, ramp_time, spec.v_peak / path_speed_peak


def _planar(spec, t, derivs, params, name):
    pos, vel, acc, jerk, snap = derivs
    pos = pos + np.array([spec.center[0], spec.center[1], spec.z0])
    x_ref, u_ref = flat_references(pos, vel, acc, jerk, snap, params)
    return ReferenceTrajectory(t, x_ref, u_ref, name,
                               {"pos": pos, "vel": vel, "acc": acc, "jerk": jerk, "snap": snap})


def circle(spec: TrajectorySpec, params: QuadParams | None = None) -> ReferenceTrajectory:
    """Planar circle of radius ``spec.scale`` starting at (r, 0), ramped to ``v_peak``."""
    params = params or QuadParams()
    r = spec.scale
    t, ramp_time, rate_peak = _ramp_times(spec, r)
    th = ramp_profile(t, rate_peak, ramp_time, spec.hold_time)
    c, s, z = np.cos(th[0]), np.sin(th[0]), np.zeros_like(t)
    f = [r * np.stack(v, axis=1) for v in (
        (c, s, z), (-s, c, z), (-c, -s, z), (s, -c, z), (c, s, z))]
    return _planar(spec, t, _faa_di_bruno(f, th), params, f"circle_{spec.v_peak:g}")


def lemniscate(spec: TrajectorySpec, params: QuadParams | None = None) -> ReferenceTrajectory:
    """Figure-eight x = 2s cos(theta), y = s sin(2 theta) (the closed form with theta = sqrt(2) t).

    The phase rate is ramped so the fastest point (the crossing, where
    |d/dtheta| = 2 sqrt(2) s) reaches ``v_peak``.
    """
    params = params or QuadParams()
    sc = spec.scale
    t, ramp_time, rate_peak = _ramp_times(spec, 2.0 * np.sqrt(2.0) * sc)
    th = ramp_profile(t, rate_peak, ramp_time, spec.hold_time)
    c, s = np.cos(th[0]), np.sin(th[0])
    c2, s2 = np.cos(2 * th[0]), np.sin(2 * th[0])
    z = np.zeros_like(t)
    f = [sc * np.stack(v, axis=1) for v in (
        (2 * c, s2, z), (-2 * s, 2 * c2, z), (-2 * c, -4 * s2, z), (2 * s, -8 * c2, z), (2 * c, 16 * s2, z))]
    return _planar(spec, t, _faa_di_bruno(f, th), params, f"lemniscate_{spec.v_peak:g}")


def _spline_derivs(spl, t):
    return [spl(t, nu=k) for k in range(5)]


def random_polynomial(spec: TrajectorySpec, params: QuadParams | None = None) -> ReferenceTrajectory:
    """Quintic spline (C4) through seeded waypoints, starting and ending at rest at the origin.

    Time is scaled uniformly so the per-axis speed limit or the acceleration
    limit is active, i.e. the trajectory is as aggressive as the limits allow.
    """
    params = params or QuadParams()
    rng = np.random.default_rng(spec.seed)
    center = np.array([spec.center[0], spec.center[1], spec.z0])
    box = np.asarray(spec.box, dtype=float)
    inner = rng.uniform(-1.0, 1.0, size=(spec.n_waypoints, 3)) * box
    wps = np.vstack([np.zeros(3), inner, np.zeros(3)]) + center
    seg = np.linalg.norm(np.diff(wps, axis=0), axis=1)
    knots = np.concatenate([[0.0], np.cumsum(np.maximum(seg, 1e-3))]) / max(seg.sum(), 1e-9)
    bc = ([(1, np.zeros(3)), (2, np.zeros(3))], [(1, np.zeros(3)), (2, np.zeros(3))])

    base = make_interp_spline(knots, wps, k=5, bc_type=bc)
    dense = np.linspace(0.0, knots[-1], 4001)
    vmax = np.abs(base(dense, nu=1)).max()
    amax = np.linalg.norm(base(dense, nu=2), axis=1).max()
    lam = max(vmax / spec.axis_v_max, np.sqrt(amax / spec.accel_max))
    for _ in range(40):
        spl = make_interp_spline(lam * knots, wps, k=5, bc_type=bc)
        n = int(np.floor(lam * knots[-1] / spec.sample_dt))
        t = np.arange(n + 1) * spec.sample_dt
        pos, vel, acc, jerk, snap = _spline_derivs(spl, t)
        try:
            x_ref, u_ref = flat_references(pos, vel, acc, jerk, snap, params)
            break
        except InfeasibleTrajectoryError:
            lam *= 1.1
    else:
        raise InfeasibleTrajectoryError("could not time-scale the random polynomial into the thrust limits")
    return ReferenceTrajectory(t, x_ref, u_ref, f"random_{spec.seed}",
                               {"pos": pos, "vel": vel, "acc": acc, "jerk": jerk, "snap": snap,
                                "spline": spl, "knots": lam * knots})


def hover_reference(position, duration: float, params: QuadParams | None = None, sample_dt: float = 0.01):
    params = params or QuadParams()
    n = int(round(duration / sample_dt))
    t = np.arange(n + 1) * sample_dt
    pos = np.tile(np.asarray(position, dtype=float), (n + 1, 1))
    zero = np.zeros_like(pos)
    x_ref, u_ref = flat_references(pos, zero, zero, zero, zero, params)
    return ReferenceTrajectory(t, x_ref, u_ref, "hover")


def generate(spec: TrajectorySpec, params: QuadParams | None = None) -> ReferenceTrajectory:
    return {"circle": circle, "lemniscate": lemniscate, "random_poly": random_polynomial}[spec.kind](spec, params)
