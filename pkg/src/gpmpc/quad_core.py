"""
Nominal quadrotor rigid-body model.

State vectors are flat 13-arrays laid out as ``[p_WB, q_WB, v_WB, omega_B]``
so that everything downstream (simulator, solver) can batch over leading
axes. :class:`QuadState` is the typed view used at API boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from gpmpc.quaternion import (
    quat_canonical,
    quat_rotate,
    quat_to_rotmat,
)

GRAVITY = 9.81

P = slice(0, 3)
Q = slice(3, 7)
V = slice(7, 10)
W = slice(10, 13)
NX = 13
NU = 4


class IntegrationError(RuntimeError):
    """Raised when a dynamics function returns a non-finite derivative."""


@dataclass(frozen=True)
class QuadParams:
    """Physical parameters of the quadrotor.

    Defaults describe a 0.8 kg racing quad with 5:1 thrust-to-weight. Inertia,
    arm lengths and the drag-torque constant are plausible placeholders, not
    identified values.
    """

    m: float = 0.8
    J: tuple[float, float, float] = (0.003, 0.003, 0.005)
    d_x: float = 0.075
    d_y: float = 0.075
    c_tau: float = 0.013
    T_max: float = 0.8 * GRAVITY * 5.0 / 4.0
    g_W: tuple[float, float, float] = (0.0, 0.0, -GRAVITY)

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError(f"mass must be positive, got {self.m}")
        if len(self.J) != 3 or min(self.J) <= 0:
            raise ValueError(f"inertia must be three positive values, got {self.J}")
        if self.d_x <= 0 or self.d_y <= 0 or self.c_tau <= 0:
            raise ValueError("rotor displacements and c_tau must be positive")
        if self.T_max <= self.m * GRAVITY / 4.0:
            raise ValueError(
                f"T_max={self.T_max} N cannot hover a {self.m} kg vehicle")
        object.__setattr__(self, "J", tuple(float(j) for j in self.J))
        object.__setattr__(self, "g_W", tuple(float(g) for g in self.g_W))

    @property
    def inertia(self) -> np.ndarray:
        return np.array(self.J)

    @property
    def gravity(self) -> np.ndarray:
        return np.array(self.g_W)

    @property
    def hover_thrust(self) -> float:
        return -self.m * self.g_W[2] / 4.0

    @property
    def allocation(self) -> np.ndarray:
        """3x4 map from rotor thrusts to body torque."""
        dx, dy, c = self.d_x, self.d_y, self.c_tau
        return np.array([
            [-dy, -dy, dy, dy],
            [-dx, dx, dx, -dx],
            [-c, c, -c, c],
        ])

    @classmethod
    def from_dict(cls, d: dict) -> "QuadParams":
        kw = dict(d)
        for key in ("J", "g_W"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {"m": self.m, "J": list(self.J), "d_x": self.d_x, "d_y": self.d_y,
                "c_tau": self.c_tau, "T_max": self.T_max, "g_W": list(self.g_W)}


@dataclass
class QuadState:
    p_WB: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_WB: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    v_WB: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega_B: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.p_WB = np.asarray(self.p_WB, dtype=float).reshape(3)
        q = np.asarray(self.q_WB, dtype=float).reshape(4)
        self.q_WB = quat_canonical(q / np.linalg.norm(q))
        self.v_WB = np.asarray(self.v_WB, dtype=float).reshape(3)
        self.omega_B = np.asarray(self.omega_B, dtype=float).reshape(3)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.p_WB, self.q_WB, self.v_WB, self.omega_B])

    @classmethod
    def from_array(cls, x) -> "QuadState":
        x = np.asarray(x, dtype=float)
        return cls(x[P], x[Q], x[V], x[W])

    @classmethod
    def hover(cls, position=(0.0, 0.0, 0.0)) -> "QuadState":
        return cls(p_WB=np.asarray(position, dtype=float))


@dataclass
class StateDerivative:
    dp: np.ndarray
    dq: np.ndarray
    dv: np.ndarray
    domega: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.dp, self.dq, self.dv, self.domega])

    @classmethod
    def from_array(cls, xd) -> "StateDerivative":
        xd = np.asarray(xd, dtype=float)
        return cls(xd[P].copy(), xd[Q].copy(), xd[V].copy(), xd[W].copy())


def _as_state_array(x) -> np.ndarray:
    if isinstance(x, QuadState):
        return x.as_array()
    return np.asarray(x, dtype=float)


def collective_wrench(u, params: QuadParams) -> tuple[np.ndarray, np.ndarray]:
    """Collective thrust and body torque produced by the four rotor thrusts."""
    u = np.asarray(u, dtype=float)
    T_B = np.zeros(u.shape[:-1] + (3,))
    T_B[..., 2] = u.sum(axis=-1)
    tau_B = u @ params.allocation.T
    return T_B, tau_B


def nominal_derivative(x: np.ndarray, u: np.ndarray, params: QuadParams,
                       accel_W: np.ndarray | None = None) -> np.ndarray:
    """Array form of the nominal dynamics; broadcasts over leading axes.

    ``accel_W`` is an optional extra world-frame acceleration added to the
    velocity rows only (how every model augmentation enters).
    """
    q = x[..., Q]
    v = x[..., V]
    w = x[..., W]
    J = params.inertia

    R = quat_to_rotmat(q)
    thrust = u.sum(axis=-1)
    dv = R[..., :, 2] * (thrust / params.m)[..., None] + params.gravity
    if accel_W is not None:
        dv = dv + accel_W

    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    dq = 0.5 * np.stack([
        -qx * wx - qy * wy - qz * wz,
        qw * wx + qy * wz - qz * wy,
        qw * wy - qx * wz + qz * wx,
        qw * wz + qx * wy - qy * wx,
    ], axis=-1)

    tau = u @ params.allocation.T
    Jw = w * J
    gyro = np.stack([
        wy * Jw[..., 2] - wz * Jw[..., 1],
        wz * Jw[..., 0] - wx * Jw[..., 2],
        wx * Jw[..., 1] - wy * Jw[..., 0],
    ], axis=-1)
    dw = (tau - gyro) / J
    return np.concatenate([v, dq, dv, dw], axis=-1)


def f_dyn(x: QuadState, u, params: QuadParams) -> StateDerivative:
    """Continuous-time nominal dynamics."""
    xd = nominal_derivative(_as_state_array(x), np.asarray(u, dtype=float), params)
    return StateDerivative.from_array(xd)


def normalize_state(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=float)
    q = x[..., Q]
    x[..., Q] = quat_canonical(q / np.linalg.norm(q, axis=-1, keepdims=True))
    return x


def rk4_increment(dyn: Callable, x: np.ndarray, u, dt: float) -> np.ndarray:
    """Classical RK4 update ``x_next - x`` for any vector field, ``u`` held over the step."""
    k1 = dyn(x, u)
    k2 = dyn(x + 0.5 * dt * k1, u)
    k3 = dyn(x + 0.5 * dt * k2, u)
    k4 = dyn(x + dt * k3, u)
    step = (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(step)):
        raise IntegrationError("non-finite state derivative during RK4 step")
    return step


def rk4(dyn: Callable, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """RK4 on flat 13-state arrays; the quaternion is renormalized afterwards."""
    return normalize_state(x + rk4_increment(dyn, x, u, dt))


def rk4_step(x, u, dt: float, dyn: Callable):
    """One RK4 step of ``dyn(x_array, u_array) -> xdot_array``.

    Accepts either a :class:`QuadState` or a flat array and returns the same
    kind. The quaternion is renormalized and sign-canonicalized afterwards.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x_arr = _as_state_array(x)
    x_next = rk4(dyn, x_arr, np.asarray(u, dtype=float), dt)
    if isinstance(x, QuadState):
        return QuadState.from_array(x_next)
    return x_next


def nominal_dyn(params: QuadParams) -> Callable:
    """Closure suitable for :func:`rk4_step`."""
    return lambda x, u: nominal_derivative(x, u, params)


__all__ = [
    "QuadParams", "QuadState", "StateDerivative", "IntegrationError",
    "collective_wrench", "f_dyn", "rk4_step", "rk4", "quat_rotate",
    "nominal_derivative", "nominal_dyn", "normalize_state", "NX", "NU",
]
