"""
Multiple-shooting nonlinear MPC solved by SQP / real-time iterations.

Shooting nodes carry full 13-states; the QP is posed in 12-D error
coordinates (position, 3-parameter attitude error, velocity, body rate) so the
unit-norm constraint never enters it. Each QP is condensed onto the input
increments and solved with the box-constrained active-set solver in
:mod:`gpmpc.qp`. The dynamics model is pluggable: ``None`` for the nominal
model, or a correction (:class:`~gpmpc.augmentation.RdrvModel`,
:class:`~gpmpc.augmentation.GpCorrection`).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from gpmpc.augmentation import world_correction, world_correction_value
from gpmpc.qp import QpError, qp_subproblem_solve
from gpmpc.quad_core import NU, NX, P, Q, V, W, QuadParams, QuadState, _as_state_array, nominal_derivative
from gpmpc.quaternion import (
    attitude_error,
    attitude_retract,
    left_matrix,
    quat_canonical,
    quat_conj,
    quat_mul,
    quat_to_rotmat,
    right_matrix,
    rotate_jacobian,
    skew,
)

NE = 12
EP, EA, EV, EW = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12)


class MpcSolverError(RuntimeError):
    """Raised when a QP fails; ``last_iterate`` holds the last feasible solution."""

    def __init__(self, msg, last_iterate=None):
        super().__init__(msg)
        self.last_iterate = last_iterate


@dataclass(frozen=True)
class SolverSettings:
    max_sqp_iters: int = 1
    qp_tol: float = 1e-9
    kkt_tol: float = 1e-6
    line_search: bool = False
    warm_start: bool = True
    correction_eval: str = "node"  # "node": hold correction over RK4 stages; "stage": re-evaluate per stage
    regularization: float = 1e-8
    qp_max_iter: int = 200

    def __post_init__(self):
        if self.max_sqp_iters < 1 or self.qp_tol <= 0 or self.kkt_tol <= 0:
            raise ValueError("solver iteration counts and tolerances must be positive")
        if self.correction_eval not in ("node", "stage"):
            raise ValueError(f"correction_eval must be 'node' or 'stage', got {self.correction_eval!r}")


DEFAULT_Q = (200.0, 200.0, 500.0, 5.0, 5.0, 50.0, 10.0, 10.0, 10.0, 0.05, 0.05, 0.05)
DEFAULT_R = (0.1, 0.1, 0.1, 0.1)


@dataclass(frozen=True, eq=False)
class MpcProblem:
    params: QuadParams = field(default_factory=QuadParams)
    N: int = 20
    dt: float = 0.05
    Q: np.ndarray = field(default_factory=lambda: np.diag(DEFAULT_Q))
    R: np.ndarray = field(default_factory=lambda: np.diag(DEFAULT_R))
    u_min: float = 0.0
    u_max: float | None = None
    dynamics_mode: object = None
    settings: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        Qm = np.asarray(self.Q, dtype=float)
        Rm = np.asarray(self.R, dtype=float)
        if Qm.ndim == 1:
            Qm = np.diag(Qm)
        if Rm.ndim == 1:
            Rm = np.diag(Rm)
        object.__setattr__(self, "Q", Qm)
        object.__setattr__(self, "R", Rm)
        if self.u_max is None:
            object.__setattr__(self, "u_max", self.params.T_max)
        if self.N < 2 or self.dt <= 0:
            raise ValueError("horizon needs N >= 2 and dt > 0")
        if Qm.shape != (NE, NE) or Rm.shape != (NU, NU):
            raise ValueError("Q must be 12x12 and R 4x4")
        if np.linalg.eigvalsh(0.5 * (Qm + Qm.T)).min() < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (Rm + Rm.T)).min() <= 0:
            raise ValueError("R must be positive definite")
        if not (0.0 <= self.u_min < self.u_max):
            raise ValueError("input bounds must satisfy 0 <= u_min < u_max")

    @property
    def mode_name(self) -> str:
        return "nominal" if self.dynamics_mode is None else self.dynamics_mode.kind

    def with_mode(self, model) -> "MpcProblem":
        return replace(self, dynamics_mode=model)


@dataclass
class MpcSolution:
    x_traj: np.ndarray  # (N+1, 13)
    u_traj: np.ndarray  # (N, 4)
    kkt_residual: float = np.inf
    solve_time: float = 0.0
    sqp_iters: int = 0
    qp_iters: int = 0

    @property
    def states(self) -> list[QuadState]:
        return [QuadState.from_array(x) for x in self.x_traj]


# --- state-space helpers -------------------------------------------------------------------


def state_error(x, x_ref) -> np.ndarray:
    """x ⊖ x_ref in 12-D error coordinates (broadcasts)."""
    x = np.asarray(x, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    return np.concatenate([
        x[..., P] - x_ref[..., P],
        attitude_error(x[..., Q], x_ref[..., Q]),
        x[..., V] - x_ref[..., V],
        x[..., W] - x_ref[..., W],
    ], axis=-1)


def state_retract(x, dx) -> np.ndarray:
    """x ⊞ dx; exact inverse of :func:`state_error` inside the chart."""
    x = np.asarray(x, dtype=float)
    dx = np.asarray(dx, dtype=float)
    q = quat_canonical(attitude_retract(x[..., Q], dx[..., EA]))
    return np.concatenate([x[..., P] + dx[..., EP], q, x[..., V] + dx[..., EV], x[..., W] + dx[..., EW]], axis=-1)


def _error_jacobian(x, x_ref):
    """d(state_error(x ⊞ d, x_ref))/dd at d = 0, attitude block only (..., 3, 3)."""
    r = quat_canonical(quat_mul(quat_conj(x_ref[..., Q]), x[..., Q]))
    return r[..., 0, None, None] * np.eye(3) + skew(r[..., 1:])


def build_cost(x_traj, u_traj, x_ref, u_ref, Q, R) -> float:
    """Sum of ||x_k ⊖ x*_k||_Q^2 over k = 0..N and ||u_k - u*_k||_R^2 over k = 0..N-1."""
    e = state_error(x_traj, x_ref)
    du = np.asarray(u_traj, dtype=float) - np.asarray(u_ref, dtype=float)
    return float(np.einsum("ki,ij,kj->", e, Q, e) + np.einsum("ki,ij,kj->", du, R, du))


# --- dynamics and sensitivities ------------------------------------------------------------


def _continuous_jacobians(x, u, params: QuadParams, dc_dq=None, dc_dv=None):
    """Batched df/dx (…,13,13) and df/du (…,13,4) of the nominal model (+ correction terms)."""
    batch = x.shape[:-1]
    q = x[..., Q]
    w = x[..., W]
    J = params.inertia
    A = np.zeros(batch + (NX, NX))
    B = np.zeros(batch + (NX, NU))
    A[..., P, V] = np.eye(3)
    w_hat = np.concatenate([np.zeros(batch + (1,)), w], axis=-1)
    A[..., Q, Q] = 0.5 * right_matrix(w_hat)
    A[..., Q, W] = 0.5 * left_matrix(q)[..., :, 1:]
    thrust = u.sum(axis=-1)
    ez = np.broadcast_to(np.array([0.0, 0.0, 1.0]), batch + (3,))
    A[..., V, Q] = rotate_jacobian(q, ez) * (thrust / params.m)[..., None, None]
    if dc_dq is not None:
        A[..., V, Q] += dc_dq
        A[..., V, V] += dc_dv
    Jw = w * J
    A[..., W, W] = (-skew(w) * J + skew(Jw)) / J[:, None]
    R = quat_to_rotmat(q)
    B[..., V, :] = (R[..., :, 2] / params.m)[..., None]
    B[..., W, :] = params.allocation / J[:, None]
    return A, B


def discrete_step(x, u, dt: float, params: QuadParams, model=None, correction_eval: str = "node") -> np.ndarray:
    """One RK4 step of the MPC prediction model (flat arrays, broadcasts).

    With ``correction_eval="node"`` the world-frame correction is evaluated
    at the start of the step and held over the four stages.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if model is None:
        f = lambda s: nominal_derivative(s, u, params)
    elif correction_eval == "node":
        c = world_correction_value(model, x)
        f = lambda s: nominal_derivative(s, u, params, c)
    else:
        f = lambda s: nominal_derivative(s, u, params, world_correction_value(model, s))
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    xn = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    qn = xn[..., Q]
    xn[..., Q] = quat_canonical(qn / np.linalg.norm(qn, axis=-1, keepdims=True))
    return xn


def linearize_batch(X, U, dt: float, params: QuadParams, model=None, correction_eval: str = "node"):
    """RK4 step and its Jacobians in error coordinates for a stack of nodes.

    Returns ``(F, A, B)`` with F (…,13) the normalized next states, A (…,12,12)
    and B (…,12,4) such that F(x ⊞ dx, u + du) ⊖ F(x, u) ≈ A dx + B du.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    batch = X.shape[:-1]
    hold = model is not None and correction_eval == "node"
    stage = model is not None and correction_eval == "stage"
    nz = NX + NU + (3 if hold else 0)
    I_ext = np.zeros(batch + (NX, nz))
    I_ext[..., :, :NX] = np.eye(NX)

    if hold:
        c0, dc_dq0, dc_dv0 = world_correction(model, X)
    else:
        c0 = None

    ks, Ss = [], []
    xs = X
    for i, a in enumerate((0.0, 0.5, 0.5, 1.0)):
        if i > 0:
            xs = X + (a * dt) * ks[-1]
        if stage:
            c, dq, dv = world_correction(model, xs)
            A_c, B_c = _continuous_jacobians(xs, U, params, dq, dv)
            k = nominal_derivative(xs, U, params, c)
        else:
            A_c, B_c = _continuous_jacobians(xs, U, params)
            k = nominal_derivative(xs, U, params, c0)
        if i == 0:
            S = np.zeros(batch + (NX, nz))
            S[..., :, :NX] = A_c
        else:
            S = A_c @ (I_ext + (a * dt) * Ss[-1])
        S[..., :, NX:NX + NU] += B_c
        if hold:
            S[..., V, NX + NU:] += np.eye(3)
        ks.append(k)
        Ss.append(S)

    Phi = I_ext + (dt / 6.0) * (Ss[0] + 2.0 * Ss[1] + 2.0 * Ss[2] + Ss[3])
    Phi_x = Phi[..., :, :NX]
    Phi_u = Phi[..., :, NX:NX + NU]
    if hold:
        dc_dx = np.zeros(batch + (3, NX))
        dc_dx[..., :, Q] = dc_dq0
        dc_dx[..., :, V] = dc_dv0
        Phi_x = Phi_x + Phi[..., :, NX + NU:] @ dc_dx

    F = X + (dt / 6.0) * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3])
    q_u = F[..., Q].copy()
    norm = np.linalg.norm(q_u, axis=-1, keepdims=True)
    q_n = quat_canonical(q_u / norm)
    F[..., Q] = q_n
    # sign flip of the canonicalization cancels inside the error chart
    sign = np.sign(np.sum(q_n * q_u, axis=-1))[..., None, None]

    E = np.zeros(batch + (NX, NE))
    E[..., P, EP] = np.eye(3)
    E[..., Q, EA] = 0.5 * left_matrix(X[..., Q])[..., :, 1:]
    E[..., V, EV] = np.eye(3)
    E[..., W, EW] = np.eye(3)
    Pm = np.zeros(batch + (NE, NX))
    Pm[..., EP, P] = np.eye(3)
    Pm[..., EA, Q] = 2.0 * sign * left_matrix(quat_conj(q_n))[..., 1:, :] / norm[..., None]
    Pm[..., EV, V] = np.eye(3)
    Pm[..., EW, W] = np.eye(3)

    A = Pm @ Phi_x @ E
    Bm = Pm @ Phi_u
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(Bm))):
        raise MpcSolverError("non-finite dynamics Jacobian")
    return F, A, Bm


def linearize_dynamics(x, u, problem: MpcProblem, x_next=None):
    """Discrete-time Jacobians (A 12x12, B 12x4) and defect c = F(x, u) ⊖ x_next.

    Without ``x_next`` the defect is taken against the model's own prediction
    and is therefore zero.
    """
    xa = _as_state_array(x)
    F, A, B = linearize_batch(xa, np.asarray(u, dtype=float), problem.dt, problem.params,
                              problem.dynamics_mode, problem.settings.correction_eval)
    c = np.zeros(NE) if x_next is None else state_error(F, _as_state_array(x_next))
    return A, B, c


# --- solver ---------------------------------------------------------------------------------


@dataclass
class ReferenceWindow:
    x_ref: np.ndarray  # (N+1, 13)
    u_ref: np.ndarray  # (N, 4)


def _condense(A, B, J_att):
    """Prediction matrix G (N*12, N*4) of the error states x_1..x_N w.r.t. input increments,
    premultiplied by the residual Jacobians."""
    N = A.shape[0]
    G = np.zeros((N, NE, N, NU))
    T = np.zeros((N, NE, NU))
    for k in range(N):
        if k:
            T[:k] = A[k] @ T[:k]
        T[k] = B[k]
        G[k, :, :k + 1, :] = np.moveaxis(T[:k + 1], 0, 1)
    G[:, EA] = np.einsum("kij,kjlm->kilm", J_att, G[:, EA])
    return G.reshape(N * NE, N * NU)


def solve(problem: MpcProblem, x_init, ref: ReferenceWindow, warm_start: MpcSolution | None = None) -> MpcSolution:
    """Run SQP iterations (one for RTI) on the multiple-shooting NLP.

    Each iteration linearizes the RK4 model along the shooting trajectory,
    condenses the QP onto input increments, solves it under the input box and
    takes the (optionally line-searched) step.
    """
    t0 = time.perf_counter()
    s = problem.settings
    N = problem.N
    params = problem.params
    x0 = _as_state_array(x_init)
    if not np.all(np.isfinite(x0)):
        raise MpcSolverError("non-finite initial state")
    x_ref = np.asarray(ref.x_ref, dtype=float)
    u_ref = np.asarray(ref.u_ref, dtype=float)
    if x_ref.shape[0] < N + 1 or u_ref.shape[0] < N:
        raise ValueError(f"reference window needs {N + 1} states and {N} inputs")
    x_ref, u_ref = x_ref[:N + 1], u_ref[:N]

    if warm_start is not None and s.warm_start:
        X = np.array(warm_start.x_traj, dtype=float)
        Uc = np.array(warm_start.u_traj, dtype=float)
    else:
        X = x_ref.copy()
        Uc = u_ref.copy()
    Uc = np.clip(Uc, problem.u_min, problem.u_max)
    X[0] = x0
    lb_abs, ub_abs = problem.u_min, problem.u_max
    Rm = problem.R
    Qbar = np.kron(np.eye(N), problem.Q)
    Rbar = np.kron(np.eye(N), Rm)
    mu = 0.0
    kkt = np.inf
    iters = qp_iters = 0

    for _ in range(s.max_sqp_iters):
        F, A, B = linearize_batch(X[:N], Uc, problem.dt, params, problem.dynamics_mode, s.correction_eval)
        defects = state_error(F, X[1:])
        r0 = state_error(X, x_ref)
        J_att = _error_jacobian(X[1:], x_ref[1:])

        # free response of the error states to the defects
        free = np.zeros((N, NE))
        sfree = np.zeros(NE)
        for k in range(N):
            sfree = A[k] @ sfree + defects[k]
            free[k] = sfree
        free_res = free.copy()
        free_res[:, EA] = np.einsum("kij,kj->ki", J_att, free[:, EA])
        m0 = (r0[1:] + free_res).reshape(-1)

        M = _condense(A, B, J_att)
        du_ref = (Uc - u_ref).reshape(-1)
        QM = Qbar @ M
        H = 2.0 * (M.T @ QM + Rbar)
        H[np.diag_indices_from(H)] += s.regularization
        h = 2.0 * (QM.T @ m0 + Rbar @ du_ref)

        u_flat = Uc.reshape(-1)
        lb = lb_abs - u_flat
        ub = ub_abs - u_flat
        # reduced gradient of the NLP at the current iterate, projected onto active bounds
        grad = 2.0 * (QM.T @ r0[1:].reshape(-1) + Rbar @ du_ref)
        grad = np.where((lb >= -1e-12) & (grad > 0), 0.0, grad)
        grad = np.where((ub <= 1e-12) & (grad < 0), 0.0, grad)
        kkt = max(float(np.abs(grad).max()), float(np.abs(defects).max()))
        if kkt < s.kkt_tol:
            break

        try:
            qp = qp_subproblem_solve(H, h, lb, ub, tol=s.qp_tol, max_iter=s.qp_max_iter)
        except QpError as exc:
            last = MpcSolution(X, Uc, kkt, time.perf_counter() - t0, iters, qp_iters)
            raise MpcSolverError(f"QP failed: {exc}", last) from None
        qp_iters += qp.iterations
        dU = qp.x.reshape(N, NU)

        dX = np.zeros((N + 1, NE))
        for k in range(N):
            dX[k + 1] = A[k] @ dX[k] + B[k] @ dU[k] + defects[k]

        alpha = 1.0
        if s.line_search:
            cost0 = build_cost(X, Uc, x_ref, u_ref, problem.Q, Rm)
            d1 = float(np.abs(defects).sum())
            # directional derivative of the cost along the step
            res = np.concatenate([np.zeros((1, NE)), dX[1:]])
            res[1:, EA] = np.einsum("kij,kj->ki", J_att, dX[1:, EA])
            dcost = 2.0 * float(np.einsum("ki,ij,kj->", r0, problem.Q, res)) + 2.0 * float(du_ref @ Rbar @ dU.reshape(-1))
            curv = 0.5 * float(qp.x @ H @ qp.x)
            if d1 > 0:
                mu = max(mu, (dcost + curv) / (0.5 * d1) + 1e-6)
            phi0 = cost0 + mu * d1
            slope = dcost - mu * d1
            for _ls in range(30):
                Xt = state_retract(X, alpha * dX)
                Ut = Uc + alpha * dU
                Ft = discrete_step(Xt[:N], Ut, problem.dt, params, problem.dynamics_mode, s.correction_eval)
                phi = build_cost(Xt, Ut, x_ref, u_ref, problem.Q, Rm) + mu * float(np.abs(state_error(Ft, Xt[1:])).sum())
                if phi <= phi0 + 1e-4 * alpha * min(slope, 0.0):
                    break
                alpha *= 0.5
        X = state_retract(X, alpha * dX)
        X[0] = x0
        Uc = np.clip(Uc + alpha * dU, lb_abs, ub_abs)
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Uc))):
            raise MpcSolverError("non-finite SQP iterate")
        iters += 1

    return MpcSolution(X, Uc, kkt, time.perf_counter() - t0, iters, qp_iters)


def shift_solution(sol: MpcSolution, steps: float) -> MpcSolution:
    """Advance a solution by ``steps`` node intervals (fractional allowed).

    Nodes past the horizon repeat the last node.
    """
    N = sol.u_traj.shape[0]
    X, U = sol.x_traj, sol.u_traj
    if steps <= 0:
        return MpcSolution(X.copy(), U.copy())
    tau = np.arange(N + 1) + steps
    i0 = np.minimum(np.floor(tau).astype(int), N)
    i1 = np.minimum(i0 + 1, N)
    frac = np.where(i0 >= N, 0.0, tau - np.floor(tau))[:, None]
    dx = state_error(X[i1], X[i0])
    Xn = state_retract(X[i0], frac * dx)
    ui0 = np.minimum(i0[:N], N - 1)
    ui1 = np.minimum(ui0 + 1, N - 1)
    ufrac = np.where(i0[:N] >= N - 1, 0.0, frac[:N, 0])[:, None]
    Un = (1.0 - ufrac) * U[ui0] + ufrac * U[ui1]
    return MpcSolution(Xn, Un)


TELEMETRY_HEADER = ["tick", "t", "solve_time_ms", "kkt_residual", "sqp_iters", "qp_iters"]


class MpcController:
    """RTI controller: holds warm-start state and per-solve telemetry.

    Not thread-safe; use one instance per rollout.
    """

    def __init__(self, problem: MpcProblem, control_dt: float, timing: bool = True):
        self.problem = problem
        self.control_dt = control_dt
        self.timing = timing
        self.warm: MpcSolution | None = None
        self.telemetry: list[tuple] = []

    def reset(self):
        self.warm = None
        self.telemetry = []

    def tick(self, t: float, x, ref: ReferenceWindow) -> MpcSolution:
        warm = None
        if self.warm is not None and self.problem.settings.warm_start:
            warm = shift_solution(self.warm, self.control_dt / self.problem.dt)
        sol = solve(self.problem, x, ref, warm)
        self.warm = sol
        solve_ms = sol.solve_time * 1e3 if self.timing else float("nan")
        self.telemetry.append((len(self.telemetry), t, solve_ms, sol.kkt_residual, sol.sqp_iters, sol.qp_iters))
        return sol

    def write_telemetry(self, path, append: bool = True):
        mode = "a" if append else "w"
        new = True
        try:
            with open(path) as fh:
                new = fh.read(1) == ""
        except FileNotFoundError:
            pass
        with open(path, mode, newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new or not append:
                w.writerow(TELEMETRY_HEADER)
            for row in self.telemetry:
                w.writerow(row)
