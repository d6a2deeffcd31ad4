"""Dense strictly convex QP with box constraints, primal active-set method."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class QpError(RuntimeError):
    pass


@dataclass
class QpResult:
    x: np.ndarray
    lam_lower: np.ndarray
    lam_upper: np.ndarray
    iterations: int
    stationarity: float


def qp_subproblem_solve(H, g, lb, ub, x0=None, tol: float = 1e-9, max_iter: int = 200) -> QpResult:
    """Solve min 0.5 x'Hx + g'x subject to lb <= x <= ub.

    Classic primal active-set iteration started from ``x0`` projected onto the
    box (a warm start keeps the number of working-set changes small). Bound
    multipliers are returned non-negative for both sides.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    lb = np.broadcast_to(np.asarray(lb, dtype=float), (n,))
    ub = np.broadcast_to(np.asarray(ub, dtype=float), (n,))
    if np.any(lb > ub):
        raise QpError("infeasible bounds: lb > ub")
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
        raise QpError("non-finite QP data")

    x = np.clip(np.zeros(n) if x0 is None else np.asarray(x0, dtype=float), lb, ub)
    # working set: -1 at lower bound, +1 at upper bound, 0 free
    ws = np.zeros(n, dtype=int)
    ws[x <= lb] = -1
    ws[(x >= ub) & (ws == 0)] = 1
    ws[lb == ub] = -1
    x[ws == -1] = lb[ws == -1]
    x[ws == 1] = ub[ws == 1]

    for it in range(1, max_iter + 1):
        free = ws == 0
        grad = H @ x + g
        if np.any(free):
            Hf = H[np.ix_(free, free)]
            try:
                step_f = -cho_solve(cho_factor(Hf, lower=True, check_finite=False), grad[free], check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise QpError(f"reduced Hessian not positive definite: {exc}") from None
        else:
            step_f = np.zeros(0)

        step_norm = float(np.abs(step_f).max()) if step_f.size else 0.0
        if step_norm <= tol * (1.0 + np.linalg.norm(x, np.inf)):
            # stationary on the working set: check multiplier signs
            lam = np.where(ws == -1, grad, 0.0) - np.where(ws == 1, grad, 0.0)
            lam[lb == ub] = np.abs(grad[lb == ub])
            worst = int(np.argmin(lam))
            if lam[worst] >= -tol * (1.0 + np.abs(grad).max()):
                return _result(H, g, x, ws, lb, ub, it)
            ws[worst] = 0
            continue

        # ratio test along the free step
        xf = x[free]
        alpha = 1.0
        block = -1
        lbf, ubf = lb[free], ub[free]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hi = np.where(step_f > 0, (ubf - xf) / step_f, np.inf)
            t_lo = np.where(step_f < 0, (lbf - xf) / step_f, np.inf)
        t = np.minimum(t_hi, t_lo)
        j = int(np.argmin(t))
        if t[j] < 1.0:
            alpha = max(float(t[j]), 0.0)
            block = j
        x[free] = xf + alpha * step_f
        if block >= 0:
            idx = np.flatnonzero(free)[block]
            if t_hi[block] <= t_lo[block]:
                ws[idx], x[idx] = 1, ub[idx]
            else:
                ws[idx], x[idx] = -1, lb[idx]
    raise QpError(f"active-set QP did not converge in {max_iter} iterations")


def _result(H, g, x, ws, lb, ub, it):
    grad = H @ x + g
    lam_l = np.where(ws == -1, np.maximum(grad, 0.0), 0.0)
    lam_u = np.where(ws == 1, np.maximum(-grad, 0.0), 0.0)
    stat = float(np.abs(grad - lam_l + lam_u).max()) if x.size else 0.0
    return QpResult(x, lam_l, lam_u, it, stat)


def projected_gradient(H, g, lb, ub, x0=None, iters: int = 20000, tol: float = 1e-13) -> np.ndarray:
    """Reference box-QP solver: accelerated projected gradient run to convergence."""
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    step = 1.0 / np.linalg.eigvalsh(H).max()
    x = np.clip(np.zeros_like(g) if x0 is None else x0, lb, ub)
    y, t = x.copy(), 1.0
    for _ in range(iters):
        x_new = np.clip(y - step * (H @ y + g), lb, ub)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        if np.abs(x_new - x).max() < tol:
            x = x_new
            break
        x, t = x_new, t_new
    return x
