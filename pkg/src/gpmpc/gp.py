"""Scalar-output Gaussian process regression with an RBF kernel.

Noise enters only on the diagonal of the training Gram matrix; cross- and
test covariances use the noise-free kernel so the posterior interpolates as
sigma_n -> 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-6
MODEL_FORMAT = "gpmpc.gp_axis"
MODEL_VERSION = 1


class GpFitError(RuntimeError):
    """The Gram matrix could not be factorized, even with bounded jitter."""


@dataclass(frozen=True)
class RbfHyperparams:
    length_scales: tuple[float, ...]
    sigma_f: float
    sigma_n: float

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.length_scales))
        object.__setattr__(self, "length_scales", ls)
        object.__setattr__(self, "sigma_f", float(self.sigma_f))
        object.__setattr__(self, "sigma_n", float(self.sigma_n))
        if min(ls) <= 0 or self.sigma_f <= 0 or self.sigma_n < 0:
            raise ValueError(f"hyperparameters must be positive: {self}")

    @property
    def dim(self) -> int:
        return len(self.length_scales)

    def to_log(self) -> np.ndarray:
        return np.log(np.r_[self.length_scales, self.sigma_f, self.sigma_n])

    @classmethod
    def from_log(cls, theta) -> "RbfHyperparams":
        e = np.exp(np.asarray(theta, dtype=float))
        return cls(tuple(e[:-2]), e[-2], e[-1])


@dataclass(frozen=True)
class GpDataset:
    Z: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if Z.shape[0] != y.shape[0]:
            raise ValueError(f"{Z.shape[0]} inputs but {y.shape[0]} targets")
        if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(y))):
            raise ValueError("GP dataset contains non-finite values")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.Z.shape[1]

    def subset(self, idx) -> "GpDataset":
        idx = np.asarray(idx, dtype=int)
        return GpDataset(self.Z[idx], self.y[idx])


@dataclass(frozen=True, eq=False)
class GpAxisModel:
    Z_train: np.ndarray
    y_train: np.ndarray
    hyper: RbfHyperparams
    chol_K: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.y_train.shape[0]


def _sqdist(A, B, length_scales):
    A = A / length_scales
    B = B / length_scales
    d2 = (A * A).sum(-1)[:, None] + (B * B).sum(-1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def rbf_kernel(z_i, z_j, hyper: RbfHyperparams) -> float:
    """Noise-free RBF covariance between two inputs."""
    diff = (np.atleast_1d(np.asarray(z_i, dtype=float))
            - np.atleast_1d(np.asarray(z_j, dtype=float))) / np.asarray(hyper.length_scales)
    return hyper.sigma_f ** 2 * math.exp(-0.5 * float(diff @ diff))


def kernel_matrix(A, B, hyper: RbfHyperparams) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    ls = np.asarray(hyper.length_scales)
    if A.shape[1] == 1:
        # exact differences in 1-D; the expanded form loses digits near the diagonal
        d2 = ((A[:, 0, None] - B[None, :, 0]) / ls[0]) ** 2
    else:
        d2 = _sqdist(A, B, ls)
    return hyper.sigma_f ** 2 * np.exp(-0.5 * d2)


def gram_matrix(Z, hyper: RbfHyperparams) -> np.ndarray:
    K = kernel_matrix(Z, Z, hyper)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += hyper.sigma_n ** 2
    return K


def _cholesky(K, sigma_f, sigma_n):
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-12):
        Kj = K.copy()
        Kj[np.diag_indices_from(Kj)] += jitter * sigma_f ** 2
        try:
            return np.linalg.cholesky(Kj), jitter * sigma_f ** 2
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise GpFitError(
        f"Gram matrix not positive definite with jitter up to {JITTER_MAX:g}*sigma_f^2 "
        f"(n={K.shape[0]}, sigma_f={sigma_f:g}, sigma_n={sigma_n:g}); "
        "duplicate inputs with zero noise are the usual cause")


def fit(data: GpDataset, hyper: RbfHyperparams) -> GpAxisModel:
    """Factorize the Gram matrix and cache K^-1 y."""
    if len(data) < 1:
        raise ValueError("cannot fit a GP to an empty dataset")
    if hyper.dim != data.dim:
        raise ValueError(f"hyperparameters are {hyper.dim}-D but inputs are {data.dim}-D")
    K = gram_matrix(data.Z, hyper)
    L, jitter = _cholesky(K, hyper.sigma_f, hyper.sigma_n)
    if jitter:
        log.warning("GP Gram matrix needed jitter %.3g", jitter)
    alpha = cho_solve((L, True), data.y)
    return GpAxisModel(data.Z.copy(), data.y.copy(), hyper, L, alpha, jitter)


def _query(z, dim):
    """Normalize a query to (m, d); report whether it was a single point."""
    z = np.asarray(z, dtype=float)
    if dim == 1:
        return z.reshape(-1, 1), z.ndim == 0
    return z.reshape(-1, dim), z.ndim == 1


def predict_mean(model: GpAxisModel, z):
    """Posterior mean k(Z, z)^T alpha. Scalar in, scalar out; (m, d) in, (m,) out."""
    zq, scalar = _query(z, model.Z_train.shape[1])
    mu = kernel_matrix(zq, model.Z_train, model.hyper) @ model.alpha
    return float(mu[0]) if scalar else mu


def predict_mean_grad(model: GpAxisModel, z):
    """Gradient of the posterior mean w.r.t. the query input, shape (..., d)."""
    zq, scalar = _query(z, model.Z_train.shape[1])
    k = kernel_matrix(zq, model.Z_train, model.hyper)
    ls2 = np.asarray(model.hyper.length_scales) ** 2
    diff = model.Z_train[None, :, :] - zq[:, None, :]
    g = np.einsum("mn,n,mnd->md", k, model.alpha, diff) / ls2
    return g[0] if scalar else g


def predict_var(model: GpAxisModel, z, clamp: bool = True):
    """Posterior variance of the latent function (no observation noise)."""
    zq, scalar = _query(z, model.Z_train.shape[1])
    k = kernel_matrix(zq, model.Z_train, model.hyper)
    v = solve_triangular(model.chol_K, k.T, lower=True)
    var = model.hyper.sigma_f ** 2 - (v * v).sum(axis=0)
    if clamp:
        var = np.maximum(var, 0.0)
    return float(var[0]) if scalar else var


def mean_and_grad_1d(model: GpAxisModel, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fast path for 1-D models used inside the solver; ``z`` is any-shape array."""
    z = np.asarray(z, dtype=float)
    zt = model.Z_train[:, 0]
    inv_l2 = 1.0 / model.hyper.length_scales[0] ** 2
    diff = zt - z[..., None]
    w = (model.hyper.sigma_f ** 2) * np.exp(-0.5 * inv_l2 * diff * diff) * model.alpha
    mu = w.sum(-1)
    dmu = (w * diff).sum(-1) * inv_l2
    return mu, dmu


def log_marginal_likelihood(data: GpDataset, hyper: RbfHyperparams) -> float:
    model = fit(data, hyper)
    n = len(data)
    return float(-0.5 * data.y @ model.alpha
                 - np.log(np.diag(model.chol_K)).sum()
                 - 0.5 * n * math.log(2.0 * math.pi))


def _lml_or_neg_inf(data, theta):
    try:
        return log_marginal_likelihood(data, RbfHyperparams.from_log(theta))
    except (GpFitError, ValueError, FloatingPointError):
        return -math.inf


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def optimize_hyperparams(data: GpDataset, init: RbfHyperparams, budget: int = 200,
                         log_bounds: tuple[float, float] = (-9.0, 9.0)) -> RbfHyperparams:
    """Maximize the log marginal likelihood by coordinate-wise search in log space.

    Several deterministic starts are swept coordinate by coordinate: a coarse
    grid brackets the best value along the axis, golden-section refines it,
    and a move is only accepted if it improves the likelihood. The result never
    scores below ``init``.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    lo, hi = log_bounds
    evals = 0

    def score(theta):
        nonlocal evals
        evals += 1
        return _lml_or_neg_inf(data, theta)

    theta0 = init.to_log()
    best_theta, best = theta0.copy(), score(theta0)

    y_std = float(np.std(data.y)) or 1.0
    z_std = np.std(data.Z, axis=0)
    z_std = np.where(z_std > 0, z_std, 1.0)
    starts = [theta0,
              np.log(np.r_[z_std, y_std, 0.1 * y_std]),
              np.log(np.r_[0.3 * z_std, y_std, 0.3 * y_std])]

    for start in starts:
        if evals >= budget:
            break
        theta = np.clip(start, lo, hi)
        cur = best if np.array_equal(theta, best_theta) else score(theta)
        width = 2.0
        while evals < budget and width > 1e-3:
            improved = False
            for i in range(theta.size):
                if evals >= budget:
                    break
                grid = np.clip(theta[i] + width * np.linspace(-1.0, 1.0, 5), lo, hi)
                vals = []
                for g in grid:
                    if evals >= budget:
                        break
                    cand = theta.copy()
                    cand[i] = g
                    vals.append(score(cand))
                if not vals:
                    break
                j = int(np.argmax(vals))
                a = grid[max(j - 1, 0)]
                b = grid[min(j + 1, len(vals) - 1)]
                best_i, best_v = grid[j], vals[j]
                # golden-section inside the bracket around the best grid point
                c = b - _GOLDEN * (b - a)
                d = a + _GOLDEN * (b - a)
                fc = fd = None
                for _ in range(8):
                    if evals >= budget or b - a < 1e-4:
                        break
                    if fc is None:
                        tc = theta.copy(); tc[i] = c; fc = score(tc)
                    if fd is None:
                        td = theta.copy(); td[i] = d; fd = score(td)
                    for xv, fv in ((c, fc), (d, fd)):
                        if fv > best_v:
                            best_i, best_v = xv, fv
                    if fc > fd:
                        b, d, fd = d, c, fc
                        c = b - _GOLDEN * (b - a)
                        fc = None
                    else:
                        a, c, fc = c, d, fd
                        d = a + _GOLDEN * (b - a)
                        fd = None
                if best_v > cur:
                    theta[i] = best_i
                    cur = best_v
                    improved = True
            if cur > best:
                best, best_theta = cur, theta.copy()
            if not improved:
                width *= 0.25
    if not math.isfinite(best):
        raise GpFitError("no hyperparameter candidate produced a factorizable Gram matrix")
    return RbfHyperparams.from_log(best_theta)


def select_inducing_points(data: GpDataset, n_points: int) -> GpDataset:
    """Pick rows nearest to ``n_points`` equispaced targets over the input range (1-D)."""
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    if len(data) == 0:
        raise ValueError("cannot subsample an empty dataset")
    if data.dim != 1:
        raise ValueError("regular-interval inducing selection is defined for 1-D inputs")
    z = data.Z[:, 0]
    if n_points >= len(data):
        _, first = np.unique(z, return_index=True)
        return data.subset(np.sort(first))
    targets = np.linspace(z.min(), z.max(), n_points)
    order = np.argsort(z, kind="stable")
    zs = z[order]
    pos = np.clip(np.searchsorted(zs, targets), 1, len(zs) - 1)
    left, right = pos - 1, pos
    pick = np.where(np.abs(zs[left] - targets) <= np.abs(zs[right] - targets), left, right)
    idx = order[pick]
    _, keep = np.unique(idx, return_index=True)
    return data.subset(idx[np.sort(keep)])


def model_to_dict(model: GpAxisModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "Z": model.Z_train.tolist(),
        "y": model.y_train.tolist(),
        "length_scales": list(model.hyper.length_scales),
        "sigma_f": model.hyper.sigma_f,
        "sigma_n": model.hyper.sigma_n,
    }


def model_from_dict(d: dict) -> GpAxisModel:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a GP axis model: format={d.get('format')!r}")
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported GP model version {d.get('version')}")
    hyper = RbfHyperparams(tuple(d["length_scales"]), d["sigma_f"], d["sigma_n"])
    return fit(GpDataset(np.array(d["Z"], dtype=float), np.array(d["y"], dtype=float)), hyper)
