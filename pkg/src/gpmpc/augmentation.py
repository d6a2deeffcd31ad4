"""
Learned corrections to the nominal model.

Both corrections map body-frame velocity to a body-frame acceleration, axis
by axis, and enter the dynamics only through the velocity rows:

    dv += q_WB ⊙ a(q_WB_bar ⊙ v_WB)

:class:`GpCorrection` uses one 1-D GP per body axis, :class:`RdrvModel` a
diagonal linear drag.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from gpmpc import gp
from gpmpc.dataset import ResidualDataset
from gpmpc.quad_core import NX, Q, V, QuadParams, StateDerivative, _as_state_array, nominal_derivative
from gpmpc.quaternion import (
    quat_to_rotmat,
    rotate_inverse_jacobian,
    rotate_jacobian,
)

log = logging.getLogger(__name__)

MODEL_FILE_FORMAT = "gpmpc.model"
MODEL_FILE_VERSION = 1


@dataclass(frozen=True, eq=False)
class GpCorrection:
    gp_x: gp.GpAxisModel
    gp_y: gp.GpAxisModel
    gp_z: gp.GpAxisModel

    kind = "gp"

    @property
    def axes(self):
        return (self.gp_x, self.gp_y, self.gp_z)

    @property
    def n_points(self) -> int:
        return max(m.n for m in self.axes)

    @property
    def B_d(self) -> np.ndarray:
        """13x3 embedding: corrections land on the velocity rows only."""
        B = np.zeros((NX, 3))
        B[V, :] = np.eye(3)
        return B

    @staticmethod
    def features(x: np.ndarray) -> np.ndarray:
        """Feature selection: body-frame velocity (thrusts are not features)."""
        x = np.asarray(x, dtype=float)
        return np.einsum("...ji,...j->...i", quat_to_rotmat(x[..., Q]), x[..., V])

    def accel_and_grad(self, v_B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mus, dmus = [], []
        for i, model in enumerate(self.axes):
            mu, dmu = gp.mean_and_grad_1d(model, v_B[..., i])
            mus.append(mu)
            dmus.append(dmu)
        return np.stack(mus, axis=-1), np.stack(dmus, axis=-1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "axes": [gp.model_to_dict(m) for m in self.axes]}

    @classmethod
    def from_dict(cls, d: dict) -> "GpCorrection":
        return cls(*(gp.model_from_dict(a) for a in d["axes"]))


@dataclass(frozen=True)
class RdrvModel:
    D: tuple[float, float, float]

    kind = "rdrv"

    def __post_init__(self):
        D = tuple(float(v) for v in np.asarray(self.D, dtype=float).reshape(3))
        if min(D) < 0:
            raise ValueError(f"drag coefficients must be non-negative, got {D}")
        object.__setattr__(self, "D", D)

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.D)

    def accel_and_grad(self, v_B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        D = np.asarray(self.D)
        return -D * v_B, np.broadcast_to(-D, v_B.shape)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "D": list(self.D)}

    @classmethod
    def from_dict(cls, d: dict) -> "RdrvModel":
        return cls(tuple(d["D"]))


def world_correction(model, x: np.ndarray):
    """World-frame acceleration correction and its Jacobians.

    Returns ``(c, dc_dq, dc_dv)`` with shapes (..., 3), (..., 3, 4), (..., 3, 3).
    Valid for non-unit quaternions too (RK4 stage points), using the same
    homogeneous rotation as the nominal dynamics.
    """
    q = x[..., Q]
    v = x[..., V]
    R = quat_to_rotmat(q)
    v_B = np.einsum("...ji,...j->...i", R, v)
    a, da = model.accel_and_grad(v_B)
    c = np.einsum("...ij,...j->...i", R, a)
    R_da = R * da[..., None, :]
    dc_dq = rotate_jacobian(q, a) + R_da @ rotate_inverse_jacobian(q, v)
    dc_dv = R_da @ np.swapaxes(R, -1, -2)
    return c, dc_dq, dc_dv


def world_correction_value(model, x: np.ndarray) -> np.ndarray:
    R = quat_to_rotmat(x[..., Q])
    v_B = np.einsum("...ji,...j->...i", R, x[..., V])
    a, _ = model.accel_and_grad(v_B)
    return np.einsum("...ij,...j->...i", R, a)


def gp_accel_correction(corr: GpCorrection, x) -> np.ndarray:
    """Body-frame acceleration correction (mu_x(v_Bx), mu_y(v_By), mu_z(v_Bz))."""
    x = _as_state_array(x)
    a, _ = corr.accel_and_grad(GpCorrection.features(x))
    return a


def corrected_derivative(x: np.ndarray, u: np.ndarray, params: QuadParams, model) -> np.ndarray:
    if model is None:
        return nominal_derivative(x, u, params)
    return nominal_derivative(x, u, params, world_correction_value(model, x))


def f_corrected(x, u, params: QuadParams, corr: GpCorrection) -> StateDerivative:
    return StateDerivative.from_array(
        corrected_derivative(_as_state_array(x), np.asarray(u, dtype=float), params, corr))


def f_rdrv(x, u, params: QuadParams, d: RdrvModel) -> StateDerivative:
    return StateDerivative.from_array(
        corrected_derivative(_as_state_array(x), np.asarray(u, dtype=float), params, d))


def fit_rdrv(dataset: ResidualDataset) -> RdrvModel:
    """Per-axis least squares of a_e = -D_ii v_B, clamped at zero."""
    D = []
    for i in range(3):
        v = dataset.v_B[:, i]
        a = dataset.a_e_B[:, i]
        vv = float(v @ v)
        if vv == 0.0:
            log.warning("RDRv axis %d has no velocity excitation; coefficient set to 0", i)
            D.append(0.0)
            continue
        D.append(max(-float(v @ a) / vv, 0.0))
    return RdrvModel(tuple(D))


def fit_gp_hyperparams(dataset: ResidualDataset, budget: int = 150, hyper_rows: int = 1000) -> list:
    """ML-II hyperparameters per body axis, on a regular-interval subsample of ``hyper_rows`` rows."""
    if len(dataset) < 2:
        raise ValueError("need at least two residual rows to fit GPs")
    hypers = []
    for i in range(3):
        data = gp.GpDataset(dataset.v_B[:, i], dataset.a_e_B[:, i])
        ml_data = gp.select_inducing_points(data, hyper_rows)
        z = data.Z[:, 0]
        span = float(z.max() - z.min()) or 1.0
        y_std = max(float(np.std(data.y)), 1e-3)
        init = gp.RbfHyperparams((span / 4.0,), y_std, 0.1 * y_std)
        hypers.append(gp.optimize_hyperparams(ml_data, init, budget))
    return hypers


def fit_gp_correction(dataset: ResidualDataset, n_points: int = 20, budget: int = 150,
                      hyper_rows: int = 1000, hypers=None) -> GpCorrection:
    """Inducing-point selection, ML hyperparameters, final fit; one GP per body axis.

    Hyperparameters are fitted on a larger regular-interval subsample
    (``hyper_rows``) of the dataset than the final inducing set, unless
    ``hypers`` (one per axis) is given.
    """
    if len(dataset) < 2:
        raise ValueError("need at least two residual rows to fit GPs")
    if hypers is None:
        hypers = fit_gp_hyperparams(dataset, budget, hyper_rows)
    axes = []
    for i in range(3):
        data = gp.GpDataset(dataset.v_B[:, i], dataset.a_e_B[:, i])
        axes.append(gp.fit(gp.select_inducing_points(data, n_points), hypers[i]))
    return GpCorrection(*axes)


def prediction_rmse(model, dataset: ResidualDataset) -> float:
    """RMS error of the predicted body acceleration residual over all rows and axes.

    ``model=None`` scores the nominal model (zero correction).
    """
    if len(dataset) == 0:
        return float("nan")
    pred = np.zeros_like(dataset.a_e_B) if model is None else model.accel_and_grad(dataset.v_B)[0]
    return float(np.sqrt(np.mean((pred - dataset.a_e_B) ** 2)))


def save_model(model, path) -> None:
    payload = {"format": MODEL_FILE_FORMAT, "version": MODEL_FILE_VERSION}
    payload.update({"kind": "nominal"} if model is None else model.to_dict())
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        d = json.load(fh)
    if d.get("format") != MODEL_FILE_FORMAT or d.get("version") != MODEL_FILE_VERSION:
        raise ValueError(f"{path}: unsupported model file (format={d.get('format')!r}, version={d.get('version')!r})")
    kind = d.get("kind")
    if kind == "gp":
        return GpCorrection.from_dict(d)
    if kind == "rdrv":
        return RdrvModel.from_dict(d)
    if kind == "nominal":
        return None
    raise ValueError(f"{path}: unknown model kind {kind!r}")


__all__ = [
    "GpCorrection", "RdrvModel", "gp_accel_correction", "f_corrected", "f_rdrv",
    "fit_rdrv", "fit_gp_correction", "fit_gp_hyperparams", "prediction_rmse", "world_correction",
    "corrected_derivative", "save_model", "load_model",
]
