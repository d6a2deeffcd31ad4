"""Residual datasets: body-frame acceleration error as a function of body velocity."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from gpmpc.quad_core import Q, V, QuadParams, nominal_dyn, rk4
from gpmpc.quaternion import quat_rotate_inverse

log = logging.getLogger(__name__)

CSV_HEADER = ["t", "vx_b", "vy_b", "vz_b", "ae_x", "ae_y", "ae_z", "dt"]


class DatasetParseError(ValueError):
    pass


@dataclass
class FlightLogRecord:
    t: float
    x: np.ndarray  # flat 13-state
    u: np.ndarray
    v_pred_next: np.ndarray
    dt_k: float


@dataclass
class ResidualDataset:
    t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v_B: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    a_e_B: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    dt: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rejected: int = 0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.v_B = np.asarray(self.v_B, dtype=float).reshape(-1, 3)
        self.a_e_B = np.asarray(self.a_e_B, dtype=float).reshape(-1, 3)
        self.dt = np.asarray(self.dt, dtype=float).reshape(-1)
        n = self.t.shape[0]
        if not (self.v_B.shape[0] == self.a_e_B.shape[0] == self.dt.shape[0] == n):
            raise ValueError("residual dataset columns have different lengths")

    def __len__(self):
        return self.t.shape[0]

    def subset(self, idx) -> "ResidualDataset":
        idx = np.asarray(idx, dtype=int)
        return ResidualDataset(self.t[idx], self.v_B[idx], self.a_e_B[idx], self.dt[idx])

    @classmethod
    def concatenate(cls, parts: Sequence["ResidualDataset"]) -> "ResidualDataset":
        parts = list(parts)
        if not parts:
            return cls()
        return cls(np.concatenate([p.t for p in parts]),
                   np.concatenate([p.v_B for p in parts]),
                   np.concatenate([p.a_e_B for p in parts]),
                   np.concatenate([p.dt for p in parts]),
                   sum(p.rejected for p in parts))


def build_residuals(log_records: Sequence[FlightLogRecord], params: QuadParams | None = None) -> ResidualDataset:
    """Time-normalized velocity error for each consecutive pair of records.

    Both the measured and the predicted next velocity are expressed in the body
    frame of sample k, the same frame as the feature velocity.
    """
    ts, vbs, aes, dts = [], [], [], []
    rejected = 0
    for k in range(len(log_records) - 1):
        rec, nxt = log_records[k], log_records[k + 1]
        dt_k = rec.dt_k
        if not (dt_k > 0 and nxt.t > rec.t):
            rejected += 1
            continue
        q = rec.x[Q]
        v_meas = quat_rotate_inverse(q, nxt.x[V])
        v_pred = quat_rotate_inverse(q, rec.v_pred_next)
        a_e = (v_meas - v_pred) / dt_k
        v_b = quat_rotate_inverse(q, rec.x[V])
        if not (np.all(np.isfinite(a_e)) and np.all(np.isfinite(v_b))):
            rejected += 1
            continue
        ts.append(rec.t)
        vbs.append(v_b)
        aes.append(a_e)
        dts.append(dt_k)
    if rejected:
        log.warning("build_residuals rejected %d of %d pairs", rejected, max(len(log_records) - 1, 0))
    return ResidualDataset(np.array(ts), np.array(vbs).reshape(-1, 3),
                           np.array(aes).reshape(-1, 3), np.array(dts), rejected)


def predict_next_velocity(x: np.ndarray, u: np.ndarray, dt: float, params: QuadParams,
                          dyn: Callable | None = None) -> np.ndarray:
    """One-step RK4 prediction of the next world velocity (defaults to the nominal model)."""
    dyn = dyn or nominal_dyn(params)
    return rk4(dyn, np.asarray(x, dtype=float), np.asarray(u, dtype=float), dt)[V]


def recompute_predictions(log_records: Sequence[FlightLogRecord], params: QuadParams,
                          dyn: Callable | None = None) -> list[FlightLogRecord]:
    """Refill ``v_pred_next`` of an offline log with a given model."""
    return [FlightLogRecord(r.t, r.x, r.u, predict_next_velocity(r.x, r.u, r.dt_k, params, dyn), r.dt_k)
            for r in log_records]


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(ds: ResidualDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i in range(len(ds)):
            w.writerow([_fmt(ds.t[i]), *map(_fmt, ds.v_B[i]), *map(_fmt, ds.a_e_B[i]), _fmt(ds.dt[i])])


def load_dataset(path) -> ResidualDataset:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise DatasetParseError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise DatasetParseError(f"{path}: line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise DatasetParseError(f"{path}: line {lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DatasetParseError(f"{path}: line {lineno}: non-finite value in row {row}")
            rows.append(vals)
    a = np.array(rows, dtype=float).reshape(-1, len(CSV_HEADER))
    return ResidualDataset(a[:, 0], a[:, 1:4], a[:, 4:7], a[:, 7])
