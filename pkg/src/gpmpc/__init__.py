"""Gaussian-process-augmented model predictive control for a quadrotor."""

from gpmpc.augmentation import GpCorrection, RdrvModel, fit_gp_correction, fit_rdrv
from gpmpc.mpc import MpcController, MpcProblem, MpcSolution, SolverSettings, solve
from gpmpc.quad_core import QuadParams, QuadState, f_dyn, rk4_step
from gpmpc.sim import SimConfig, run_closed_loop
from gpmpc.trajectories import ReferenceTrajectory, TrajectorySpec, circle, lemniscate, random_polynomial

__version__ = "0.1.0"

__all__ = [
    "GpCorrection", "RdrvModel", "fit_gp_correction", "fit_rdrv",
    "MpcController", "MpcProblem", "MpcSolution", "SolverSettings", "solve",
    "QuadParams", "QuadState", "f_dyn", "rk4_step",
    "SimConfig", "run_closed_loop",
    "ReferenceTrajectory", "TrajectorySpec", "circle", "lemniscate", "random_polynomial",
]
