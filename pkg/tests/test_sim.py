import csv

import numpy as np
import pytest

from gpmpc.config import ExperimentConfig
from gpmpc.mpc import MpcProblem
from gpmpc.quad_core import QuadState, nominal_derivative, rk4, rk4_increment
from gpmpc.sim import (
    DragConfig,
    NoiseConfig,
    RolloutResult,
    SimConfig,
    SimWorld,
    drag_accel_body,
    plant_derivative,
    run_closed_loop,
    speed_binned_rmse,
    step_sim,
    write_results,
)
from gpmpc.trajectories import TrajectorySpec, circle, hover_reference

from conftest import random_states

NOISY = SimConfig(drag=DragConfig((0.1, 0.1, 0.05), (0.09, 0.09, 0.03)),
                  noise=NoiseConfig(0.1, 0.001, 0.02, 0.02), seed=3)


def test_plant_without_disturbances_is_nominal(params, rng):
    for x in random_states(rng, 5):
        u = rng.uniform(0, params.T_max, 4)
        assert np.array_equal(plant_derivative(x, u, SimConfig(), params), nominal_derivative(x, u, params))


def test_linear_drag_substitution():
    assert np.allclose(drag_accel_body([5.0, 0, 0], DragConfig(linear=(0.3, 0.3, 0.3))), [-1.5, 0, 0])


def test_drag_board_doubles_quadratic_y(tmp_path):
    cfg = ExperimentConfig.load("configs/drag_board.yaml")
    board = cfg.sim.drag
    plain = DragConfig(quadratic=board.quadratic)
    with_board = DragConfig(quadratic=board.quadratic, board_y=board.board_y)
    v = [0.0, 5.0, 0.0]
    assert drag_accel_body(v, with_board)[1] == 2.0 * drag_accel_body(v, plain)[1]
    assert drag_accel_body([5.0, 0, 0], with_board)[0] == drag_accel_body([5.0, 0, 0], plain)[0]


def test_scalar_plant_matches_array_plant(params, rng):
    # the per-step scalar integrator must agree with RK4 on plant_derivative
    cfg = SimConfig(drag=DragConfig((0.2, 0.1, 0.3), (0.05, 0.1, 0.02), board_y=0.04))
    for x in random_states(rng, 5):
        u = rng.uniform(0, params.T_max, 4)
        world = SimWorld(x, params, cfg)
        step_sim(world, u, cfg.sim_dt)
        ref = rk4(lambda s, uu: plant_derivative(s, uu, cfg, params), x, u, cfg.sim_dt)
        assert np.allclose(world.x, ref, rtol=1e-12, atol=1e-12)


def test_noise_free_runs_are_identical(params):
    x0 = QuadState(v_WB=[2.0, 0, 1.0]).as_array()
    runs = []
    for seed in (1, 2):
        world = SimWorld(x0, params, SimConfig(drag=NOISY.drag, seed=seed))
        step_sim(world, np.full(4, 2.5), 0.2)
        runs.append(world.x)
    assert np.array_equal(runs[0], runs[1])


def test_seeded_noise_is_reproducible(params):
    x0 = QuadState.hover().as_array()
    out = []
    for seed in (5, 5, 6):
        world = SimWorld(x0, params, NOISY.with_seed(seed))
        for _ in range(10):
            step_sim(world, np.full(4, params.hover_thrust), 0.01)
        out.append(world.x)
    assert np.array_equal(out[0], out[1])
    assert not np.array_equal(out[0], out[2])


def test_hover_drift_without_disturbances(params):
    world = SimWorld(QuadState.hover([1.0, 2.0, 3.0]).as_array(), params, SimConfig())
    step_sim(world, np.full(4, params.hover_thrust), 10.0)
    assert np.linalg.norm(world.x[0:3] - [1.0, 2.0, 3.0]) < 1e-6


def test_thrust_is_clipped_to_limits(params):
    world = SimWorld(QuadState.hover().as_array(), params, SimConfig())
    step_sim(world, np.full(4, 100.0), 0.1)
    ref = SimWorld(QuadState.hover().as_array(), params, SimConfig())
    step_sim(ref, np.full(4, params.T_max), 0.1)
    assert np.array_equal(world.x, ref.x)


def test_duration_must_be_multiple_of_sim_step(params):
    world = SimWorld(QuadState.hover().as_array(), params, SimConfig())
    with pytest.raises(ValueError):
        step_sim(world, np.zeros(4), 0.0012)


def test_config_validation():
    with pytest.raises(ValueError):
        DragConfig(linear=(-1.0, 0, 0))
    with pytest.raises(ValueError):
        NoiseConfig(force_std=-0.1)
    with pytest.raises(ValueError):
        SimConfig(sim_dt=0.0)


# --- closed loop ----------------------------------------------------------------------------


def test_disturbance_free_circle_tracks_tightly(params):
    traj = circle(TrajectorySpec("circle", 4.0, scale=5.0), params)
    res = run_closed_loop(traj, MpcProblem(params), SimConfig())
    assert not res.crashed
    assert res.rmse < 5e-3
    assert len(res.log) == len(traj) + 1
    assert np.abs(res.residuals(params).a_e_B).max() < 1e-6


def test_crash_ends_rollout_with_partial_log(params):
    traj = hover_reference([0.0, 0.0, 0.0], 2.0, params)
    x0 = traj.x_ref[0].copy()
    x0[0] = 1.0
    res = run_closed_loop(traj, MpcProblem(params), SimConfig(crash_distance=0.9), x0=x0)
    assert res.crashed and "position error" in res.crash_reason
    assert res.pos_err.size == len(res.log) == 0


def test_control_rate_must_match_reference(params):
    traj = hover_reference([0.0, 0.0, 0.0], 1.0, params, sample_dt=0.02)
    with pytest.raises(ValueError):
        run_closed_loop(traj, MpcProblem(params), SimConfig(), control_dt=0.01)


# --- speed bins and results table -----------------------------------------------------------


def _synthetic(speeds, errs):
    return RolloutResult("s", "m", 1.0, np.arange(len(speeds)) * 0.01, np.asarray(errs, float), np.asarray(speeds, float))


def test_single_bin_equals_global_rmse():
    r = _synthetic([1.0, 1.5, 1.9], [0.1, 0.2, 0.3])
    (_, _, rmse, n), = speed_binned_rmse(r, [0.0, 2.0])
    assert n == 3 and rmse == pytest.approx(r.rmse)


def test_empty_bin_is_absent_not_zero():
    bins = speed_binned_rmse(_synthetic([1.0], [0.1]), [0.0, 2.0, 4.0])
    assert bins[1][2] is None and bins[1][3] == 0


def test_known_per_bin_errors_recovered():
    speeds = [0.5, 1.5, 2.5, 3.5, 3.7]
    errs = [0.1, 0.3, 0.2, 0.6, 0.8]
    bins = speed_binned_rmse(_synthetic(speeds, errs), [0.0, 2.0, 4.0])
    assert bins[0][2] == pytest.approx(np.sqrt((0.01 + 0.09) / 2))
    assert bins[1][2] == pytest.approx(np.sqrt((0.04 + 0.36 + 0.64) / 3))


def test_results_rows_are_sorted(tmp_path):
    rs = [_synthetic([1.0], [0.1]) for _ in range(3)]
    for r, (sc, m, v) in zip(rs, [("lemniscate", "gp", 8.0), ("circle", "rdrv", 4.0), ("circle", "gp", 12.0)]):
        r.scenario, r.model, r.v_peak = sc, m, v
        r.telemetry = [(0, 0.0, 1.5, 0.0, 1, 1)]
    write_results(rs, tmp_path / "r.csv", timing=False)
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["scenario", "model", "v_peak", "rmse_m", "solve_time_ms_mean", "crashed"]
    assert [r[:3] for r in rows[1:]] == [["circle", "gp", "12"], ["circle", "rdrv", "4"], ["lemniscate", "gp", "8"]]
    assert all(r[4] == "nan" for r in rows[1:])


def test_noise_is_zero_mean(params):
    # drag off, per-step noise on, no per-rollout motor bias: one-step velocity residuals average out
    cfg = SimConfig(noise=NoiseConfig(0.1, 0.001, 0.02, 0.0), seed=21)
    world = SimWorld(QuadState.hover().as_array(), params, cfg)
    u = np.full(4, params.hover_thrust)
    n = 100_000
    xs = np.empty((n + 1, 13))
    xs[0] = world.x
    for k in range(n):
        step_sim(world, u, cfg.sim_dt)
        xs[k + 1] = world.x
    pred = xs[:-1] + rk4_increment(lambda s, uu: nominal_derivative(s, uu, params), xs[:-1], u, cfg.sim_dt)
    resid = (xs[1:, 7:10] - pred[:, 7:10]) / cfg.sim_dt
    assert np.all(np.abs(resid.mean(axis=0)) < 3 * resid.std(axis=0) / np.sqrt(n))
