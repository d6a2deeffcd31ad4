"""
Benchmark harness: ``collect``, ``fit``, ``evaluate``, ``tradeoff`` and ``replay``.

Typical pipeline::

    gpmpc collect  --config cfg.yaml --out results
    gpmpc fit      --config cfg.yaml --out results
    gpmpc evaluate --config cfg.yaml --out results --jobs 4
    gpmpc tradeoff --config cfg.yaml --out results

Errors end the process with a nonzero exit code and one JSON line on stderr,
``{"error": <category>, "message": ...}``; see :data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from gpmpc.augmentation import (
    fit_gp_correction,
    fit_gp_hyperparams,
    fit_rdrv,
    load_model,
    prediction_rmse,
    save_model,
)
from gpmpc.config import ConfigError, ExperimentConfig
from gpmpc.dataset import DatasetParseError, ResidualDataset, load_dataset, save_dataset
from gpmpc.sim import RESULTS_HEADER, run_closed_loop, speed_binned_rmse, write_results
from gpmpc.trajectories import InfeasibleTrajectoryError, ReferenceTrajectory, generate, random_polynomial

log = logging.getLogger("gpmpc")

EXIT_CODES = {"ok": 0, "usage": 2, "config": 3, "input": 4, "trajectory": 5, "internal": 1}

# stage tags mixed into the seed sequence so each stage has its own RNG streams
_STAGE_COLLECT = 1
_STAGE_EVALUATE = 2
_STAGE_TRADEOFF = 3


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.9g}" if isinstance(v, float) else str(v)


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks))


# --- collect -------------------------------------------------------------------------------


def _collect_one(task):
    cfg, k = task
    seed = _derive_seed(cfg.seed, _STAGE_COLLECT, k)
    traj = random_polynomial(cfg.collect_spec(seed), cfg.params)
    res = run_closed_loop(traj, cfg.problem(None), cfg.sim.with_seed(seed), cfg.control_dt,
                          scenario=f"random_{k}", timing=cfg.timing)
    return k, seed, res.residuals(cfg.params), res.rmse, res.max_speed, res.crashed


def cmd_collect(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> ResidualDataset:
    """Nominal-MPC rollouts on seeded random polynomials -> residual dataset CSVs."""
    (out / "datasets").mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, k) for k in range(int(cfg.raw["collect"]["n_trajectories"]))]
    parts, summary = [], []
    for k, seed, ds, rmse, vmax, crashed in _map(_collect_one, tasks, jobs):
        save_dataset(ds, out / "datasets" / f"collect_{k:02d}.csv")
        parts.append(ds)
        summary.append([k, seed, len(ds), _fmt(rmse), _fmt(vmax), int(crashed)])
        print(f"collect {k}: {len(ds)} rows, nominal RMSE {rmse:.4f} m, max speed {vmax:.1f} m/s"
              + (" (crashed)" if crashed else ""))
    ds = ResidualDataset.concatenate(parts)
    save_dataset(ds, out / "dataset.csv")
    _write_csv(out / "collect_summary.csv", ["index", "seed", "rows", "rmse_m", "max_speed", "crashed"], summary)
    lo, hi = ds.v_B.min(axis=0), ds.v_B.max(axis=0)
    print(f"dataset: {len(ds)} rows, body velocity range x [{lo[0]:.1f}, {hi[0]:.1f}] "
          f"y [{lo[1]:.1f}, {hi[1]:.1f}] z [{lo[2]:.1f}, {hi[2]:.1f}] m/s -> {out / 'dataset.csv'}")
    return ds


# --- fit -----------------------------------------------------------------------------------


def split_holdout(ds: ResidualDataset, fraction: float, seed: int):
    """Seeded random train/held-out row split."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_hold = max(1, int(round(fraction * len(ds))))
    hold, train = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
    return ds.subset(train), ds.subset(hold)


def _load_dataset(path: Path) -> ResidualDataset:
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise CliError("input", f"dataset not found: {path} (run `collect` first or pass --dataset)") from None
    except DatasetParseError as exc:
        raise CliError("input", str(exc)) from None


def cmd_fit(cfg: ExperimentConfig, out: Path, dataset_path: Path | None = None):
    """RDRv and per-axis GPs on the training split; prints held-out prediction RMSE."""
    ds = _load_dataset(dataset_path or out / "dataset.csv")
    fc = cfg.raw["fit"]
    train, held = split_holdout(ds, float(fc["holdout_fraction"]), cfg.seed)
    if len(train) < 2:
        raise CliError("input", f"dataset has {len(ds)} rows; need at least 3 to fit and hold out")
    rdrv = fit_rdrv(train)
    gpc = fit_gp_correction(train, int(fc["n_points"]), int(fc["budget"]), int(fc["hyper_rows"]))
    (out / "models").mkdir(parents=True, exist_ok=True)
    save_model(rdrv, out / "models" / "rdrv.json")
    save_model(gpc, out / "models" / "gp.json")
    rows = []
    for name, model, n_pts in (("nominal", None, 0), ("rdrv", rdrv, 0), ("gp", gpc, gpc.n_points)):
        rmse = prediction_rmse(model, held)
        rows.append([name, n_pts, _fmt(rmse), len(train), len(held)])
        print(f"{name:8s} held-out prediction RMSE {rmse:.4f} m/s^2")
    _write_csv(out / "fit_metrics.csv", ["model", "n_points", "heldout_rmse", "train_rows", "heldout_rows"], rows)
    print(f"RDRv D = ({', '.join(f'{d:.4f}' for d in rdrv.D)}) 1/s; models -> {out / 'models'}")
    return rdrv, gpc


# --- evaluate ------------------------------------------------------------------------------


def _load_models(cfg: ExperimentConfig, models_dir: Path) -> dict:
    models = {"ideal": None, "nominal": None}
    for name in ("rdrv", "gp"):
        if name in cfg.raw["evaluate"]["roster"]:
            path = models_dir / f"{name}.json"
            try:
                models[name] = load_model(path)
            except FileNotFoundError:
                raise CliError("input", f"model file not found: {path} (run `fit` first)") from None
            except (ValueError, KeyError) as exc:
                raise CliError("input", f"{path}: {exc}") from None
    return models


def evaluate_cell(task):
    """One closed-loop rollout of the evaluation matrix (a task from :func:`evaluation_tasks`)."""
    cfg, name, model, spec, ti, si = task
    seed = _derive_seed(cfg.seed, _STAGE_EVALUATE, ti, si)
    sim = (cfg.ideal_sim if name == "ideal" else cfg.sim).with_seed(seed)
    traj = generate(spec, cfg.params)
    res = run_closed_loop(traj, cfg.problem(model), sim, cfg.control_dt, scenario=spec.kind,
                          v_peak=spec.v_peak, timing=cfg.timing)
    res.model = name
    res.log = []  # not needed downstream; keeps inter-process traffic small
    return res


def evaluation_tasks(cfg: ExperimentConfig, models: dict) -> list:
    tasks = []
    for si, v in enumerate(cfg.raw["evaluate"]["speeds"]):
        for ti, spec in enumerate(cfg.eval_specs(v)):
            for name in cfg.raw["evaluate"]["roster"]:
                tasks.append((cfg, name, models[name], spec, ti, si))
    return tasks


def cmd_evaluate(cfg: ExperimentConfig, out: Path, jobs: int = 1, models_dir: Path | None = None):
    """Closed-loop matrix {trajectory x v_peak x model}; writes results, improvement and bin tables."""
    models = _load_models(cfg, models_dir or out / "models")
    tasks = evaluation_tasks(cfg, models)
    for _, _, _, spec, _, _ in tasks:
        try:
            generate(spec, cfg.params)
        except InfeasibleTrajectoryError as exc:
            raise CliError("trajectory", f"{spec.kind} at {spec.v_peak} m/s: {exc}") from None
    results = _map(evaluate_cell, tasks, jobs)
    out.mkdir(parents=True, exist_ok=True)
    write_results(results, out / "results.csv", timing=cfg.timing)
    write_improvement(results, out / "improvement.csv")
    edges = cfg.raw["evaluate"]["speed_bins"]
    bins = []
    for r in sorted(results, key=lambda r: (r.scenario, r.model, r.v_peak)):
        for lo, hi, rmse, n in speed_binned_rmse(r, edges):
            bins.append([r.scenario, r.model, _fmt(r.v_peak), _fmt(lo), _fmt(hi), _fmt(rmse), n])
    _write_csv(out / "speed_bins.csv", ["scenario", "model", "v_peak", "bin_lo", "bin_hi", "rmse_m", "count"], bins)
    telemetry = []
    for r in sorted(results, key=lambda r: (r.scenario, r.model, r.v_peak)):
        for row in r.telemetry:
            telemetry.append([r.scenario, r.model, _fmt(r.v_peak), *map(_fmt, row)])
    _write_csv(out / "telemetry.csv", ["scenario", "model", "v_peak", "tick", "t", "solve_time_ms",
                                       "kkt_residual", "sqp_iters", "qp_iters"], telemetry)
    _print_results(results)
    return results


def improvement_rows(results) -> list:
    nominal = {(r.scenario, r.v_peak): r.rmse for r in results if r.model == "nominal"}
    rows = []
    for r in sorted(results, key=lambda r: (r.scenario, r.v_peak, r.model)):
        base = nominal.get((r.scenario, r.v_peak))
        imp = None if base is None or r.crashed else 100.0 * (1.0 - r.rmse / base)
        rows.append([r.scenario, _fmt(r.v_peak), r.model, _fmt(r.rmse), _fmt(imp), int(r.crashed)])
    return rows


def write_improvement(results, path: Path) -> None:
    _write_csv(path, ["scenario", "v_peak", "model", "rmse_m", "improvement_pct", "crashed"],
               improvement_rows(results))


def _print_results(results) -> None:
    print(f"{'scenario':11s} {'v_peak':>6s} {'model':8s} {'rmse [mm]':>10s} {'vs nominal':>10s} {'solve [ms]':>10s}")
    for sc, v, model, rmse, imp, crashed in improvement_rows(results):
        r = next(x for x in results if x.scenario == sc and x.model == model and _fmt(x.v_peak) == v)
        imp_s = "crash" if crashed else ("" if imp == "" else f"{float(imp):.1f}%")
        print(f"{sc:11s} {v:>6s} {model:8s} {1e3 * float(rmse):10.1f} {imp_s:>10s} {r.solve_time_ms_mean:10.2f}")


# --- tradeoff ------------------------------------------------------------------------------


def _tradeoff_rollout(task):
    cfg, model, seed = task
    traj = generate(cfg.tradeoff_spec(), cfg.params)
    res = run_closed_loop(traj, cfg.problem(model), cfg.sim.with_seed(seed), cfg.control_dt,
                          scenario="tradeoff", timing=True)
    return res.rmse, res.solve_times


def cmd_tradeoff(cfg: ExperimentConfig, out: Path, dataset_path: Path | None = None):
    """GP size sweep: held-out prediction RMSE and mean MPC solve time per n_points.

    Rollouts run sequentially, each GP size next to a Nominal rollout on the
    same reference and noise stream, so the two solve-time columns share
    machine conditions. Solve times are always measured here.
    """
    ds = _load_dataset(dataset_path or out / "dataset.csv")
    fc = cfg.raw["fit"]
    train, held = split_holdout(ds, float(fc["holdout_fraction"]), cfg.seed)
    hypers = fit_gp_hyperparams(train, int(fc["budget"]), int(fc["hyper_rows"]))
    seed = _derive_seed(cfg.seed, _STAGE_TRADEOFF)
    rows = []
    header = ["n_points", "heldout_rmse", "gp_solve_time_ms_mean", "gp_solve_time_ms_p95",
              "nominal_solve_time_ms_mean", "gp_rmse_m", "nominal_rmse_m"]
    print(" ".join(f"{h:>14s}" for h in header))
    for n in cfg.raw["tradeoff"]["n_points"]:
        gpc = fit_gp_correction(train, int(n), hypers=hypers)
        pred = prediction_rmse(gpc, held)
        gp_rmse, gp_times = _tradeoff_rollout((cfg, gpc, seed))
        nom_rmse, nom_times = _tradeoff_rollout((cfg, None, seed))
        row = [int(n), pred, float(np.mean(gp_times)), float(np.percentile(gp_times, 95)),
               float(np.mean(nom_times)), gp_rmse, nom_rmse]
        rows.append(row)
        print(" ".join(f"{v:14.6g}" for v in row))
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "tradeoff.csv", header, [[_fmt(v) for v in r] for r in rows])
    return rows


# --- replay --------------------------------------------------------------------------------


def cmd_replay(cfg: ExperimentConfig, out: Path, trajectory: Path, model_path: Path | None = None,
               ideal: bool = False):
    """Closed loop on a reference trajectory CSV; writes its results row and full residual log."""
    try:
        traj = ReferenceTrajectory.from_csv(trajectory, name=Path(trajectory).stem)
    except (OSError, ValueError) as exc:
        raise CliError("input", f"cannot read trajectory {trajectory}: {exc}") from None
    if len(traj) < 2 or abs(traj.dt - cfg.control_dt) > 1e-9:
        raise CliError("input", f"{trajectory}: sample spacing must equal control_dt={cfg.control_dt}")
    model = None
    if model_path is not None:
        try:
            model = load_model(model_path)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError("input", f"cannot load model {model_path}: {exc}") from None
    sim = (cfg.ideal_sim if ideal else cfg.sim).with_seed(_derive_seed(cfg.seed, _STAGE_EVALUATE))
    res = run_closed_loop(traj, cfg.problem(model), sim, cfg.control_dt, scenario=traj.name,
                          v_peak=float(traj.speed.max()), timing=cfg.timing)
    if ideal:
        res.model = "ideal"
    out.mkdir(parents=True, exist_ok=True)
    write_results([res], out / f"replay_{traj.name}.csv", timing=cfg.timing)
    save_dataset(res.residuals(cfg.params), out / f"replay_{traj.name}_log.csv")
    print(f"{traj.name}: model {res.model}, RMSE {1e3 * res.rmse:.1f} mm, max speed {res.max_speed:.1f} m/s"
          + (f", crashed ({res.crash_reason})" if res.crashed else ""))
    return res


# --- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory (overrides config 'out')")
    common.add_argument("--jobs", type=int, default=1, help="parallel rollouts (processes)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gpmpc", description=__doc__.split("\n\n")[0].strip())
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("collect", parents=[common], help="random-polynomial rollouts -> residual dataset")
    fp = sub.add_parser("fit", parents=[common], help="fit RDRv and GP models")
    fp.add_argument("--dataset", type=Path)
    ep = sub.add_parser("evaluate", parents=[common], help="closed-loop evaluation matrix")
    ep.add_argument("--models", type=Path, help="directory with rdrv.json and gp.json")
    tp = sub.add_parser("tradeoff", parents=[common], help="GP size vs prediction RMSE and solve time")
    tp.add_argument("--dataset", type=Path)
    rp = sub.add_parser("replay", parents=[common], help="closed loop on a reference trajectory CSV")
    rp.add_argument("--trajectory", type=Path, required=True)
    rp.add_argument("--model", type=Path, help="model file (nominal MPC if omitted)")
    rp.add_argument("--ideal", action="store_true", help="disturbance-free simulator")
    return p


def _fail(category: str, message: str) -> int:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return EXIT_CODES[category]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {"seed": args.seed} if args.seed is not None else None
        cfg = ExperimentConfig.load(args.config, overrides)
        out = args.out or Path(cfg.raw["out"])
        jobs = max(1, args.jobs or os.cpu_count() or 1)
        if args.command == "collect":
            cmd_collect(cfg, out, jobs)
        elif args.command == "fit":
            cmd_fit(cfg, out, args.dataset)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, out, jobs, args.models)
        elif args.command == "tradeoff":
            cmd_tradeoff(cfg, out, args.dataset)
        elif args.command == "replay":
            cmd_replay(cfg, out, args.trajectory, args.model, args.ideal)
    except ConfigError as exc:
        return _fail("config", str(exc))
    except CliError as exc:
        return _fail(exc.category, str(exc))
    except InfeasibleTrajectoryError as exc:
        return _fail("trajectory", str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort categorization for the exit code
        log.debug("unhandled error", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}")
    return 0


__all__ = ["main", "cmd_collect", "cmd_fit", "cmd_evaluate", "cmd_tradeoff", "cmd_replay",
           "RESULTS_HEADER", "EXIT_CODES", "split_holdout",
           "evaluation_tasks", "evaluate_cell"]
