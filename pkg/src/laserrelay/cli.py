"""Command-line experiment runner.

Runs the requested solvers for every (horizon, gamma) pair and writes, per
run, ``<solver>_<gamma>_<tag>.{trajectory,power,convergence}.csv`` plus a
``.summary.json`` record.  A sweep-level ``summary.csv`` collects one row per
run.  Exit codes: 0 success, 1 config error, 2 solver failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ao, cccp, pdd
from .config import SOLVERS, ConfigError, ExperimentConfig, load_config
from .evaluation import check_feasibility
from .scenario import PowerSchedule, Scenario, Trajectory, received_laser_power

log = logging.getLogger("laserrelay")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 1, 2, 3

TRAJECTORY_COLUMNS = ("slot", "x", "y", "speed")
POWER_COLUMNS = ("slot", "p_s", "p_r", "P_s", "P_r", "battery")
SUMMARY_COLUMNS = ("solver", "gamma", "tag", "status", "f_EE", "f_PE", "weighted",
                   "iterations", "wall_time_s", "feasible")


@dataclass
class RunArtifacts:
    solver: str
    gamma: float
    tag: str
    trajectory: list = field(default_factory=list)
    power: list = field(default_factory=list)
    convergence_columns: tuple = ()
    convergence: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def stem(self) -> str:
        return f"{self.solver}_{self.gamma:g}_{self.tag}"


def initial_trajectory(sc: Scenario, seed: int, scale: float) -> Trajectory:
    """Straight line, optionally with Gaussian jitter (metres) on the interior waypoints."""
    traj = Trajectory.straight_line(sc)
    if scale > 0:
        rng = np.random.default_rng(seed)
        q = traj.waypoints.copy()
        q[1:-1] += scale * rng.standard_normal(q[1:-1].shape)
        traj = Trajectory(q)
    return traj


def _tables(traj: Trajectory, pw: PowerSchedule, sc: Scenario, battery: np.ndarray):
    q = traj.waypoints
    speed = traj.speeds(sc.delta_t)
    P_r = received_laser_power(pw.P_s, q, sc, clamp=True)
    trajectory = [(n + 1, float(q[n, 0]), float(q[n, 1]), float(speed[n])) for n in range(sc.N)]
    power = [(n + 1, float(pw.p_s[n]), float(pw.p_r[n]), float(pw.P_s[n]), float(P_r[n]),
              float(battery[n])) for n in range(sc.N)]
    return trajectory, power


def _options(cfg: ExperimentConfig):
    copts, popts, aopts = cccp.CccpOptions(), pdd.PddOptions(), ao.AoOptions()
    if cfg.tol is not None:
        copts = replace(copts, tol=cfg.tol)
        popts = replace(popts, obj_tol=cfg.tol)
        aopts = replace(aopts, tol=cfg.tol)
    if cfg.max_iters is not None:
        copts = replace(copts, max_iters=cfg.max_iters)
        popts = replace(popts, max_outer=cfg.max_iters)
        aopts = replace(aopts, max_outer=cfg.max_iters)
    return copts, popts, replace(aopts, cccp=copts)


def run_one(solver: str, sc: Scenario, cfg: ExperimentConfig, tag: str, traj0: Trajectory) -> RunArtifacts:
    """Run one solver on one scenario; failures are recorded, not raised."""
    art = RunArtifacts(solver, sc.gamma_weight, tag)
    copts, popts, aopts = _options(cfg)
    t0 = time.perf_counter()
    try:
        if solver == "cccp":
            traj, pw, m, hist = cccp.solve(sc, copts, init=cccp.initialize(sc, copts, traj0))
            art.convergence_columns = ("iteration", "objective")
            art.convergence = [(k, float(v)) for k, v in enumerate(hist)]
            iters = len(hist) - 1
        elif solver == "ao":
            traj, pw, m, hist = ao.solve(sc, aopts, init=cccp.initialize(sc, copts, traj0))
            art.convergence_columns = ("iteration", "objective")
            art.convergence = [(k, float(v)) for k, v in enumerate(hist)]
            iters = len(hist) - 1
        elif solver == "pdd":
            traj, pw, m, trace = pdd.solve(sc, popts, init=pdd.initialize(sc, popts, traj0))
            art.convergence_columns = ("iteration", "inner_total", "objective", "violation", "rho")
            art.convergence = [(r.outer, r.inner_total, float(r.objective), float(r.violation), float(r.rho))
                               for r in trace.records]
            iters = trace.total_inner
        else:
            raise ValueError(f"unknown solver {solver!r}")
    except Exception as exc:  # recorded in the summary; the sweep goes on
        log.error("%s failed for gamma=%g (%s): %s", solver, sc.gamma_weight, tag, exc)
        art.summary = {"solver": solver, "gamma": sc.gamma_weight, "tag": tag, "status": "failed",
                       "error": f"{type(exc).__name__}: {exc}"}
        return art
    wall = time.perf_counter() - t0
    rep = check_feasibility(traj, pw, sc)
    art.trajectory, art.power = _tables(traj, pw, sc, m.battery)
    art.summary = {
        "solver": solver, "gamma": sc.gamma_weight, "tag": tag, "status": "ok",
        "N": sc.N, "T_total": sc.T_total,
        "f_EE": m.f_EE, "f_PE": m.f_PE, "weighted": m.weighted, "iterations": iters,
        "wall_time_s": wall if cfg.record_time else None,
        "feasible": rep.feasible, "violations": rep.violations,
    }
    return art


def run(cfg: ExperimentConfig, progress=None) -> list:
    """Every solver for every (horizon, gamma); returns the artifacts in sweep order."""
    out = []
    for tag, base in cfg.scenarios():
        traj0 = initial_trajectory(base, cfg.seed, cfg.perturb)
        for g in cfg.gammas:
            sc = base.with_(gamma_weight=float(g))
            for solver in cfg.solvers:
                art = run_one(solver, sc, cfg, tag, traj0)
                if progress is not None:
                    progress(art)
                out.append(art)
    return out


def _write_csv(path: Path, columns, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def emit(artifacts: list, directory: str | Path) -> list:
    """Write every run's tables and summaries; returns the written paths."""
    d = Path(directory)
    written = []
    try:
        d.mkdir(parents=True, exist_ok=True)
        for art in artifacts:
            if art.summary.get("status") == "ok":
                for name, cols, rows in (("trajectory", TRAJECTORY_COLUMNS, art.trajectory),
                                         ("power", POWER_COLUMNS, art.power),
                                         ("convergence", art.convergence_columns, art.convergence)):
                    p = d / f"{art.stem}.{name}.csv"
                    _write_csv(p, cols, rows)
                    written.append(p)
            p = d / f"{art.stem}.summary.json"
            p.write_text(json.dumps(art.summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            written.append(p)
        p = d / "summary.csv"
        _write_csv(p, SUMMARY_COLUMNS, [tuple(a.summary.get(c) for c in SUMMARY_COLUMNS) for a in artifacts])
        written.append(p)
    except OSError as exc:
        raise OSError(f"cannot write results to {exc.filename or d}: {exc.strerror or exc}") from exc
    return written


def read_table(path: str | Path) -> tuple:
    """(columns, float array) from an emitted table."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return tuple(rows[0]), np.array([[float(x) for x in r] for r in rows[1:]], dtype=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="laserrelay", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="key = value experiment file (defaults: nominal scenario)")
    ap.add_argument("--solver", help=f"one of {', '.join(SOLVERS + ('all',))}, or a comma list")
    ap.add_argument("--gamma", help="weight(s) on power-transfer efficiency, e.g. 1,100,1000")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--seed", help="seed for the perturbed initial trajectory")
    ap.add_argument("--tol", help="relative objective-change tolerance")
    ap.add_argument("--max-iters", dest="max_iters", help="outer iteration cap")
    ap.add_argument("--wavelength", dest="wavelength_nm", help="laser preset in nm (810 or 1550)")
    ap.add_argument("--weather", help="ClearAir, Haze or Fog")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items()
                 if v is not None and k not in ("config", "verbose")}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    def progress(art):
        s = art.summary
        if s["status"] == "ok":
            print(f"{art.stem}: objective {s['weighted']:.6g} (f_EE {s['f_EE']:.6g}, f_PE {s['f_PE']:.6g}), "
                  f"{s['iterations']} iterations, feasible={s['feasible']}")
        else:
            print(f"{art.stem}: FAILED {s['error']}")

    try:
        arts = run(cfg, progress)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        emit(arts, cfg.out_dir)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_SOLVER if any(a.summary["status"] != "ok" for a in arts) else EXIT_OK
