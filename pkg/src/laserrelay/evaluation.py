"""Feasibility checks, objective metrics and stationarity diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .scenario import (
    PowerSchedule,
    Scenario,
    Trajectory,
    f_EE,
    f_PE,
    flying_energy,
    laser_efficiency,
    rate_source_to_uav,
    rate_uav_to_dest,
    received_laser_power,
)

DEFAULT_TOL = 1e-6


class InfeasiblePoint(ValueError):
    pass


@dataclass(frozen=True)
class FeasibilityReport:
    """Worst violation per constraint family, in native units."""

    mobility: float
    info_causality: float
    energy_under_floor: float
    energy_over_cap: float
    power_bounds: float
    rate_sum: float
    tol: float
    scales: dict

    @property
    def violations(self) -> dict:
        return {
            "mobility": self.mobility,
            "info_causality": self.info_causality,
            "energy_under_floor": self.energy_under_floor,
            "energy_over_cap": self.energy_over_cap,
            "power_bounds": self.power_bounds,
            "rate_sum": self.rate_sum,
        }

    @property
    def feasible(self) -> bool:
        return all(v <= self.tol * self.scales[k] for k, v in self.violations.items())

    def worst_relative(self) -> float:
        return max(v / self.scales[k] for k, v in self.violations.items())


@dataclass(frozen=True)
class SolutionMetrics:
    f_EE: float
    f_PE: float
    gamma: float
    weighted: float
    sum_rate: float
    final_battery: float
    battery: np.ndarray


def _prefix_info(traj: Trajectory, pw: PowerSchedule, sc: Scenario) -> np.ndarray:
    rs = rate_source_to_uav(pw.p_s, traj.waypoints, sc)
    rr = rate_uav_to_dest(pw.p_r, traj.waypoints, sc)
    # entry m-2 for m = 2..N: relayed through slot m minus received through slot m-1
    return np.cumsum(rr[1:]) - np.cumsum(rs[:-1])


def check_info_causality(traj: Trajectory, pw: PowerSchedule, sc: Scenario) -> float:
    """Largest amount (bps/Hz) relayed before it was received."""
    return float(max(np.max(_prefix_info(traj, pw, sc)), 0.0))


def battery_trace(traj: Trajectory, pw: PowerSchedule, sc: Scenario, variant: str = "clamped") -> np.ndarray:
    """Battery level after each slot, without the physical clamp at the capacity.

    ``variant`` selects the receive-power model: ``"clamped"`` (non-negative,
    zero below activation) or ``"affine"`` (raw receiver fit in every slot).
    """
    v = traj.velocities(sc.delta_t)
    if variant == "clamped":
        pr = received_laser_power(pw.P_s, traj.waypoints, sc, clamp=True)
    elif variant == "affine":
        lp = sc.laser
        eta = laser_efficiency(traj.waypoints, sc)
        pr = lp.a1 * lp.a2 * eta * pw.P_s + lp.a2 * lp.b1 * eta + lp.b2
    else:
        raise ValueError(f"unknown battery variant {variant!r}")
    return sc.energy_budget_E + np.cumsum(pr * sc.delta_t - flying_energy(v, sc))


def check_energy_causality(traj: Trajectory, pw: PowerSchedule, sc: Scenario,
                           variant: str = "clamped") -> tuple[float, float]:
    """(max under-floor, max over-cap) battery violation in joules."""
    b = battery_trace(traj, pw, sc, variant)
    under = float(max(np.max(sc.energy_floor_theta - b), 0.0))
    over = float(max(np.max(b - sc.energy_budget_E), 0.0))
    return under, over


def check_mobility(traj: Trajectory, sc: Scenario) -> float:
    """Max of the endpoint mismatches (m) and the speed excess (m/s)."""
    q = traj.waypoints
    start = float(np.linalg.norm(q[0] - sc.qI))
    end = float(np.linalg.norm(q[-1] - sc.qF))
    excess = float(max(np.max(traj.speeds(sc.delta_t)) - sc.v_max, 0.0))
    return max(start, end, excess)


def check_power_bounds(pw: PowerSchedule, sc: Scenario) -> float:
    viol = [
        np.maximum(-pw.p_s, 0), np.maximum(pw.p_s - sc.p_max_s, 0),
        np.maximum(-pw.p_r, 0), np.maximum(pw.p_r - sc.p_max_r, 0),
        np.maximum(sc.P_min_s - pw.P_s, 0), np.maximum(pw.P_s - sc.P_max_s, 0),
        np.abs([pw.p_s[-1], pw.p_r[0]]),
    ]
    return float(max(np.max(v) for v in viol))


def check_rate_sum(traj: Trajectory, pw: PowerSchedule, sc: Scenario) -> float:
    rr = rate_uav_to_dest(pw.p_r, traj.waypoints, sc)
    return float(max(sc.R_sum - np.sum(rr[1:]), 0.0))


def family_scales(sc: Scenario) -> dict:
    return {
        "mobility": max(1.0, sc.v_max),
        "info_causality": max(1.0, sc.R_sum),
        "energy_under_floor": sc.energy_budget_E,
        "energy_over_cap": sc.energy_budget_E,
        "power_bounds": max(1.0, sc.P_max_s),
        "rate_sum": max(1.0, sc.R_sum),
    }


def check_feasibility(traj: Trajectory, pw: PowerSchedule, sc: Scenario,
                      tol: float = DEFAULT_TOL) -> FeasibilityReport:
    if traj.N != sc.N or pw.N != sc.N:
        raise ValueError(f"schedules must have length N = {sc.N}")
    under, over = check_energy_causality(traj, pw, sc)
    return FeasibilityReport(
        mobility=check_mobility(traj, sc),
        info_causality=check_info_causality(traj, pw, sc),
        energy_under_floor=under,
        energy_over_cap=over,
        power_bounds=check_power_bounds(pw, sc),
        rate_sum=check_rate_sum(traj, pw, sc),
        tol=tol,
        scales=family_scales(sc),
    )


def objective(traj: Trajectory, pw: PowerSchedule, sc: Scenario, gamma: float | None = None) -> SolutionMetrics:
    gamma = sc.gamma_weight if gamma is None else gamma
    ee = f_EE(traj, pw, sc)
    pe = f_PE(traj, pw, sc)
    rr = rate_uav_to_dest(pw.p_r, traj.waypoints, sc)
    battery = battery_trace(traj, pw, sc)
    return SolutionMetrics(
        f_EE=ee, f_PE=pe, gamma=gamma, weighted=ee + gamma * pe,
        sum_rate=float(np.sum(rr[1:])), final_battery=float(battery[-1]), battery=battery,
    )


# --- stationarity -------------------------------------------------------------

_LQ = 100.0


def _pack(traj: Trajectory, pw: PowerSchedule, sc: Scenario) -> np.ndarray:
    return np.concatenate([traj.waypoints.ravel() / _LQ, pw.p_s / sc.p_max_s,
                           pw.p_r / sc.p_max_r, pw.P_s / sc.P_max_s])


def _unpack(x: np.ndarray, sc: Scenario):
    N = sc.N
    q = x[: 2 * N].reshape(N, 2) * _LQ
    ps = x[2 * N:3 * N] * sc.p_max_s
    pr = x[3 * N:4 * N] * sc.p_max_r
    P = x[4 * N:5 * N] * sc.P_max_s
    return q, ps, pr, P


def _smooth_objective(x, sc: Scenario, gamma: float) -> float:
    # receiver fit on its active branch, no threshold: differentiable everywhere
    q, ps, pr, P = _unpack(x, sc)
    lp = sc.laser
    rr = rate_uav_to_dest(pr, q, sc)
    den = sc.upsilon_s * np.sum(ps[:-1]) + sc.upsilon_r * np.sum(pr[1:]) + sc.N * sc.P_on
    eta = laser_efficiency(q, sc)
    recv = lp.a1 * lp.a2 * eta * P + lp.a2 * lp.b1 * eta + lp.b2
    return float(np.sum(rr[1:]) / den + gamma * np.sum(recv) / np.sum(P))


def _inequalities(x, sc: Scenario) -> np.ndarray:
    """All inequality constraints as g(x) <= 0, each divided by its scale."""
    q, ps, pr, P = _unpack(x, sc)
    lp = sc.laser
    dt = sc.delta_t
    step = np.sum(np.diff(q, axis=0) ** 2, axis=1) / (sc.v_max * dt) ** 2 - 1.0
    rs = rate_source_to_uav(ps, q, sc)
    rr = rate_uav_to_dest(pr, q, sc)
    info = (np.cumsum(rr[1:]) - np.cumsum(rs[:-1])) / max(1.0, sc.R_sum)
    eta = laser_efficiency(q, sc)
    recv = lp.a1 * lp.a2 * eta * P + lp.a2 * lp.b1 * eta + lp.b2
    v2 = np.zeros(sc.N)
    v2[:-1] = np.sum(np.diff(q, axis=0) ** 2, axis=1) / dt ** 2
    bat = sc.energy_budget_E + np.cumsum(recv * dt - sc.omega * v2)
    E = sc.energy_budget_E
    return np.concatenate([
        step,
        info,
        (sc.energy_floor_theta - bat) / E,
        (bat - E) / E,
        [(sc.R_sum - np.sum(rr[1:])) / max(1.0, sc.R_sum)],
        -ps[:-1] / sc.p_max_s, ps[:-1] / sc.p_max_s - 1,
        -pr[1:] / sc.p_max_r, pr[1:] / sc.p_max_r - 1,
        (sc.P_min_s - P) / sc.P_max_s, P / sc.P_max_s - 1,
    ])


def _fd_step(x):
    return 1e-5 * (1.0 + np.abs(x))


def _fd_grad(f, x, free):
    h = _fd_step(x)
    g = np.zeros(x.size)
    for i in free:
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        g[i] = (f(xp) - f(xm)) / (2 * h[i])
    return g


def _fd_jac(F, x, free, rows):
    h = _fd_step(x)
    J = np.zeros((rows.size, x.size))
    for i in free:
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        J[:, i] = (F(xp)[rows] - F(xm)[rows]) / (2 * h[i])
    return J


def stationarity_residual(traj: Trajectory, pw: PowerSchedule, sc: Scenario, gamma: float | None = None,
                          tol: float = DEFAULT_TOL, active_tol: float = 1e-4) -> float:
    """Relative KKT residual of the weighted objective at a feasible point.

    Works in scaled variables (positions in hectometres, powers over their
    caps).  Endpoint waypoints and the silent power slots are fixed; every
    inequality within ``active_tol`` of its bound is treated as active and
    the objective gradient is projected onto the cone they generate by
    non-negative least squares.  Returns ``||residual|| / ||grad||``.
    """
    gamma = sc.gamma_weight if gamma is None else gamma
    rep = check_feasibility(traj, pw, sc, tol)
    if not rep.feasible:
        raise InfeasiblePoint(f"point violates constraints: {rep.violations}")
    N = sc.N
    x = _pack(traj, pw, sc)
    fixed = {0, 1, 2 * N - 2, 2 * N - 1, 2 * N + N - 1, 3 * N}
    free = np.array([i for i in range(x.size) if i not in fixed])
    grad = _fd_grad(lambda z: _smooth_objective(z, sc, gamma), x, free)
    g = _inequalities(x, sc)
    active = np.where(g >= -active_tol)[0]
    gf = grad[free]
    scale = float(np.linalg.norm(gf))
    if active.size == 0:
        res = gf
    else:
        J = _fd_jac(lambda z: _inequalities(z, sc), x, free, active)[:, free]
        mu, _ = nnls(J.T, gf, maxiter=50 * max(J.shape))
        res = gf - J.T @ mu
    r = float(np.linalg.norm(res))
    return r / scale if scale > 1e-12 else r
