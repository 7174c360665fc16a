"""Convex-concave procedure for joint power and trajectory design.

Each iteration linearizes the concave parts of the transformed problem at the
current point and solves the resulting SOCP.  Internally the problem is posed
in scaled units so the conic solver sees O(1) data:

* positions in hectometres,
* communication powers divided by their caps, SNR divided by the matching
  channel gain at 100 m (so ``s * d <= p`` with ``d`` in hm^2),
* beacon power and received laser power divided by ``P_max_s``,
* energies in kJ.

Between iterations the point is tightened: auxiliary variables are recomputed
from (q, p, P) and powers that the subproblem left slack are trimmed.  This
never lowers the objective and keeps every iterate feasible.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import socp
from .evaluation import check_feasibility, objective
from .scenario import PowerSchedule, Scenario, Trajectory

log = logging.getLogger(__name__)

LQ = 100.0
LN2 = math.log(2.0)


class CccpError(RuntimeError):
    pass


class SubproblemError(CccpError):
    """The convex subproblem did not solve to a usable point."""

    def __init__(self, msg, status=None, residuals=None):
        super().__init__(msg)
        self.status = status
        self.residuals = residuals


class InitializationError(CccpError):
    pass


@dataclass
class CccpOptions:
    tol: float = 1e-5
    patience: int = 3
    max_iters: int = 500
    restore_iters: int = 20
    socp_tol: float = 1e-8
    socp_max_iters: int = 100
    feas_tol: float = 1e-6
    gamma: float | None = None


@dataclass
class CccpState:
    """Current iterate in physical units, with tight auxiliary variables."""

    q: np.ndarray
    p_s: np.ndarray
    p_r: np.ndarray
    P_s: np.ndarray
    s_s: np.ndarray          # SNR source->UAV, slots 1..N-1
    s_r: np.ndarray          # SNR UAV->dest, slots 2..N
    d_S: np.ndarray          # squared 3D distances (m^2), slots 1..N-1
    d_D: np.ndarray          # slots 2..N
    t: np.ndarray            # laser efficiency
    t_hat: np.ndarray        # t * P_s (W)
    R_tilde: float
    p_tilde: float
    E_i: float
    E_e: float
    P_tilde: float
    t_tilde: float
    iteration: int = 0
    history: list = field(default_factory=list)

    @property
    def trajectory(self) -> Trajectory:
        return Trajectory(self.q.copy())

    @property
    def powers(self) -> PowerSchedule:
        return PowerSchedule(self.p_s, self.p_r, self.P_s)

    def value(self, gamma: float) -> float:
        return self.E_i + gamma * self.E_e


def tight_state(q, p_s, p_r, P_s, sc: Scenario, iteration=0, history=None) -> CccpState:
    """State whose auxiliaries make every transformed constraint hold with equality."""
    q = np.asarray(q, dtype=float)
    lp = sc.laser
    H2 = sc.altitude_H ** 2
    dS = H2 + np.sum((q - sc.qS) ** 2, axis=1)
    dD = H2 + np.sum((q - sc.qD) ** 2, axis=1)
    s_s = p_s[:-1] * sc.gamma0 / dS[:-1]
    s_r = p_r[1:] * sc.gamma0 / dD[1:]
    t = np.exp(-sc.alpha * np.sqrt(H2 + np.sum((q - sc.qP) ** 2, axis=1)))
    t_hat = t * P_s
    R = float(np.sum(np.log2(1 + s_r)))
    den = float(sc.upsilon_s * np.sum(p_s[:-1]) + sc.upsilon_r * np.sum(p_r[1:]) + sc.N * sc.P_on)
    recv = lp.a1 * lp.a2 * t_hat + lp.a2 * lp.b1 * t + lp.b2
    t_til = float(np.sum(recv))
    P_til = float(np.sum(P_s))
    return CccpState(
        q=q.copy(), p_s=np.asarray(p_s, float).copy(), p_r=np.asarray(p_r, float).copy(),
        P_s=np.asarray(P_s, float).copy(), s_s=s_s, s_r=s_r, d_S=dS[:-1], d_D=dD[1:], t=t, t_hat=t_hat,
        R_tilde=R, p_tilde=den, E_i=R / den, E_e=t_til / P_til, P_tilde=P_til, t_tilde=t_til,
        iteration=iteration, history=list(history or []),
    )


# --- subproblem -----------------------------------------------------------------

@dataclass
class Subproblem:
    program: socp.ConicProgram
    idx: dict
    slack: bool


def build_subproblem(state: CccpState, sc: Scenario, gamma: float | None = None,
                     freeze: tuple = (), slack: bool = False) -> socp.ConicProgram:
    """The convexified problem at ``state`` as a :class:`socp.ConicProgram`."""
    return _build(state, sc, gamma, freeze, slack).program


def _minorant_floor(S0):
    return np.log2(1.0 + S0) - S0 / LN2 - 1.0


def _build(state: CccpState, sc: Scenario, gamma, freeze=(), slack=False) -> Subproblem:
    gamma = sc.gamma_weight if gamma is None else gamma
    N = sc.N
    lp = sc.laser
    Ht2 = (sc.altitude_H / LQ) ** 2
    qS, qD, qP = sc.qS / LQ, sc.qD / LQ, sc.qP / LQ
    gs = sc.p_max_s * sc.gamma0 / LQ ** 2
    gr = sc.p_max_r * sc.gamma0 / LQ ** 2
    Pm = sc.P_max_s
    a12, ab1, b2 = lp.a1 * lp.a2, lp.a2 * lp.b1 / Pm, lp.b2 / Pm
    at = sc.alpha * LQ
    V2 = (sc.v_max * sc.delta_t / LQ) ** 2
    kE = sc.omega * LQ ** 2 / sc.delta_t ** 2 / 1000.0
    cE = Pm * sc.delta_t / 1000.0
    budget = (sc.energy_budget_E - sc.energy_floor_theta) / 1000.0

    # linearization point in scaled units
    q0 = state.q / LQ
    ss0 = state.s_s / gs
    sr0 = state.s_r / gr
    dS0 = state.d_S / LQ ** 2
    dD0 = state.d_D / LQ ** 2
    t0 = state.t
    P0 = state.P_s / Pm
    pt0, Ei0 = state.p_tilde, state.E_i
    Pt0, Ee0 = state.P_tilde / Pm, state.E_e
    dq0 = np.diff(q0, axis=0)

    b = socp.ConicBuilder()
    q = b.add_var("q", 2 * N).reshape(N, 2)
    ps = b.add_var("ps", N, lb=0.0, ub=1.0)
    pr = b.add_var("pr", N, lb=0.0, ub=1.0)
    P = b.add_var("P", N, lb=sc.P_min_s / Pm, ub=1.0)
    ss = b.add_var("ss", N - 1, lb=0.0)
    sr = b.add_var("sr", N - 1, lb=0.0)
    dS = b.add_var("dS", N - 1, lb=Ht2)
    dD = b.add_var("dD", N - 1, lb=Ht2)
    # rate variables are bounded below by (minorant at s = 0) - 1, which never binds
    rs = b.add_var("rs", N - 1, lb=_minorant_floor(gs * ss0))
    rr = b.add_var("rr", N - 1, lb=_minorant_floor(gr * sr0))
    t = b.add_var("t", N, lb=0.0, ub=1.0)
    th = b.add_var("th", N, lb=0.0)
    w = b.add_var("w", N - 1, lb=0.0, ub=np.inf if slack else V2)
    Rt, pt, Ei, Ee, Pt, tt = (int(b.add_var(nm, 1, lb=0.0)[0])
                              for nm in ("Rt", "pt", "Ei", "Ee", "Pt", "tt"))
    b.fix(q[0], sc.qI / LQ)
    b.fix(q[-1], sc.qF / LQ)
    b.fix(ps[-1], 0.0)
    b.fix(pr[0], 0.0)
    if "powers" in freeze:
        b.fix(ps, state.p_s / sc.p_max_s)
        b.fix(pr, state.p_r / sc.p_max_r)
    if "beacon" in freeze:
        b.fix(P, P0)
    if "trajectory" in freeze:
        b.fix(q.ravel(), q0.ravel())

    slacks = []

    def slack_var(tag):
        if not slack:
            return {}
        v = int(b.add_var(f"slack_{tag}_{len(slacks)}", 1, lb=0.0)[0])
        slacks.append(v)
        return {v: -1.0}

    if slack:
        for n in range(N - 1):
            b.add_le({int(w[n]): 1.0, **slack_var("speed")}, V2, "mobility")

    # objective
    if slack:
        b.objective({v: -1.0 for v in slacks} if slacks else {})
    else:
        b.objective({Ei: 1.0, Ee: gamma})

    # rate minorants: u * (1 + g s) / (1 + s0) >= 1, u = 1 + ln2 (log2(1 + s0) - r)
    def rate_lower(r_var, s_var, g, s0, tag):
        S0 = g * s0
        u = ({r_var: -LN2}, 1.0 + LN2 * math.log2(1.0 + S0))
        y = ({s_var: g / (1.0 + S0)}, 1.0 / (1.0 + S0))
        b.add_rotated(u, y, [({}, 1.0)], tag)

    for n in range(N - 1):
        rate_lower(int(rs[n]), int(ss[n]), gs, ss0[n], "rate_s")
        rate_lower(int(rr[n]), int(sr[n]), gr, sr0[n], "rate_r")

    # squared distances (d >= H^2 + ||q - c||^2), source side for slots 1..N-1
    def sqdist(d_var, qn, c, tag):
        z = d_var
        rows = [({z: 1.0}, 1.0 - Ht2),
                ({int(qn[0]): 2.0}, -2.0 * c[0]),
                ({int(qn[1]): 2.0}, -2.0 * c[1]),
                ({z: 1.0}, -1.0 - Ht2)]
        b.add_soc(rows, tag)

    for n in range(N - 1):
        sqdist(int(dS[n]), q[n], qS, "dist_S")
        sqdist(int(dD[n]), q[n + 1], qD, "dist_D")

    # x y <= z via x y = (c x + y / c)^2 / 4 - (c x - y / c)^2 / 4, concave part
    # linearized at (x0, y0); c balances the two factors so the cone is well scaled
    def product_le(x_var, y_var, x0, y0, z_terms, tag):
        c = math.sqrt(max(y0, 1e-9) / max(x0, 1e-9))
        c = min(max(c, 1e-4), 1e4)
        u0 = c * x0 - y0 / c
        # (c x + y / c)^2 / 4 <= z + (2 u0 u - u0^2) / 4, u = c x - y / c
        Z = dict(z_terms)
        Z[x_var] = Z.get(x_var, 0.0) + 0.5 * u0 * c
        Z[y_var] = Z.get(y_var, 0.0) - 0.5 * u0 / c
        Zc = -0.25 * u0 ** 2
        r2 = max(0.25 * (c * x0 + y0 / c) ** 2, 1e-6)
        r = math.sqrt(r2)
        # v^2 <= Z with v = (c x + y / c) / 2, scaled by r:  ||(2 v / r, Z / r2 - 1)|| <= Z / r2 + 1
        Zs = {k: v / r2 for k, v in Z.items()}
        b.add_soc([(Zs, Zc / r2 + 1.0),
                   ({x_var: c / r, y_var: 1.0 / (c * r)}, 0.0),
                   (Zs, Zc / r2 - 1.0)], tag)

    # a link frozen silent has zero SNR; its majorant would pin the distance
    silent_s = silent_r = np.zeros(N, dtype=bool)
    if "powers" in freeze:
        silent_s = state.p_s <= 1e-12 * sc.p_max_s
        silent_r = state.p_r <= 1e-12 * sc.p_max_r
    for n in range(N - 1):
        if silent_s[n]:
            b.fix(ss[n], 0.0)
        else:
            product_le(int(ss[n]), int(dS[n]), ss0[n], dS0[n], {int(ps[n]): 1.0}, "snr_s")
        if silent_r[n + 1]:
            b.fix(sr[n], 0.0)
        else:
            product_le(int(sr[n]), int(dD[n]), sr0[n], dD0[n], {int(pr[n + 1]): 1.0}, "snr_r")

    # information causality, relay side linearized from above
    for m in range(2, N + 1):
        terms: dict = {}
        const = 0.0
        for n in range(2, m + 1):
            k = n - 2
            S0 = gr * sr0[k]
            terms[int(sr[k])] = terms.get(int(sr[k]), 0.0) + gr / ((1 + S0) * LN2)
            const += math.log2(1 + S0) - S0 / ((1 + S0) * LN2)
        for n in range(1, m):
            terms[int(rs[n - 1])] = terms.get(int(rs[n - 1]), 0.0) - 1.0
        terms.update(slack_var("info"))
        b.add_le(terms, -const, "info_causality")

    # sum rate and efficiency epigraphs
    b.add_ge({**{int(v): 1.0 for v in rr}, **{k: -v for k, v in slack_var("rsum").items()}},
             sc.R_sum, "rate_sum")
    b.add_le({Rt: 1.0, **{int(v): -1.0 for v in rr}}, 0.0, "R_tilde")
    den = {pt: -1.0}
    for n in range(N - 1):
        den[int(ps[n])] = sc.upsilon_s * sc.p_max_s
        den[int(pr[n + 1])] = sc.upsilon_r * sc.p_max_r
    b.add_le(den, -sc.N * sc.P_on, "p_tilde")
    product_le(pt, Ei, pt0, Ei0, {Rt: 1.0}, "E_i")

    # laser link: ||(H, q - q_P)|| <= -(ln t0 + (t - t0)/t0) / alpha
    for n in range(N):
        rows = [({int(t[n]): -1.0 / (at * t0[n])}, -(math.log(t0[n]) - 1.0) / at),
                ({}, math.sqrt(Ht2)),
                ({int(q[n, 0]): 1.0}, -qP[0]),
                ({int(q[n, 1]): 1.0}, -qP[1])]
        b.add_soc(rows, "laser_eff")
        # t^2 + P^2 <= 2 (t0 + P0)(t + P) - (t0 + P0)^2 - 2 th
        c0 = t0[n] + P0[n]
        Y = {int(t[n]): 2 * c0, int(P[n]): 2 * c0, int(th[n]): -2.0}
        Yc = -c0 ** 2
        b.add_soc([(Y, Yc + 1.0), ({int(t[n]): 2.0}, 0.0), ({int(P[n]): 2.0}, 0.0), (Y, Yc - 1.0)], "t_hat")

    recv = [({int(th[n]): a12, int(t[n]): ab1}, b2) for n in range(N)]
    tt_row = {tt: 1.0}
    for n in range(N):
        tt_row[int(th[n])] = -a12
        tt_row[int(t[n])] = -ab1
    b.add_le(tt_row, N * b2, "t_tilde")
    b.add_le({**{int(v): 1.0 for v in P}, Pt: -1.0}, 0.0, "P_tilde")
    product_le(Pt, Ee, Pt0, Ee0, {tt: 1.0}, "E_e")

    # flying-energy epigraph w >= ||q_{n+1} - q_n||^2
    for n in range(N - 1):
        rows = [({int(w[n]): 1.0}, 1.0),
                ({int(q[n + 1, 0]): 2.0, int(q[n, 0]): -2.0}, 0.0),
                ({int(q[n + 1, 1]): 2.0, int(q[n, 1]): -2.0}, 0.0),
                ({int(w[n]): 1.0}, -1.0)]
        b.add_soc(rows, "flying")

    # energy causality (kJ): floor and cap for every prefix m = 1..N
    floor: dict = {}
    cap: dict = {}
    cap_c = 0.0
    floor_c = 0.0
    for m in range(1, N + 1):
        n = m - 1
        for k, v in recv[n][0].items():
            floor[k] = floor.get(k, 0.0) - cE * v
            cap[k] = cap.get(k, 0.0) + cE * v
        floor_c -= cE * recv[n][1]
        cap_c += cE * recv[n][1]
        if n < N - 1:
            floor[int(w[n])] = floor.get(int(w[n]), 0.0) + kE
            d0 = dq0[n]
            for j in range(2):
                cap[int(q[n + 1, j])] = cap.get(int(q[n + 1, j]), 0.0) - kE * 2 * d0[j]
                cap[int(q[n, j])] = cap.get(int(q[n, j]), 0.0) + kE * 2 * d0[j]
            cap_c += kE * float(d0 @ d0)
        b.add_le({**floor, **slack_var("floor")}, budget - floor_c, "energy_floor")
        b.add_le({**cap, **slack_var("cap")}, -cap_c, "energy_cap")

    cp = b.build()
    return Subproblem(cp, b.blocks, slack)


def _extract(sub: Subproblem, x: np.ndarray, state: CccpState, sc: Scenario,
             freeze: tuple = (), feas_tol: float = 1e-6) -> CccpState:
    """Tightened state from a subproblem solution (powers trimmed, auxiliaries exact).

    Frozen groups are kept at their previous values when that stays feasible.
    """
    idx = sub.idx
    N = sc.N
    lp = sc.laser
    Pm = sc.P_max_s
    q = x[idx["q"]].reshape(N, 2) * LQ
    q[0], q[-1] = sc.qI, sc.qF
    H2 = sc.altitude_H ** 2
    dS = (H2 + np.sum((q - sc.qS) ** 2, axis=1)) / LQ ** 2
    dD = (H2 + np.sum((q - sc.qD) ** 2, axis=1)) / LQ ** 2
    ps = np.clip(x[idx["ps"]], 0.0, 1.0)
    pr = np.clip(x[idx["pr"]], 0.0, 1.0)
    ss = np.maximum(x[idx["ss"]], 0.0)
    sr = np.maximum(x[idx["sr"]], 0.0)
    ps_new = np.zeros(N)
    pr_new = np.zeros(N)
    ps_new[:-1] = np.minimum(ps[:-1], ss * dS[:-1])
    pr_new[1:] = np.minimum(pr[1:], sr * dD[1:])
    # beacon power: keep the modelled harvest with the true efficiency
    P = x[idx["P"]]
    t_true = np.exp(-sc.alpha * np.sqrt(H2 + np.sum((q - sc.qP) ** 2, axis=1)))
    a12, ab1, b2 = lp.a1 * lp.a2, lp.a2 * lp.b1 / Pm, lp.b2 / Pm
    recv_model = a12 * x[idx["th"]] + ab1 * x[idx["t"]] + b2
    P_trim = (recv_model - b2 - ab1 * t_true) / (a12 * t_true)
    P_new = np.clip(np.minimum(P_trim, P), sc.P_min_s / Pm, 1.0) * Pm
    if "beacon" in freeze:
        P_new = state.P_s.copy()
    if "powers" in freeze:
        keep = tight_state(q, state.p_s, state.p_r, P_new, sc, state.iteration + 1, state.history)
        if _is_feasible(keep, sc, feas_tol):
            return keep
    return tight_state(q, ps_new * sc.p_max_s, pr_new * sc.p_max_r, P_new, sc,
                       iteration=state.iteration + 1, history=state.history)


def _solve_sub(sub: Subproblem, opts: CccpOptions) -> socp.ConicSolution:
    sol = socp.solve(sub.program, tol=opts.socp_tol, max_iters=opts.socp_max_iters)
    if sol.status is socp.Status.OPTIMAL:
        return sol
    res = (sol.primal_residual, sol.dual_residual, sol.gap)
    obj = abs(sol.objective) if np.isfinite(sol.objective) else np.inf
    if (sol.status is socp.Status.ITER_LIMIT and res[0] <= 1e-7 and res[1] <= 1e-7
            and res[2] <= 1e-7 * max(1.0, obj)):
        return sol
    raise SubproblemError(f"subproblem returned {sol.status.value}", sol.status, res)


def iterate(state: CccpState, sc: Scenario, opts: CccpOptions | None = None,
            freeze: tuple = ()) -> CccpState:
    """One CCCP step: solve the subproblem at ``state`` and tighten the result."""
    opts = opts or CccpOptions()
    gamma = sc.gamma_weight if opts.gamma is None else opts.gamma
    sub = _build(state, sc, gamma, freeze)
    sol = _solve_sub(sub, opts)
    new = _extract(sub, sol.x, state, sc, freeze, opts.feas_tol)
    if new.value(gamma) < state.value(gamma) - 1e-7 * max(1.0, abs(state.value(gamma))):
        # a degraded step means the subproblem answer was inaccurate; keep the old point
        log.debug("CCCP step decreased objective (%.3e); keeping previous point",
                  state.value(gamma) - new.value(gamma))
        new = replace(state, iteration=state.iteration + 1, history=list(state.history))
    new.history = list(state.history) + [new.value(gamma)]
    return new


def _is_feasible(state: CccpState, sc: Scenario, tol: float) -> bool:
    return check_feasibility(state.trajectory, state.powers, sc, tol).feasible


def _restore(state: CccpState, sc: Scenario, opts: CccpOptions, freeze=()) -> CccpState:
    """Slack-penalised phase I: drive constraint slacks to zero."""
    for _ in range(opts.restore_iters):
        if _is_feasible(state, sc, opts.feas_tol):
            return state
        sub = _build(state, sc, 0.0, freeze, slack=True)
        sol = _solve_sub(sub, opts)
        state = _extract(sub, sol.x, state, sc, freeze, opts.feas_tol)
    if _is_feasible(state, sc, opts.feas_tol):
        return state
    rep = check_feasibility(state.trajectory, state.powers, sc, opts.feas_tol)
    raise InitializationError(f"no feasible start after restoration: {rep.violations}")


def initialize(sc: Scenario, opts: CccpOptions | None = None, traj: Trajectory | None = None,
               powers: PowerSchedule | None = None) -> CccpState:
    """Feasible starting point: straight line at full communication/beacon power.

    A custom trajectory or power schedule may be supplied.  If the start
    violates the rate-sum, causality, speed or battery limits, a
    slack-penalised restoration phase runs first.
    """
    opts = opts or CccpOptions()
    traj = traj or Trajectory.straight_line(sc)
    if powers is None:
        powers = PowerSchedule.constant(sc, sc.p_max_s, sc.p_max_r, sc.P_max_s)
        # keep info causality strict despite rounding in symmetric layouts
        powers.p_r *= 1 - 1e-6
    state = tight_state(traj.waypoints, powers.p_s, powers.p_r, powers.P_s, sc)
    if not _is_feasible(state, sc, opts.feas_tol):
        state = _restore(state, sc, opts)
    gamma = sc.gamma_weight if opts.gamma is None else opts.gamma
    state.history = [state.value(gamma)]
    return state


def run(state: CccpState, sc: Scenario, opts: CccpOptions, freeze: tuple = (),
        max_iters: int | None = None, callback=None) -> tuple[CccpState, str]:
    """Iterate from ``state`` until the stop rule fires; returns (state, reason)."""
    max_iters = opts.max_iters if max_iters is None else max_iters
    gamma = sc.gamma_weight if opts.gamma is None else opts.gamma
    quiet = 0
    reason = "iteration cap"
    for _ in range(max_iters):
        prev = state.value(gamma)
        try:
            state = iterate(state, sc, opts, freeze)
        except SubproblemError as exc:
            reason = f"subproblem failure: {exc}"
            log.warning("CCCP stopped early: %s", exc)
            break
        if callback is not None:
            callback(state)
        gain = (state.value(gamma) - prev) / max(abs(prev), 1e-12)
        quiet = quiet + 1 if gain < opts.tol else 0
        if quiet >= opts.patience:
            reason = "converged"
            break
    return state, reason


def solve(sc: Scenario, opts: CccpOptions | None = None, init: CccpState | None = None,
          callback=None):
    """Run the procedure; returns (trajectory, powers, metrics, history)."""
    opts = opts or CccpOptions()
    gamma = sc.gamma_weight if opts.gamma is None else opts.gamma
    state = init if init is not None else initialize(sc, opts)
    state.history = [state.value(gamma)]
    state, reason = run(state, sc, opts, callback=callback)
    log.info("CCCP finished after %d iterations (%s)", len(state.history) - 1, reason)
    traj, pw = state.trajectory, state.powers
    return traj, pw, objective(traj, pw, sc, gamma), list(state.history)


def quoted_constraint_counts(N: int) -> dict:
    """Counts quoted for the subproblem in the complexity analysis."""
    return {"linear": 7 * N + 1, "soc3": 5 * N - 1, "soc4": 3 * N - 2}


def constraint_counts(cp: socp.ConicProgram) -> dict:
    """Actual counts of a built subproblem (variable bounds excluded)."""
    cones = cp.cone_counts()
    return {
        "linear": cp.A.shape[0] + cp.G.shape[0],
        "soc3": cones.get(3, 0),
        "soc4": cones.get(4, 0),
        "other_soc": {k: v for k, v in cones.items() if k not in (3, 4)},
    }
