import math

import numpy as np
import pytest

from laserrelay import cccp, socp
from laserrelay.cccp import CccpOptions, InitializationError
from laserrelay.evaluation import check_feasibility, objective
from laserrelay.scenario import PowerSchedule, Scenario, Trajectory

COMPACT = dict(q_init=(400.0, 500.0), q_final=(600.0, 500.0))


def compact(N, **kw):
    return Scenario(N=N, T_total=4.0 * N, **COMPACT, **kw)


def full_power_state(sc, traj=None):
    traj = traj or Trajectory.straight_line(sc)
    pw = PowerSchedule.constant(sc, sc.p_max_s, sc.p_max_r, sc.P_max_s)
    return cccp.tight_state(traj.waypoints, pw.p_s, pw.p_r, pw.P_s, sc)


def point_of(sub, st, sc):
    """The state written as a subproblem vector, every auxiliary tight."""
    LQ, Pm = cccp.LQ, sc.P_max_s
    gs = sc.p_max_s * sc.gamma0 / LQ ** 2
    gr = sc.p_max_r * sc.gamma0 / LQ ** 2
    x = np.zeros(sub.program.n)
    idx = sub.idx

    def put(name, v):
        x[idx[name]] = np.ravel(v)

    q = st.q / LQ
    put("q", q)
    put("ps", st.p_s / sc.p_max_s)
    put("pr", st.p_r / sc.p_max_r)
    put("P", st.P_s / Pm)
    put("ss", st.s_s / gs)
    put("sr", st.s_r / gr)
    put("dS", st.d_S / LQ ** 2)
    put("dD", st.d_D / LQ ** 2)
    put("rs", np.log2(1 + st.s_s))
    put("rr", np.log2(1 + st.s_r))
    put("t", st.t)
    put("th", st.t_hat / Pm)
    put("w", np.sum(np.diff(q, axis=0) ** 2, axis=1))
    for name, v in (("Rt", st.R_tilde), ("pt", st.p_tilde), ("Ei", st.E_i), ("Ee", st.E_e),
                    ("Pt", st.P_tilde / Pm), ("tt", st.t_tilde / Pm)):
        put(name, v)
    return x


def conic_violation(cp, x):
    """Largest violation of any constraint block at ``x``, bounds included."""
    v = [0.0]
    if cp.A.shape[0]:
        v.append(np.max(np.abs(cp.A @ x - cp.b)))
    if cp.G.shape[0]:
        v.append(np.max(cp.G @ x - cp.h))
    for cone in cp.cones:
        y = cone.F @ x + cone.g
        v.append(np.linalg.norm(y[1:]) - y[0])
    v.append(np.max(cp.lb - x))
    v.append(np.max(x - cp.ub))
    return float(max(v))


class TestConstraintCounts:
    @pytest.mark.parametrize("N", [5, 10, 30])
    def test_counts_follow_horizon(self, N):
        sc = compact(N)
        counts = cccp.constraint_counts(cccp.build_subproblem(full_power_state(sc), sc))
        assert counts == {"linear": 3 * N + 4, "soc3": 4 * N - 2, "soc4": 5 * N - 3, "other_soc": {}}

    def test_quoted_counts(self):
        assert cccp.quoted_constraint_counts(30) == {"linear": 211, "soc3": 149, "soc4": 88}


class TestMajorization:
    @pytest.mark.parametrize("gamma", [0.0, 1.0, 100.0])
    @pytest.mark.parametrize("seed", range(3))
    def test_tight_at_linearization_point(self, gamma, seed):
        sc = Scenario(gamma_weight=gamma)
        rng = np.random.default_rng(seed)
        st = cccp.initialize(sc)
        q = st.q.copy()
        q[1:-1] += rng.normal(0, 3, q[1:-1].shape)
        st = cccp.tight_state(q, st.p_s * rng.uniform(0.9, 1, sc.N), st.p_r * 0.9, st.P_s, sc)
        sub = cccp._build(st, sc, gamma)
        x = point_of(sub, st, sc)
        assert conic_violation(sub.program, x) <= 1e-9
        assert float(sub.program.c @ x) == pytest.approx(st.value(gamma), rel=1e-12)

    def test_subproblem_optimum_is_no_worse(self):
        sc = Scenario(gamma_weight=100.0)
        st = cccp.initialize(sc)
        sol = socp.solve(cccp.build_subproblem(st, sc))
        assert sol.status is socp.Status.OPTIMAL
        assert sol.objective >= st.value(100.0) - 1e-9

    def test_rate_floor_never_binds(self):
        # the box on the rate variables must sit below every attainable rate
        S0 = np.array([0.0, 0.5, 3.0, 40.0])
        floor = cccp._minorant_floor(S0)
        assert np.all(floor < np.log2(1 + S0))


@pytest.fixture(scope="module")
def nominal_iterates():
    sc = Scenario(gamma_weight=100.0)
    seen = []
    traj, pw, m, hist = cccp.solve(sc, callback=seen.append)
    return sc, traj, pw, m, hist, seen


@pytest.mark.slow
class TestIterations:
    def test_every_iterate_is_feasible(self, nominal_iterates):
        sc, *_, seen = nominal_iterates
        for st in seen:
            assert check_feasibility(st.trajectory, st.powers, sc).feasible, st.iteration

    def test_objective_is_monotone(self, nominal_iterates):
        *_, hist, _ = nominal_iterates
        assert np.all(np.diff(hist) >= -1e-7)

    def test_history_matches_returned_point(self, nominal_iterates):
        sc, traj, pw, m, hist, _ = nominal_iterates
        assert hist[-1] == pytest.approx(objective(traj, pw, sc).weighted, rel=1e-9)
        assert m.weighted == pytest.approx(hist[-1], rel=1e-9)

    def test_converged_point_is_a_fixed_point(self, nominal_iterates):
        sc, *_, seen = nominal_iterates
        last = seen[-1]
        nxt = cccp.iterate(last, sc)
        assert nxt.value(100.0) == pytest.approx(last.value(100.0), rel=1e-4)
        assert np.max(np.abs(nxt.q - last.q)) < 5.0

    def test_stop_rule_patience(self, nominal_iterates):
        *_, hist, _ = nominal_iterates
        gains = np.diff(hist) / np.maximum(np.abs(hist[:-1]), 1e-12)
        assert np.all(gains[-CccpOptions().patience:] < CccpOptions().tol)


class TestInitialization:
    def test_straight_line_start_is_feasible(self):
        sc = Scenario()
        st = cccp.initialize(sc)
        assert check_feasibility(st.trajectory, st.powers, sc).feasible
        assert np.array_equal(st.q, Trajectory.straight_line(sc).waypoints)

    def test_perturbed_start_is_restored(self):
        sc = Scenario()
        q = Trajectory.straight_line(sc).waypoints.copy()
        q[10] += [80.0, 0.0]
        st = cccp.initialize(sc, traj=Trajectory(q))
        assert check_feasibility(st.trajectory, st.powers, sc).feasible

    def test_unreachable_rate_target(self):
        with pytest.raises(InitializationError):
            cccp.initialize(compact(5))

    def test_history_starts_at_initial_value(self):
        sc = Scenario(gamma_weight=3.0)
        st = cccp.initialize(sc)
        assert st.history == [st.value(3.0)]

    def test_tight_state_matches_metrics(self):
        sc = Scenario()
        st = full_power_state(sc)
        m = objective(st.trajectory, st.powers, sc)
        assert st.E_i == pytest.approx(m.f_EE, rel=1e-12)
        # the transformed problem keeps the affine laser model; positive here
        assert st.E_e == pytest.approx(m.f_PE, rel=1e-12)
        assert math.isclose(st.value(2.0), m.f_EE + 2 * m.f_PE, rel_tol=1e-12)


class TestFrozenGroups:
    def test_frozen_trajectory_stays_put(self):
        sc = Scenario(gamma_weight=1.0)
        st = cccp.initialize(sc)
        nxt = cccp.iterate(st, sc, freeze=("trajectory",))
        assert np.allclose(nxt.q, st.q, atol=1e-9)
        assert nxt.value(1.0) >= st.value(1.0) - 1e-7

    def test_frozen_powers_stay_put(self):
        sc = Scenario(gamma_weight=1.0)
        st = cccp.initialize(sc)
        nxt = cccp.iterate(st, sc, freeze=("powers", "beacon"))
        assert np.allclose(nxt.p_s, st.p_s) and np.allclose(nxt.p_r, st.p_r) and np.allclose(nxt.P_s, st.P_s)
