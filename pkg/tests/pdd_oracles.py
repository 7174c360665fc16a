"""Brute-force oracles for the eight PDD block updates.

Every oracle works from the augmented Lagrangian itself (``pdd.al_value``)
rather than from the coefficients a block assembles: quadratic sub-blocks are
identified exactly by finite differences of the AL, then minimised by a method
that shares nothing with the block (sphere parametrisation plus grid search,
bounded least squares, an interior-point SOCP, ternary search).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import lsq_linear, minimize

from laserrelay import pdd, socp
from laserrelay.pdd import Units, al_value, consistent_state
from laserrelay.scenario import Scenario, Trajectory

SMALL = dict(N=5, T_total=20.0, q_init=(400.0, 500.0), q_final=(600.0, 500.0))
SHRINK = pdd.PddOptions().snr_shrink
LN2 = math.log(2.0)

# per-check tolerances; each check returns a scale-free error
TOL = {
    "block1_snr": 1e-8,
    "block2_rate_copies": 1e-8,
    "block3_comm_powers": 1e-8,
    "block4_prefix": 1e-10,
    "block5_copies": 1e-5,
    "block6_trajectory": 1e-4,
    "block7_efficiency": 1e-7,
    "block7_efficiency_aux": 1e-8,
    "block8_speeds": 1e-8,
    "block8_beacon_power": 1e-8,
}
# socp cross-checks (blocks 2 and 5)
SOCP_TOL = 1e-6
AL_TOL = 1e-9


@dataclass
class Case:
    sc: Scenario
    u: Units
    s: pdd.PddState
    gamma: float
    R_sum: float


def random_case(rng: np.random.Generator) -> Case:
    """A random small state: copies disagree and duals are nonzero, but every
    hard constraint (boxes, sphere equalities, speed bookkeeping) holds."""
    gamma = float(rng.choice([0.0, 1.0, 100.0]))
    sc = Scenario(**SMALL, gamma_weight=gamma)
    u = Units.of(sc)
    N = sc.N
    q = Trajectory.straight_line(sc).waypoints.copy()
    q[1:-1] += rng.normal(0, 30, (N - 2, 2))
    ps = rng.uniform(0, sc.p_max_s, N)
    pr = rng.uniform(0, sc.p_max_r, N)
    ps[-1] = pr[0] = 0.0
    P = rng.uniform(sc.P_min_s, sc.P_max_s, N)
    rho = 10 ** rng.uniform(-3, 0)
    weights = dict(pdd.DEFAULT_WEIGHTS) if rng.random() < 0.5 else {}
    s = consistent_state(q, ps, pr, P, sc, rho, 0.8, weights)

    def jit(x, sd):
        return x + sd * rng.standard_normal(np.shape(x))

    def mult(x, sd):
        return x * np.exp(sd * rng.standard_normal(np.shape(x)))

    s.qd, s.qb, s.qh = jit(s.qd, 0.05), jit(s.qb, 0.05), jit(s.qh, 0.05)
    s.qt[1:-1] = jit(s.qt[1:-1], 0.05)
    s.ss, s.sr = mult(s.ss, 0.05), mult(s.sr, 0.05)
    s.sbs, s.sbr = jit(s.sbs, 0.1), jit(s.sbr, 0.1)
    s.sbs[-1] = s.sbr[0] = 0.0
    s.ps = np.clip(jit(s.ps, 0.05), 0, 1)
    s.pr = np.clip(jit(s.pr, 0.05), 0, 1)
    s.ps[-1] = s.pr[0] = 0.0
    s.P = np.clip(jit(s.P, 0.05), u.Pmin, 1.0)
    s.t = np.clip(mult(s.t, 0.02), u.t_min, u.t_max)
    s.th, s.tb = jit(s.th, 0.02), jit(s.tb, 0.005)
    s.st[1:] = np.minimum(jit(s.st[1:], 0.2), 0.0)
    s.e = np.clip(jit(s.e, 1.0), u.e_lo, 0.0)
    s.vb = np.clip(mult(s.vb, 0.2), 0.0, u.V2)
    s.vt[1:] = jit(s.vt[1:], 0.05)
    s.vd[1:] = jit(s.vd[1:], 0.05)
    # hard equalities of blocks 5 and 6
    s.dS = u.H2 + np.sum((s.qb - u.qS) ** 2, axis=1)
    s.dD = u.H2 + np.sum((s.qd - u.qD) ** 2, axis=1)
    s.tL = -np.sqrt(u.H2 + np.sum((s.qh - u.qP) ** 2, axis=1))
    for i in range(N - 1):
        s.vbr[i + 1] = s.vt[i] + np.sum((s.qt[i + 1] - s.q[i]) ** 2)
    for k, v in s.duals.items():
        s.duals[k] = 0.1 * rng.standard_normal(v.shape) / s.rk(k)
    R_sum = float(rng.uniform(0.5, 1.5) * np.sum(s.sbr[1:]))
    return Case(sc, u, s, gamma, R_sum)


def make_cases(n: int = 100, seed: int = 2024) -> list:
    rng = np.random.default_rng(seed)
    return [random_case(rng) for _ in range(n)]


# --- exact quadratic models of the AL --------------------------------------------

def vec(s, spec) -> np.ndarray:
    return np.array([getattr(s, a)[i] for a, i in spec], float)


def put(s, spec, z):
    out = s.copy()
    for (a, i), v in zip(spec, z):
        getattr(out, a)[i] = v
    return out


def neg_al(case: Case, base=None):
    base = case.s if base is None else base
    return lambda spec, z: -al_value(put(base, spec, z), case.u, case.gamma)


class Quad:
    """``f(z0 + d) = f0 + g'd + d'Qd/2``, identified from unit-step differences."""

    def __init__(self, f, z0):
        z0 = np.asarray(z0, float)
        n = z0.size
        E = np.eye(n)
        f0 = f(z0)
        fp = np.array([f(z0 + E[i]) for i in range(n)])
        fm = np.array([f(z0 - E[i]) for i in range(n)])
        Q = np.diag(fp + fm - 2 * f0)
        for i in range(n):
            for j in range(i + 1, n):
                Q[i, j] = Q[j, i] = f(z0 + E[i] + E[j]) - fp[i] - fp[j] + f0
        self.z0, self.f0, self.g, self.Q = z0, f0, 0.5 * (fp - fm), Q

    @classmethod
    def of(cls, case: Case, spec, base=None):
        f = neg_al(case, base)
        b = case.s if base is None else base
        return cls(lambda z: f(spec, z), vec(b, spec))

    def change(self, Z):
        """``f(Z) - f(z0)``, free of the rounding carried by a large ``f0``."""
        D = np.asarray(Z, float) - self.z0
        return D @ self.g + 0.5 * np.einsum("...i,ij,...j->...", D, self.Q, D)

    def value(self, Z):
        return self.f0 + self.change(Z)

    def argmin(self):
        return self.z0 - np.linalg.solve(self.Q, self.g)

    def box_argmin(self, lo, hi):
        """Bounded least squares on the square-root factor."""
        w, V = np.linalg.eigh(self.Q)
        R = (V * np.sqrt(np.maximum(w, 0))).T
        rhs = -np.linalg.lstsq(R.T, self.g, rcond=None)[0]
        res = lsq_linear(R, rhs, bounds=(lo - self.z0, hi - self.z0), method="bvls", tol=1e-15)
        return self.z0 + res.x


def gain_error(f_block, f_oracle, f_old):
    """Shortfall of the block against the oracle, relative to the available decrease."""
    return max(0.0, f_block - f_oracle) / (1.0 + abs(f_old - f_oracle))


def _al(case, s):
    return al_value(s, case.u, case.gamma)


def al_drop(case, before, after):
    a0, a1 = _al(case, before), _al(case, after)
    return max(0.0, a0 - a1) / (1 + abs(a0))


def _after(case, block, *args):
    s1 = case.s.copy()
    block(s1, case.u, *args)
    return s1


# --- block 1: SNR majorize-minimize step ----------------------------------------

def _snr_slots(case: Case):
    """(sr-or-ss name, slot, lin, d, penalty ratio, log target c) per free SNR."""
    s, D = case.s, case.s.duals
    rD, rS, rr, rs = s.rk("mu_D"), s.rk("mu_S"), s.rk("zeta_r"), s.rk("zeta_s")
    out = []
    for n in range(1, s.N):
        out.append(("sr", n, s.pr[n] * case.u.Gr + rD * D["mu_D"][n], s.dD[n], rD, rr,
                    s.sbr[n] - rr * D["zeta_r"][n - 1]))
    for n in range(s.N - 1):
        out.append(("ss", n, s.ps[n] * case.u.Gs + rS * D["mu_S"][n], s.dS[n], rS, rs,
                    s.sbs[n] - rs * D["zeta_s"][n]))
    return out


def check_block1(case: Case) -> float:
    s0 = case.s
    s1 = _after(case, pdd.block1_update_s, SHRINK)
    err = al_drop(case, s0, s1)
    for name, n, lin, d, r1, r2, c in _snr_slots(case):
        x0, x1 = getattr(s0, name)[n], getattr(s1, name)[n]

        def true_obj(x):
            return (lin - x * d) ** 2 / (2 * r1) + (np.log2(1 + x) - c) ** 2 / (2 * r2)

        # the slot objective written out must agree with the AL
        f = neg_al(case)
        gap = (f([(name, n)], [x1]) - f([(name, n)], [x0])) - (true_obj(x1) - true_obj(x0))
        err = max(err, abs(gap) / (1 + abs(f([(name, n)], [x0]))))
        err = max(err, max(0.0, true_obj(x1) - true_obj(x0)) / (1 + abs(true_obj(x0))))
        # majorizer with the curvature bound taken from a dense grid
        lo = SHRINK * x0
        grid = np.concatenate([[lo], np.geomspace(max(lo, 1e-9), case.u.Gr / case.u.H2 + lo + 1, 20001)])
        curv = 2 * (1 - LN2 * (np.log2(1 + grid) - c)) / (LN2 ** 2 * (1 + grid) ** 2)
        phi = max(curv.max(), pdd.PHI_FLOOR)
        slope = 2 * (np.log2(1 + x0) - c) / (LN2 * (1 + x0))
        # minimise (lin - x d)^2 / (2 r1) + [slope (x - x0) + phi/2 (x - x0)^2] / (2 r2)
        a = d * d / (2 * r1) + phi / (4 * r2)
        b = -lin * d / r1 + (slope - phi * x0) / (2 * r2)
        x_star = max(-b / (2 * a), lo)
        err = max(err, abs(x1 - x_star) / (1 + abs(x_star)))
    return err


# --- block 2: rate copies, QP with one linear inequality ------------------------

def _sbar_spec(N):
    return [("sbs", i) for i in range(N - 1)] + [("sbr", i) for i in range(1, N)]


def check_block2(case: Case, with_socp: bool = True) -> tuple[float, float]:
    N = case.s.N
    spec = _sbar_spec(N)
    s1 = _after(case, pdd.block2_update_sbar, case.gamma, case.R_sum)
    quad = Quad.of(case, spec)
    a = np.concatenate([np.zeros(N - 1), np.ones(N - 1)])
    # active-set enumeration: inactive, then active
    cands = []
    z = quad.argmin()
    if a @ z >= case.R_sum:
        cands.append(z)
    K = np.block([[quad.Q, a[:, None]], [a[None, :], np.zeros((1, 1))]])
    rhs = np.concatenate([quad.Q @ quad.z0 - quad.g, [case.R_sum]])
    z_act = np.linalg.solve(K, rhs)[:-1]
    cands.append(z_act)
    z_or = min(cands, key=quad.value)
    zb = vec(s1, spec)
    err = np.max(np.abs(zb - z_or)) / (1 + np.max(np.abs(z_or)))
    xerr = 0.0
    if with_socp:
        zs = _socp_quad_min(quad, lin_ge=(a, case.R_sum))
        f_b = float(quad.value(zb))
        xerr = abs(f_b - float(quad.value(zs))) / (1 + abs(quad.f0 - f_b))
    return float(err), float(xerr)


def _root(Q):
    w, V = np.linalg.eigh(Q)
    return (V * np.sqrt(np.maximum(w, 0))).T          # Q = R'R


def _socp_quad_min(quad: Quad, lin_ge=None, cone=None):
    """argmin of the model via the conic solver, in local coordinates d = z - z0.

    ``lin_ge`` = (a, r): a'z >= r.  ``cone`` = callable(builder, d_idx) adding
    constraints.  The objective is divided by its own scale first: the solver
    does no equilibration of its own.
    """
    n = quad.z0.size
    k = max(1.0, float(np.max(np.abs(quad.Q))), float(np.max(np.abs(quad.g))))
    R = _root(quad.Q / k)
    b = socp.ConicBuilder()
    d = [int(i) for i in b.add_var("d", n)]
    t = int(b.add_var("t", 1, lb=0.0)[0])
    rows = [({d[j]: R[i, j] for j in range(n) if R[i, j] != 0}, 0.0) for i in range(n)]
    b.add_rotated(({t: 1.0}, 0.0), ({}, 2.0), rows)     # d'Qd / k <= 2 t
    if lin_ge is not None:
        a, r = lin_ge
        b.add_ge({d[j]: a[j] for j in range(n) if a[j]}, r - a @ quad.z0)
    if cone is not None:
        cone(b, d)
    b.objective({t: -1.0, **{d[j]: -quad.g[j] / k for j in range(n)}})
    sol = socp.solve(b.build())
    assert sol.status is socp.Status.OPTIMAL, sol.status
    return quad.z0 + sol.x[d]


# --- block 3: communication powers ------------------------------------------------

def ternary(f, lo, hi, iters=300):
    """Minimiser of a unimodal ``f`` on [lo, hi]; ``f`` should work in extended precision."""
    lo, hi = np.longdouble(lo), np.longdouble(hi)
    for _ in range(iters):
        m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        if f(m1) <= f(m2):
            hi = m2
        else:
            lo = m1
    return float(0.5 * (lo + hi))


def check_block3(case: Case) -> float:
    s0, u, D = case.s, case.u, case.s.duals
    s1 = _after(case, pdd.block3_update_comm_powers)
    err = al_drop(case, s0, s1)
    den = u.ks * np.sum(s0.ps[:-1]) + u.kr * np.sum(s0.pr[1:]) + u.k0
    S = np.sum(s0.sbr[1:])
    for name, lo_n, hi_n, k, G, snr, dist, fam in (
            ("ps", 0, s0.N - 1, u.ks, u.Gs, s0.ss, s0.dS, "mu_S"),
            ("pr", 1, s0.N, u.kr, u.Gr, s0.sr, s0.dD, "mu_D")):
        ld = np.longdouble
        r = ld(s0.rk(fam))
        slope = ld(S) * ld(k) / ld(den) ** 2       # gradient of -f_EE at the current powers
        for n in range(lo_n, hi_n):
            def obj(p):
                return slope * p + (p * ld(G) - ld(snr[n]) * ld(dist[n]) + r * ld(D[fam][n])) ** 2 / (2 * r)
            p_or = ternary(obj, 0.0, 1.0)
            err = max(err, abs(getattr(s1, name)[n] - p_or))
    err = max(err, abs(s1.ps[-1]), abs(s1.pr[0]))
    return float(err)


# --- block 4: prefix slacks, box least squares -----------------------------------

def check_block4(case: Case) -> float:
    N, u = case.s.N, case.u
    spec = [("st", m) for m in range(1, N)] + [("e", m) for m in range(N)]
    s1 = _after(case, pdd.block4_update_prefix)
    quad = Quad.of(case, spec)
    lo = np.concatenate([np.full(N - 1, -np.inf), np.full(N, u.e_lo)])
    hi = np.zeros(2 * N - 1)
    z_or = quad.box_argmin(lo, hi)
    zb = vec(s1, spec)
    return float(np.max(np.abs(zb - z_or)) / (1 + np.max(np.abs(z_or))))


# --- block 5: copies on a sphere ------------------------------------------------

COPY_GROUPS = (("qb", "dS", "qS", False), ("qh", "tL", "qP", True), ("qd", "dD", "qD", False))


def _sphere_point(centre, H2, squared, r, th, sign=1.0):
    c = centre + np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)
    w = sign * np.sqrt(H2 + r * r) if squared else H2 + r * r
    return np.concatenate([c, np.asarray(w)[..., None]], axis=-1)


def sphere_oracle(quad: Quad, centre, H2, squared, r_max):
    """Global minimum over the constraint manifold; with ``squared`` both
    branches w = +-sqrt(H2 + r^2) are searched."""
    R, T = np.meshgrid(np.linspace(0, r_max, 150), np.linspace(0, 2 * np.pi, 145), indexing="ij")
    best = np.inf
    for sign in ((-1.0, 1.0) if squared else (1.0,)):
        vals = quad.change(_sphere_point(centre, H2, squared, R, T, sign))
        k = np.unravel_index(np.argmin(vals), vals.shape)
        f = lambda x: float(quad.change(_sphere_point(centre, H2, squared, x[0], x[1], sign)))
        res = minimize(f, [R[k], T[k]], method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 1500})
        best = min(best, res.fun, float(vals[k]))
    return quad.f0 + best


def _sphere_residual(z, centre, H2, squared):
    d = H2 + np.sum((z[:2] - centre) ** 2)
    return abs(d - (z[2] ** 2 if squared else z[2]))


def check_block5(case: Case, with_socp: bool = True) -> tuple[float, float, float, int]:
    """(objective error, equality residual, socp error, socp-active count)."""
    s0, u = case.s, case.u
    s1 = _after(case, pdd.block5_update_copies)
    err = con = serr = 0.0
    active = 0
    for cp, sc_name, cname, squared in COPY_GROUPS:
        centre = getattr(u, cname)
        for i in range(s0.N):
            spec = [(cp, (i, 0)), (cp, (i, 1)), (sc_name, i)]
            quad = Quad.of(case, spec)
            zb = vec(s1, spec)
            con = max(con, _sphere_residual(zb, centre, u.H2, squared) / (1 + abs(zb[2])))
            r_max = 3 * max(np.linalg.norm(s0.q[i] - centre), np.linalg.norm(zb[:2] - centre)) + 2
            f_or = sphere_oracle(quad, centre, u.H2, squared, r_max)
            f_b = float(quad.value(zb))
            err = max(err, gain_error(f_b, f_or, quad.f0))
            if with_socp:
                sign = 1.0 if zb[2] > 0 else -1.0
                z_rel = _socp_quad_min(quad, cone=_relaxed_sphere(quad.z0, centre, u.H2, squared, sign))
                slack = _sphere_residual(z_rel, centre, u.H2, squared)
                if slack <= 1e-7 * (1 + abs(z_rel[2])):
                    active += 1
                    serr = max(serr, abs(f_b - float(quad.value(z_rel))) / (1 + abs(quad.f0 - f_b)))
    return err, con, serr, active


def _relaxed_sphere(z0, centre, H2, squared, sign):
    """Convex relaxation of the sphere equality: H2 + ||c - centre||^2 <= w,
    or <= w^2 on the branch sign * w >= 0."""
    def add(b, d):
        rows = [({d[0]: 1.0}, z0[0] - centre[0]), ({d[1]: 1.0}, z0[1] - centre[1])]
        if squared:
            b.add_soc([({d[2]: sign}, sign * z0[2]), ({}, math.sqrt(H2))] + rows)
        else:
            b.add_rotated(({d[2]: 1.0}, z0[2] - H2), ({}, 1.0), rows)
    return add


# --- block 6: trajectory, one QCQP-1 per slot -----------------------------------

def _traj_slot(case: Case, i: int):
    """Free variables of slot i and an affine map (rw, theta) -> (z0, P) with z = z0 + P y."""
    s, u, N = case.s, case.u, case.s.N
    q_free, t_free = 1 <= i <= N - 2, i <= N - 3
    has_con = i <= N - 2
    spec = []
    if q_free:
        spec += [("q", (i, 0)), ("q", (i, 1))]
    if t_free:
        spec += [("qt", (i + 1, 0)), ("qt", (i + 1, 1))]
    if has_con:
        spec.append(("vbr", i + 1))
    if i >= 1:
        spec.append(("vt", i))
    pos = {a if a in ("vbr", "vt") else f"{a}{idx[1]}": j for j, (a, idx) in enumerate(spec)}
    n = len(spec)
    if not has_con:
        return spec, None
    # y: free coordinates left once w = qt_{i+1} - q_i and delta = vbr - vt are fixed
    ys = (["q0", "q1"] if q_free and t_free else []) + (["vt"] if i >= 1 else [])

    def param(rw, th):
        rw, th = np.broadcast_arrays(np.asarray(rw, float), np.asarray(th, float))
        w = np.stack([rw * np.cos(th), rw * np.sin(th)], axis=-1)
        delta = rw * rw
        z0 = np.zeros(rw.shape + (n,))
        P = np.zeros((n, len(ys)))
        for j, name in enumerate(ys):
            P[pos[name], j] = 1.0
        for k in range(2):
            if q_free and t_free:
                P[pos[f"qt{k}"], ys.index(f"q{k}")] = 1.0
                z0[..., pos[f"qt{k}"]] = w[..., k]
            elif t_free:                      # q_i = q_I
                z0[..., pos[f"qt{k}"]] = u.qI[k] + w[..., k]
            else:                             # qt_{i+1} = q_F
                z0[..., pos[f"q{k}"]] = u.qF[k] - w[..., k]
        z0[..., pos["vbr"]] = delta
        if "vt" in ys:
            P[pos["vbr"], ys.index("vt")] = 1.0
        return z0, P

    return spec, param


def traj_oracle(quad: Quad, param, r_max):
    def best(rw, th):
        z0, P = param(rw, th)
        if P.shape[1]:
            H = P.T @ quad.Q @ P
            grad = (z0 - quad.z0) @ quad.Q + quad.g
            y = -np.linalg.solve(H, (grad @ P)[..., None])[..., 0] if z0.ndim > 1 else -np.linalg.solve(H, P.T @ grad)
            z0 = z0 + y @ P.T
        return quad.value(z0)

    R, T = np.meshgrid(np.linspace(0, r_max, 150), np.linspace(0, 2 * np.pi, 145), indexing="ij")
    vals = best(R.ravel(), T.ravel())
    k = int(np.argmin(vals))
    res = minimize(lambda x: float(best(np.array([x[0]]), np.array([x[1]]))[0]), [R.ravel()[k], T.ravel()[k]],
                   method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 1500})
    return min(res.fun, float(vals[k]))


def traj_residual(case: Case, s, i):
    u, N = case.u, s.N
    qi = u.qI if i == 0 else s.q[i]
    qn = u.qF if i + 1 == N - 1 else s.qt[i + 1]
    vt = 0.0 if i == 0 else s.vt[i]
    return abs(np.sum((qn - qi) ** 2) - (s.vbr[i + 1] - vt))


def check_block6(case: Case) -> tuple[float, float]:
    s0 = case.s
    s1 = _after(case, pdd.block6_update_traj)
    err = con = 0.0
    for i in range(s0.N):
        spec, param = _traj_slot(case, i)
        quad = Quad.of(case, spec)
        zb = vec(s1, spec)
        f_b = float(quad.value(zb))
        if param is None:
            f_or = float(quad.value(quad.argmin()))
        else:
            con = max(con, traj_residual(case, s1, i) / (1 + s1.vbr[i + 1]))
            w_old = math.sqrt(max(s0.vbr[i + 1] - (s0.vt[i] if i else 0.0), 0.0))
            r_max = 2 * max(w_old, math.sqrt(max(s1.vbr[i + 1] - (s1.vt[i] if i else 0.0), 0.0)), 1.0)
            f_or = traj_oracle(quad, param, r_max)
        err = max(err, gain_error(f_b, f_or, quad.f0))
    err = max(err, float(np.max(np.abs(s1.q[[0, -1]] - [case.u.qI, case.u.qF]))))
    return err, con


# --- block 7: laser efficiency and its auxiliaries --------------------------------

def check_block7_t(case: Case) -> float:
    """t update = minimiser of the log-term majorizer, curvature bound from a grid."""
    s0, u, D = case.s, case.u, case.s.duals
    s1 = _after(case, pdd.block7_update_laser_aux, case.gamma)
    only_t = s0.copy()
    only_t.t = s1.t.copy()
    err = al_drop(case, s0, only_t)
    rL = s0.rk("xi_L")
    f = neg_al(case)
    tt = np.linspace(u.t_min, u.t_max, 20001)
    for n in range(s0.N):
        c = u.alpha * s0.tL[n] - rL * D["xi_L"][n]
        L = lambda t: (math.log(t) - c) ** 2 / (2 * rL)
        t0 = s0.t[n]
        kappa = max(np.max((1 - (np.log(tt) - c)) / (rL * tt ** 2)), pdd.PHI_FLOOR / rL)
        dL = (math.log(t0) - c) / (rL * t0)

        def major(t):
            return f([("t", n)], [t]) - L(t) + L(t0) + dL * (t - t0) + 0.5 * kappa * (t - t0) ** 2

        # the majorizer is quadratic: three samples fix it
        h = 0.25 * (u.t_max - u.t_min)
        m0, mp, mm = major(t0), major(t0 + h), major(t0 - h)
        a = (mp + mm - 2 * m0) / (2 * h * h)
        b = (mp - mm) / (2 * h)
        t_or = min(max(t0 - b / (2 * a), u.t_min), u.t_max)
        err = max(err, abs(s1.t[n] - t_or) / t_or)
    return float(err)


def check_block7_aux(case: Case) -> float:
    s0 = case.s
    s1 = _after(case, pdd.block7_update_laser_aux, case.gamma)
    N = s0.N
    base = s0.copy()
    base.t = s1.t.copy()
    spec = [("th", n) for n in range(N)]
    z = Quad.of(case, spec, base).argmin()
    err = np.max(np.abs(s1.th - z)) / (1 + np.max(np.abs(z)))
    base.th = s1.th.copy()
    spec = [("tb", n) for n in range(N)]
    z = Quad.of(case, spec, base).argmin()
    return float(max(err, np.max(np.abs(s1.tb - z)) / (1 + np.max(np.abs(z)))))


# --- block 8: speed copies and beacon power ---------------------------------------

def check_block8_speeds(case: Case) -> float:
    s0, u, N = case.s, case.u, case.s.N
    s1 = _after(case, pdd.block8_update_speed_laserpower, case.gamma)
    spec = [("vd", n) for n in range(1, N)]
    z = Quad.of(case, spec).argmin()
    err = np.max(np.abs(s1.vd[1:] - z)) / (1 + np.max(np.abs(z)))
    spec = [("vb", n) for n in range(N - 1)]
    z = Quad.of(case, spec).box_argmin(np.zeros(N - 1), np.full(N - 1, u.V2))
    return float(max(err, np.max(np.abs(s1.vb - z)) / (1 + np.max(np.abs(z)))))


def pe_value(s, u):
    return float(np.sum(u.A1 * s.th + u.B1 * s.t + u.B2) / (u.cE * np.sum(s.P)))


def check_block8_power(case: Case) -> float:
    """Beacon power vs the box minimiser of the AL with f_PE linearized at the current point."""
    s0, u, N, g = case.s, case.u, case.s.N, case.gamma
    s1 = _after(case, pdd.block8_update_speed_laserpower, g)
    spec = [("P", n) for n in range(N)]
    f = neg_al(case)
    pe0 = pe_value(s0, u)
    grad0 = -pe0 / np.sum(s0.P) * np.ones(N)

    def surrogate(z):
        moved = put(s0, spec, z)
        return f(spec, z) + g * pe_value(moved, u) - g * (pe0 + grad0 @ (z - s0.P))

    quad = Quad(surrogate, s0.P.copy())
    z = quad.box_argmin(np.full(N, u.Pmin), np.ones(N))
    err = float(np.max(np.abs(s1.P - z)))
    # per-slot ternary search over the same surrogate (separable)
    gn, Qn = quad.g.astype(np.longdouble), np.diag(quad.Q).astype(np.longdouble)
    for n in range(N):
        p0 = np.longdouble(s0.P[n])
        p_or = ternary(lambda p: gn[n] * (p - p0) + 0.5 * Qn[n] * (p - p0) ** 2, u.Pmin, 1.0)
        err = max(err, abs(s1.P[n] - p_or))
    return err


# --- suite ---------------------------------------------------------------------

SOCP_CASES = 25


def suite(cases) -> dict:
    """Worst error per check over ``cases``; the socp cross-checks run on the
    first ``SOCP_CASES`` of them."""
    worst = {k: 0.0 for k in TOL}
    extra = {"block2_socp": 0.0, "block5_socp": 0.0, "block5_socp_active": 0,
             "block5_equality": 0.0, "block6_equality": 0.0}
    for j, c in enumerate(cases):
        conic = j < SOCP_CASES
        worst["block1_snr"] = max(worst["block1_snr"], check_block1(c))
        e, x = check_block2(c, conic)
        worst["block2_rate_copies"] = max(worst["block2_rate_copies"], e)
        extra["block2_socp"] = max(extra["block2_socp"], x)
        worst["block3_comm_powers"] = max(worst["block3_comm_powers"], check_block3(c))
        worst["block4_prefix"] = max(worst["block4_prefix"], check_block4(c))
        e, con, se, act = check_block5(c, conic)
        worst["block5_copies"] = max(worst["block5_copies"], e)
        extra["block5_equality"] = max(extra["block5_equality"], con)
        extra["block5_socp"] = max(extra["block5_socp"], se)
        extra["block5_socp_active"] += act
        e, con = check_block6(c)
        worst["block6_trajectory"] = max(worst["block6_trajectory"], e)
        extra["block6_equality"] = max(extra["block6_equality"], con)
        worst["block7_efficiency"] = max(worst["block7_efficiency"], check_block7_t(c))
        worst["block7_efficiency_aux"] = max(worst["block7_efficiency_aux"], check_block7_aux(c))
        worst["block8_speeds"] = max(worst["block8_speeds"], check_block8_speeds(c))
        worst["block8_beacon_power"] = max(worst["block8_beacon_power"], check_block8_power(c))
    return {"worst": worst, "extra": extra}
