"""Penalty dual decomposition for the laser-powered relay problem.

Every coupling in the problem is broken by copies and auxiliary variables
tied together by equality constraints.  The equalities go into an augmented
Lagrangian; the inner loop runs eight block updates (each closed-form or a
one-constraint QCQP solved by a monotone root search) and the outer loop
updates the multipliers and shrinks the penalty.

Units follow the CCCP module: positions in hectometres, communication powers
over their caps (the SNR ``s`` stays physical, so ``p * G = s * d`` with
``G = p_max * gamma0 / 100^2``), beacon power over ``P_max_s`` and energies
in kJ.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import cccp
from .evaluation import check_feasibility, check_info_causality, objective
from .scenario import PowerSchedule, Scenario, Trajectory

log = logging.getLogger(__name__)

LQ = 100.0
LN2 = math.log(2.0)
PHI_FLOOR = 1e-6


class PddError(RuntimeError):
    pass


class QcqpError(PddError):
    """Root search for a one-constraint QCQP found no sign change."""


# --- scaled constants ---------------------------------------------------------

@dataclass(frozen=True)
class Units:
    N: int
    H2: float
    qS: np.ndarray
    qD: np.ndarray
    qP: np.ndarray
    qI: np.ndarray
    qF: np.ndarray
    Gs: float
    Gr: float
    alpha: float
    A1: float
    B1: float
    B2: float
    cE: float
    kappa: float
    V2: float
    e_lo: float
    ks: float
    kr: float
    k0: float
    Pmin: float
    t_min: float
    t_max: float

    @classmethod
    def of(cls, sc: Scenario) -> "Units":
        lp = sc.laser
        dt = sc.delta_t
        H2 = (sc.altitude_H / LQ) ** 2
        qP = sc.qP / LQ
        alpha = sc.alpha * LQ
        pts = [sc.qS / LQ, sc.qD / LQ, sc.qI / LQ, sc.qF / LQ]
        d_max = max(H2 + float(np.sum((p - qP) ** 2)) for p in pts)
        return cls(
            N=sc.N, H2=H2, qS=sc.qS / LQ, qD=sc.qD / LQ, qP=qP, qI=sc.qI / LQ, qF=sc.qF / LQ,
            Gs=sc.p_max_s * sc.gamma0 / LQ ** 2, Gr=sc.p_max_r * sc.gamma0 / LQ ** 2,
            alpha=alpha,
            A1=lp.a1 * lp.a2 * sc.P_max_s * dt / 1e3, B1=lp.a2 * lp.b1 * dt / 1e3,
            B2=lp.b2 * dt / 1e3, cE=sc.P_max_s * dt / 1e3,
            kappa=sc.omega * LQ ** 2 / dt ** 2 / 1e3,
            V2=(sc.v_max * dt / LQ) ** 2,
            e_lo=(sc.energy_floor_theta - sc.energy_budget_E) / 1e3,
            ks=sc.upsilon_s * sc.p_max_s, kr=sc.upsilon_r * sc.p_max_r, k0=sc.N * sc.P_on,
            Pmin=sc.P_min_s / sc.P_max_s,
            t_min=math.exp(-alpha * math.sqrt(d_max)), t_max=math.exp(-alpha * math.sqrt(H2)),
        )


# --- state --------------------------------------------------------------------

# equality families and the length of each residual vector
def _family_sizes(N: int) -> dict:
    return {
        "mu_D": N, "mu_S": N, "xi_S": N, "xi_L": N,
        "zeta_r": N - 1, "zeta_s": N - 1, "zeta_i": N - 1, "zeta_e": N,
        "eta": N, "tau_bar": N - 1, "tau": N - 1, "tau_tilde": N - 1,
        "lam_dot": (N, 2), "lam_bar": (N, 2), "lam_hat": (N, 2), "lam_tilde": (N, 2),
    }


FAMILIES = tuple(_family_sizes(3))


@dataclass
class PddState:
    """Primal copies, multipliers per equality family, and the penalty.

    Array index ``i`` is time slot ``i + 1``.  ``vbr``, ``vt`` and ``vd`` are
    length-N with entry 0 unused (``vt[0] = 0``: nothing flown before slot 1);
    ``vb`` holds the N-1 per-slot squared displacements and ``st[0]`` is unused.
    """

    q: np.ndarray
    qd: np.ndarray
    qb: np.ndarray
    qh: np.ndarray
    qt: np.ndarray
    ps: np.ndarray
    pr: np.ndarray
    P: np.ndarray
    dS: np.ndarray
    dD: np.ndarray
    t: np.ndarray
    th: np.ndarray
    tb: np.ndarray
    tL: np.ndarray
    ss: np.ndarray
    sr: np.ndarray
    sbs: np.ndarray
    sbr: np.ndarray
    vb: np.ndarray
    vbr: np.ndarray
    vt: np.ndarray
    vd: np.ndarray
    st: np.ndarray
    e: np.ndarray
    duals: dict
    rho: float
    q_decay: float = 0.8
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("penalty rho must be positive")
        if not 0 < self.q_decay < 1:
            raise ValueError("decay factor must lie in (0, 1)")

    @property
    def N(self) -> int:
        return self.q.shape[0]

    def rk(self, family: str) -> float:
        """Penalty parameter of one equality family."""
        return self.rho * self.weights.get(family, 1.0)

    def copy(self) -> "PddState":
        kw = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        kw["duals"] = {k: v.copy() for k, v in self.duals.items()}
        kw["weights"] = dict(self.weights)
        return PddState(**kw)


def zero_duals(N: int) -> dict:
    return {k: np.zeros(s) for k, s in _family_sizes(N).items()}


def _prefix_vt(vt: np.ndarray, N: int) -> np.ndarray:
    """Cumulative squared displacement entering energy row m = 1..N."""
    out = np.empty(N)
    out[:-1] = vt[1:]
    out[-1] = vt[-1]
    return out


def consistent_state(q, ps, pr, P, sc: Scenario, rho: float, q_decay: float = 0.8,
                     weights: dict | None = None) -> PddState:
    """All copies and auxiliaries set exactly from physical (q, p_s, p_r, P_s); zero duals."""
    u = Units.of(sc)
    N = sc.N
    q = np.asarray(q, float) / LQ
    ps = np.asarray(ps, float) / sc.p_max_s
    pr = np.asarray(pr, float) / sc.p_max_r
    P = np.asarray(P, float) / sc.P_max_s
    dS = u.H2 + np.sum((q - u.qS) ** 2, axis=1)
    dD = u.H2 + np.sum((q - u.qD) ** 2, axis=1)
    dP = u.H2 + np.sum((q - u.qP) ** 2, axis=1)
    tL = -np.sqrt(dP)
    t = np.exp(u.alpha * tL)
    th = t * P
    tb = u.A1 * th + u.B1 * t
    ss = ps * u.Gs / dS
    sr = pr * u.Gr / dD
    sbs = np.log2(1 + ss)
    sbr = np.log2(1 + sr)
    vb = np.sum(np.diff(q, axis=0) ** 2, axis=1)
    vt = np.concatenate([[0.0], np.cumsum(vb)])
    st = np.zeros(N)
    st[1:] = np.cumsum(sbr[1:]) - np.cumsum(sbs[:-1])
    m = np.arange(1, N + 1)
    e = -u.kappa * _prefix_vt(vt, N) + np.cumsum(tb) + m * u.B2
    return PddState(
        q=q, qd=q.copy(), qb=q.copy(), qh=q.copy(), qt=q.copy(),
        ps=ps, pr=pr, P=P, dS=dS, dD=dD, t=t, th=th, tb=tb, tL=tL,
        ss=ss, sr=sr, sbs=sbs, sbr=sbr, vb=vb, vbr=vt.copy(), vt=vt, vd=vt.copy(),
        st=st, e=e, duals=zero_duals(N), rho=rho, q_decay=q_decay, weights=dict(weights or {}),
    )


# --- objective, residuals, augmented Lagrangian --------------------------------

def _den(s: PddState, u: Units) -> float:
    return u.ks * np.sum(s.ps[:-1]) + u.kr * np.sum(s.pr[1:]) + u.k0


def _pe_num(s: PddState, u: Units) -> float:
    return float(np.sum(u.A1 * s.th + u.B1 * s.t + u.B2))


def surrogate_objective(s: PddState, u: Units, gamma: float) -> float:
    ee = np.sum(s.sbr[1:]) / _den(s, u)
    pe = _pe_num(s, u) / (u.cE * np.sum(s.P))
    return float(ee + gamma * pe)


def residuals(s: PddState, u: Units) -> dict:
    N = s.N
    m = np.arange(1, N + 1)
    return {
        "mu_D": s.pr * u.Gr - s.sr * s.dD,
        "mu_S": s.ps * u.Gs - s.ss * s.dS,
        "xi_S": s.t * s.P - s.th,
        "xi_L": np.log(s.t) - u.alpha * s.tL,
        "zeta_r": np.log2(1 + s.sr[1:]) - s.sbr[1:],
        "zeta_s": np.log2(1 + s.ss[:-1]) - s.sbs[:-1],
        "zeta_i": np.cumsum(s.sbr[1:]) - np.cumsum(s.sbs[:-1]) - s.st[1:],
        "zeta_e": -u.kappa * _prefix_vt(s.vt, N) + np.cumsum(s.tb) + m * u.B2 - s.e,
        "eta": s.tb - u.A1 * s.th - u.B1 * s.t,
        "tau_bar": s.vbr[1:] - s.vt[:-1] - s.vb,
        "tau": s.vbr[1:] - s.vd[1:],
        "tau_tilde": s.vt[1:] - s.vd[1:],
        "lam_dot": s.qd - s.q,
        "lam_bar": s.qb - s.q,
        "lam_hat": s.qh - s.q,
        "lam_tilde": s.qt - s.qb,
    }


def penalty(s: PddState, u: Units) -> float:
    r = residuals(s, u)
    return float(sum(np.sum((r[k] + s.rk(k) * s.duals[k]) ** 2) / (2 * s.rk(k)) for k in r))


def al_value(s: PddState, u: Units, gamma: float) -> float:
    return surrogate_objective(s, u, gamma) - penalty(s, u)


def constraint_violation(s: PddState, u: Units) -> float:
    return float(max(np.max(np.abs(v)) for v in residuals(s, u).values()))


# --- one-constraint QCQP ------------------------------------------------------

def solve_qcqp1(A, b, At, ct, d, iters: int = 200):
    """Batched ``min x'Ax + b'x  s.t.  x'At x + ct'x + d = 0`` with A positive definite.

    Stationarity gives ``x(lam) = -(2A + 2 lam At)^-1 (b + lam ct)``; in the
    basis that simultaneously diagonalises A and At the constraint residual is
    decreasing in ``lam`` over the interval where ``A + lam At`` stays positive
    definite, so its unique root is found by bisection and polished by Newton.
    Returns ``(x, lam)``.
    """
    A = np.asarray(A, float)
    K, n = b.shape
    L = np.linalg.cholesky(A)
    Li = np.linalg.inv(L)
    M = Li @ At @ np.swapaxes(Li, 1, 2)
    M = 0.5 * (M + np.swapaxes(M, 1, 2))
    lam_i, U = np.linalg.eigh(M)
    T = np.swapaxes(Li, 1, 2) @ U                       # x = T y
    bb = np.einsum("kji,kj->ki", T, b)
    cc = np.einsum("kji,kj->ki", T, ct)

    pos = np.where(lam_i > 1e-14, -1.0 / np.where(lam_i > 1e-14, lam_i, 1.0), -np.inf)
    neg = np.where(lam_i < -1e-14, -1.0 / np.where(lam_i < -1e-14, lam_i, -1.0), np.inf)
    lo = pos.max(axis=1)
    hi = neg.min(axis=1)

    def y_of(lam):
        return -(bb + lam[:, None] * cc) / (2 * (1 + lam[:, None] * lam_i))

    def h(lam):
        y = y_of(lam)
        return np.sum(lam_i * y * y + cc * y, axis=1) + d

    # map the open interval (lo, hi) onto (0, 1)
    scale = 1.0 + np.abs(np.where(np.isfinite(lo), lo, 0)) + np.abs(np.where(np.isfinite(hi), hi, 0))

    def lam_of(tau):
        fl, fh = np.isfinite(lo), np.isfinite(hi)
        both = lo + tau * (hi - lo)
        lower = lo + scale * tau / (1 - tau)
        upper = hi - scale * (1 - tau) / tau
        free = scale * np.tan(np.pi * (tau - 0.5))
        return np.where(fl & fh, both, np.where(fl, lower, np.where(fh, upper, free)))

    a = np.zeros(K)
    z = np.ones(K)
    with np.errstate(all="ignore"):
        ha = h(lam_of(np.full(K, 1e-15)))
        hz = h(lam_of(np.full(K, 1 - 1e-15)))
        bad = ~((ha >= 0) & (hz <= 0))
        if np.any(bad):
            k = int(np.argmax(bad))
            raise QcqpError(
                f"constraint residual does not change sign on ({lo[k]:.3g}, {hi[k]:.3g}): "
                f"h(lo+) = {ha[k]:.3g}, h(hi-) = {hz[k]:.3g}"
            )
        for _ in range(iters):
            mid = 0.5 * (a + z)
            hm = h(lam_of(mid))
            a = np.where(hm > 0, mid, a)
            z = np.where(hm > 0, z, mid)
            if np.all(z - a < 1e-16):
                break
        lam = lam_of(0.5 * (a + z))
        for _ in range(3):
            y = y_of(lam)
            g = cc + 2 * lam_i * y
            dh = -np.sum(g * g / (2 * (1 + lam[:, None] * lam_i)), axis=1)
            step = np.where(dh < 0, h(lam) / dh, 0.0)
            cand = lam - step
            ok = (cand > lo) & (cand < hi) & (np.abs(h(cand)) <= np.abs(h(lam)))
            lam = np.where(ok, cand, lam)
    x = np.einsum("kij,kj->ki", T, y_of(lam))
    return x, lam


def _ls_rows(G, h):
    """Quadratic ``sum (G x + h)^2`` as ``(A, b, c)`` for ``x'Ax + b'x + c``."""
    A = np.swapaxes(G, 1, 2) @ G
    b = 2 * np.einsum("kri,kr->ki", G, h)
    c = np.sum(h * h, axis=1)
    return A, b, c


def _sphere(M, m0, l, l0):
    """``||M x + m0||^2 + l'x + l0`` as ``(At, ct, d)``."""
    At = np.swapaxes(M, 1, 2) @ M
    ct = 2 * np.einsum("kri,kr->ki", M, m0) + l
    d = np.sum(m0 * m0, axis=1) + l0
    return At, ct, d


# --- block updates ------------------------------------------------------------
#
# Each family k carries its own penalty rho_k = weight_k * rho.  With all
# weights 1 every update below reduces to the textbook single-rho form.

def _phi_log2(c, s_lo=0.0):
    """Upper bound on the curvature of (log2(1+s) - c)^2 over s >= s_lo, floored.

    With u = ln(1+s) the curvature is (2/ln2^2)(k - u)e^{-2u}, k = 1 + c ln2,
    whose only critical point is a minimum, so the sup over [u_lo, inf) is
    attained at u_lo (or is the limit 0).
    """
    k = 1 + LN2 * c
    ul = np.log1p(s_lo)
    return np.maximum(2 * (k - ul) * np.exp(-2 * ul) / LN2 ** 2, PHI_FLOOR)


def _mm_snr(shat, d, lin, c, ratio, shrink=0.0):
    """Minimiser of a majorizer of ``ratio (lin - s d)^2 + (log2(1+s) - c)^2``.

    The majorizer is valid on ``s >= shrink * shat`` and the step is projected
    onto that interval; ``shrink = 0`` is the plain bound over ``s >= 0``.
    """
    lo = shrink * shat
    phi = _phi_log2(c, lo)
    r = np.log2(1 + shat) - c
    num = phi * shat + 2 * ratio * d * lin - 2 * r / (LN2 * (1 + shat))
    return np.maximum(num / (2 * ratio * d * d + phi), lo)


def block1_update_s(s: PddState, u: Units, shrink: float = 0.0) -> None:
    D = s.duals
    rD, rS, rr, rs = s.rk("mu_D"), s.rk("mu_S"), s.rk("zeta_r"), s.rk("zeta_s")
    sr = np.zeros(s.N)
    sr[1:] = _mm_snr(s.sr[1:], s.dD[1:], s.pr[1:] * u.Gr + rD * D["mu_D"][1:],
                     s.sbr[1:] - rr * D["zeta_r"], rr / rD, shrink)
    ss = np.zeros(s.N)
    ss[:-1] = _mm_snr(s.ss[:-1], s.dS[:-1], s.ps[:-1] * u.Gs + rS * D["mu_S"][:-1],
                      s.sbs[:-1] - rs * D["zeta_s"], rs / rS, shrink)
    s.sr, s.ss = sr, ss


def _prefix_matrix(N: int) -> np.ndarray:
    """Rows a_m (m = 2..N) acting on x = [sbs_1..sbs_{N-1}, sbr_2..sbr_N]."""
    tri = np.tril(np.ones((N - 1, N - 1)))
    return np.hstack([-tri, tri])


def block2_update_sbar(s: PddState, u: Units, gamma: float, R_sum: float) -> None:
    """Exact minimiser via the single multiplier of the rate-sum constraint."""
    N, D = s.N, s.duals
    rr, rs, ri = s.rk("zeta_r"), s.rk("zeta_s"), s.rk("zeta_i")
    Am = _prefix_matrix(N)
    diag = np.concatenate([np.full(N - 1, 1 / rs), np.full(N - 1, 1 / rr)])
    B = 0.5 * (np.diag(diag) + Am.T @ Am / ri)
    a1 = np.concatenate([np.zeros(N - 1), -np.ones(N - 1)])
    bs = np.log2(1 + s.ss[:-1]) + rs * D["zeta_s"]
    br = np.log2(1 + s.sr[1:]) + rr * D["zeta_r"]
    am = s.st[1:] - ri * D["zeta_i"]
    b = -np.concatenate([bs / rs, br / rr]) - Am.T @ am / ri + a1 / _den(s, u)
    f = cho_factor(B)
    Bib = cho_solve(f, b)
    Bia = cho_solve(f, a1)
    if 0.5 * a1 @ Bib >= R_sum:
        x = -0.5 * Bib
    else:
        lam = (2 * R_sum - a1 @ Bib) / (a1 @ Bia)
        x = -0.5 * (Bib + lam * Bia)
    s.sbs = np.concatenate([x[:N - 1], [0.0]])
    s.sbr = np.concatenate([[0.0], x[N - 1:]])


def block3_update_comm_powers(s: PddState, u: Units) -> None:
    """Linearize -f_EE (concave in the powers) and project the stationary point."""
    D = s.duals
    rD, rS = s.rk("mu_D"), s.rk("mu_S")
    den = _den(s, u)
    S = np.sum(s.sbr[1:])
    gs, gr = S * u.ks / den ** 2, S * u.kr / den ** 2
    ps = (s.ss * s.dS - rS * D["mu_S"]) / u.Gs - rS * gs / u.Gs ** 2
    pr = (s.sr * s.dD - rD * D["mu_D"]) / u.Gr - rD * gr / u.Gr ** 2
    s.ps = np.clip(ps, 0, 1)
    s.pr = np.clip(pr, 0, 1)
    s.ps[-1] = 0.0
    s.pr[0] = 0.0


def block4_update_prefix(s: PddState, u: Units) -> None:
    N, D = s.N, s.duals
    st = np.zeros(N)
    st[1:] = np.minimum(np.cumsum(s.sbr[1:]) - np.cumsum(s.sbs[:-1]) + s.rk("zeta_i") * D["zeta_i"], 0.0)
    m = np.arange(1, N + 1)
    e = -u.kappa * _prefix_vt(s.vt, N) + np.cumsum(s.tb) + m * u.B2 + s.rk("zeta_e") * D["zeta_e"]
    s.st = st
    s.e = np.clip(e, u.e_lo, 0.0)


def _solve_copy_block(rows, w_coef, w_const, w_rho, centre, H2, squared):
    """Per-slot QCQP-1 over (c, w), c a 2-D copy.

    ``rows`` is a list of (coef, h[K,2], rho_k) giving penalised residuals
    ``coef * c + h``; the scalar residual is ``w_coef * w + w_const`` with
    penalty ``w_rho``.  The constraint is ``H2 + ||c - centre||^2 = w`` or,
    with ``squared``, ``= w^2``.
    """
    K = w_coef.size
    R = 2 * len(rows) + 1
    G = np.zeros((K, R, 3))
    h = np.zeros((K, R))
    for j, (coef, hj, rk) in enumerate(rows):
        G[:, 2 * j, 0] = G[:, 2 * j + 1, 1] = coef / math.sqrt(rk)
        h[:, 2 * j:2 * j + 2] = hj / math.sqrt(rk)
    G[:, -1, 2] = w_coef / math.sqrt(w_rho)
    h[:, -1] = w_const / math.sqrt(w_rho)
    A, b, _ = _ls_rows(G, h)
    M = np.zeros((K, 2, 3))
    M[:, 0, 0] = M[:, 1, 1] = 1.0
    m0 = np.broadcast_to(-centre, (K, 2)).copy()
    if squared:
        At, ct, d = _sphere(M, m0, np.zeros((K, 3)), np.full(K, H2))
        At[:, 2, 2] -= 1.0
    else:
        lv = np.zeros((K, 3))
        lv[:, 2] = -1.0
        At, ct, d = _sphere(M, m0, lv, np.full(K, H2))
    x = np.zeros((K, 3))
    weak = np.abs(w_coef) < 1e-6
    if np.any(~weak):
        x[~weak], _ = solve_qcqp1(A[~weak], b[~weak], At[~weak], ct[~weak], d[~weak])
    if np.any(weak):
        # scalar absent from the objective: copy by least squares, scalar from the constraint
        wts = np.array([c * c / rk for c, _, rk in rows])
        tgt = np.stack([-hj[weak] / c for c, hj, _ in rows])
        c = np.einsum("j,jkd->kd", wts, tgt) / np.sum(wts)
        dist = H2 + np.sum((c - centre) ** 2, axis=1)
        x[weak, :2] = c
        x[weak, 2] = -np.sqrt(dist) if squared else dist
    return x[:, :2], x[:, 2]


def block5_update_copies(s: PddState, u: Units) -> None:
    D = s.duals
    rb, rt, rh, rd = s.rk("lam_bar"), s.rk("lam_tilde"), s.rk("lam_hat"), s.rk("lam_dot")
    # (q_bar, d_S): ties to q, to the tilde copy, and to p_s G = s_s d_S
    qb, dS = _solve_copy_block(
        [(1.0, -s.q + rb * D["lam_bar"], rb), (-1.0, s.qt + rt * D["lam_tilde"], rt)],
        -s.ss, s.ps * u.Gs + s.rk("mu_S") * D["mu_S"], s.rk("mu_S"), u.qS, u.H2, squared=False)
    # (q_hat, t_L): ties to q and to ln t = alpha t_L
    qh, tL = _solve_copy_block(
        [(1.0, -s.q + rh * D["lam_hat"], rh)],
        np.full(s.N, -u.alpha), np.log(s.t) + s.rk("xi_L") * D["xi_L"], s.rk("xi_L"),
        u.qP, u.H2, squared=True)
    # (q_dot, d_D)
    qd, dD = _solve_copy_block(
        [(1.0, -s.q + rd * D["lam_dot"], rd)],
        -s.sr, s.pr * u.Gr + s.rk("mu_D") * D["mu_D"], s.rk("mu_D"), u.qD, u.H2, squared=False)
    s.qb, s.dS, s.qh, s.tL, s.qd, s.dD = qb, dS, qh, tL, qd, dD


def _traj_slot(s: PddState, u: Units, i: int):
    """Rows and constraint of the trajectory sub-block for slot index ``i``.

    Variables (when free): q_i, qt_{i+1}, vbr_{i+1}, vt_i.
    """
    N, D = s.N, s.duals
    names = []
    if 1 <= i <= N - 2:
        names += ["q0", "q1"]
    if i <= N - 3:
        names += ["t0", "t1"]
    if i <= N - 2:
        names.append("vbr")
    if i >= 1:
        names.append("vt")
    pos = {k: j for j, k in enumerate(names)}
    n = len(names)
    rows, consts = [], []

    def row(fam: str, coefs: dict, const: float):
        rk = s.rk(fam)
        g = np.zeros(n)
        for k, v in coefs.items():
            g[pos[k]] = v
        rows.append(g / math.sqrt(rk))
        consts.append(const / math.sqrt(rk))

    q_fixed = u.qI if i == 0 else (u.qF if i == N - 1 else None)
    for fam, copy in (("lam_dot", s.qd), ("lam_bar", s.qb), ("lam_hat", s.qh)):
        for k in range(2):
            h = copy[i, k] + s.rk(fam) * D[fam][i, k]
            if q_fixed is None:
                row(fam, {f"q{k}": -1.0}, h)
            else:
                row(fam, {}, h - q_fixed[k])
    if i <= N - 3:
        for k in range(2):
            row("lam_tilde", {f"t{k}": 1.0}, -s.qb[i + 1, k] + s.rk("lam_tilde") * D["lam_tilde"][i + 1, k])
    if i <= N - 2:
        row("tau", {"vbr": 1.0}, -s.vd[i + 1] + s.rk("tau") * D["tau"][i])
        vt_term = {"vt": -1.0} if i >= 1 else {}
        row("tau_bar", {"vbr": 1.0, **vt_term}, -s.vb[i] + s.rk("tau_bar") * D["tau_bar"][i])
    if i >= 1:
        row("tau_tilde", {"vt": 1.0}, -s.vd[i] + s.rk("tau_tilde") * D["tau_tilde"][i - 1])
        T = np.cumsum(s.tb)
        for m in ((i, N) if i == N - 1 else (i,)):
            # energy row m (1-based) uses the displacement total vt_{m+1} = vt[i]
            row("zeta_e", {"vt": -u.kappa},
                T[m - 1] + m * u.B2 - s.e[m - 1] + s.rk("zeta_e") * D["zeta_e"][m - 1])
    G = np.array(rows).reshape(len(rows), n)
    h = np.array(consts)
    con = None
    if i <= N - 2:
        M = np.zeros((2, n))
        m0 = np.zeros(2)
        for k in range(2):
            if "t0" in pos:
                M[k, pos[f"t{k}"]] += 1.0
            else:
                m0[k] += u.qF[k] if i + 1 == N - 1 else s.qt[i + 1, k]
            if q_fixed is None:
                M[k, pos[f"q{k}"]] -= 1.0
            else:
                m0[k] -= q_fixed[k]
        lvec = np.zeros(n)
        lvec[pos["vbr"]] = -1.0
        if "vt" in pos:
            lvec[pos["vt"]] = 1.0
        con = (M, m0, lvec)
    return tuple(names), G, h, con


def block6_update_traj(s: PddState, u: Units) -> None:
    N = s.N
    groups: dict = {}
    for i in range(N):
        names, G, h, con = _traj_slot(s, u, i)
        groups.setdefault((names, con is None, G.shape[0]), []).append((i, G, h, con))
    q, qt, vbr, vt = s.q.copy(), s.qt.copy(), s.vbr.copy(), s.vt.copy()
    for (names, free, _), items in groups.items():
        G = np.stack([it[1] for it in items])
        h = np.stack([it[2] for it in items])
        A, b, _ = _ls_rows(G, h)
        if free:
            x = -0.5 * np.linalg.solve(A, b[..., None])[..., 0]
        else:
            M = np.stack([it[3][0] for it in items])
            m0 = np.stack([it[3][1] for it in items])
            lv = np.stack([it[3][2] for it in items])
            At, ct, d = _sphere(M, m0, lv, np.zeros(len(items)))
            x, _ = solve_qcqp1(A, b, At, ct, d)
        pos = {k: j for j, k in enumerate(names)}
        for (i, *_), xi in zip(items, x):
            if "q0" in pos:
                q[i] = xi[[pos["q0"], pos["q1"]]]
            if "t0" in pos:
                qt[i + 1] = xi[[pos["t0"], pos["t1"]]]
            if "vbr" in pos:
                vbr[i + 1] = xi[pos["vbr"]]
            if "vt" in pos:
                vt[i] = xi[pos["vt"]]
    q[0], q[-1] = u.qI, u.qF
    qt[0], qt[-1] = u.qI, u.qF
    vt[0] = 0.0
    s.q, s.qt, s.vbr, s.vt = q, qt, vbr, vt


def _phi_log(c, t_lo, t_hi):
    # sup over [t_lo, t_hi] of (1 - (ln t - c)) / t^2; its only critical point is a minimum
    f = lambda t: (1 - (np.log(t) - c)) / t ** 2
    return np.maximum(np.maximum(f(t_lo), f(t_hi)), PHI_FLOOR)


def block7_update_laser_aux(s: PddState, u: Units, gamma: float) -> None:
    N, D = s.N, s.duals
    rS, rL, re, rE = s.rk("xi_S"), s.rk("xi_L"), s.rk("eta"), s.rk("zeta_e")
    sumP = np.sum(s.P)
    tt = s.t
    c = u.alpha * s.tL - rL * D["xi_L"]
    phi = _phi_log(c, u.t_min, u.t_max)
    a = 0.5 * (s.P ** 2 / rS + u.B1 ** 2 / re + phi / rL)
    b = (-gamma * u.B1 / (u.cE * sumP)
         + s.P * (rS * D["xi_S"] - s.th) / rS
         + (np.log(tt) - c) / (rL * tt)
         + (u.A1 * s.th - s.tb - re * D["eta"]) * u.B1 / re
         - phi * tt / rL)
    if np.any(a <= 0):
        raise PddError("non-positive curvature in the laser-efficiency update")
    s.t = np.clip(-0.5 * b / a, u.t_min, u.t_max)
    # t_hat: exact minimiser of its quadratic
    g = gamma * u.A1 / (u.cE * sumP)
    s.th = (((s.t * s.P + rS * D["xi_S"]) / rS + u.A1 * (s.tb - u.B1 * s.t + re * D["eta"]) / re + g)
            / (1 / rS + u.A1 ** 2 / re))
    # t_breve: coupled through the energy prefix sums, one small linear solve
    Lm = np.tril(np.ones((N, N)))
    m = np.arange(1, N + 1)
    cvec = u.A1 * s.th + u.B1 * s.t - re * D["eta"]
    fvec = u.kappa * _prefix_vt(s.vt, N) - m * u.B2 + s.e - rE * D["zeta_e"]
    s.tb = np.linalg.solve(np.eye(N) / re + Lm.T @ Lm / rE, cvec / re + Lm.T @ fvec / rE)


def block8_update_speed_laserpower(s: PddState, u: Units, gamma: float) -> None:
    D = s.duals
    rt, rtt, rtb, rS = s.rk("tau"), s.rk("tau_tilde"), s.rk("tau_bar"), s.rk("xi_S")
    vd = s.vd.copy()
    vd[1:] = ((s.vbr[1:] + rt * D["tau"]) / rt + (s.vt[1:] + rtt * D["tau_tilde"]) / rtt) / (1 / rt + 1 / rtt)
    s.vd = vd
    s.vb = np.clip(s.vbr[1:] - s.vt[:-1] + rtb * D["tau_bar"], 0.0, u.V2)
    # linearize -gamma f_PE (concave in P) at the current beacon powers
    g = gamma * _pe_num(s, u) / (u.cE * np.sum(s.P) ** 2)
    A = s.t ** 2 / (2 * rS)
    b = s.t * (rS * D["xi_S"] - s.th) / rS + g
    s.P = np.clip(-0.5 * b / A, u.Pmin, 1.0)


def inner_sweep(s: PddState, u: Units, gamma: float, R_sum: float, shrink: float = 0.0) -> None:
    block1_update_s(s, u, shrink)
    block2_update_sbar(s, u, gamma, R_sum)
    block3_update_comm_powers(s, u)
    block4_update_prefix(s, u)
    block5_update_copies(s, u)
    block6_update_traj(s, u)
    block7_update_laser_aux(s, u, gamma)
    block8_update_speed_laserpower(s, u, gamma)


def dual_and_penalty_update(s: PddState, u: Units) -> None:
    r = residuals(s, u)
    for k, v in r.items():
        s.duals[k] = s.duals[k] + v / s.rk(k)
    s.rho *= s.q_decay

# --- driver -------------------------------------------------------------------

DEFAULT_WEIGHTS = {"mu_D": 1e6, "mu_S": 1e6, "zeta_e": 147.0, "eta": 0.0093, "xi_L": 1e-2}


@dataclass
class PddOptions:
    """Loop controls.  ``weights`` multiplies rho per residual family; the
    defaults balance the families so no single block stalls the sweep."""

    q_decay: float = 0.8
    rho0: float | None = None
    inner_tol_factor: float = 1e-5
    max_inner: int = 50
    max_outer: int = 200
    max_total_inner: int = 3000
    viol_tol: float = 1e-4
    obj_tol: float = 1e-4
    min_outer: int = 3
    feas_tol: float = 1e-6
    gamma: float | None = None
    weights: dict | None = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    snr_shrink: float = 0.5


@dataclass
class PddRecord:
    outer: int
    inner_total: int
    objective: float
    al: float
    violation: float
    rho: float


@dataclass
class PddTrace:
    records: list = field(default_factory=list)
    converged: bool = False
    total_inner: int = 0
    repaired: str = "none"

    @property
    def violations(self) -> list:
        return [r.violation for r in self.records]

    @property
    def objectives(self) -> list:
        return [r.objective for r in self.records]


def physical(s: PddState, sc: Scenario) -> tuple[Trajectory, PowerSchedule]:
    q = s.q * LQ
    q[0], q[-1] = sc.qI, sc.qF
    pw = PowerSchedule(p_s=s.ps * sc.p_max_s, p_r=s.pr * sc.p_max_r, P_s=s.P * sc.P_max_s)
    return Trajectory(q), pw


def initialize(sc: Scenario, opts: PddOptions | None = None, traj: Trajectory | None = None,
               powers: PowerSchedule | None = None) -> PddState:
    """Same feasible start as the CCCP solver, copies consistent, duals zero."""
    opts = opts or PddOptions()
    gamma = sc.gamma_weight if opts.gamma is None else opts.gamma
    st = cccp.initialize(sc, cccp.CccpOptions(gamma=gamma), traj, powers)
    obj0 = st.value(gamma)
    rho0 = opts.rho0 if opts.rho0 is not None else 10.0 / (1.0 + abs(obj0))
    return consistent_state(st.q, st.p_s, st.p_r, st.P_s, sc, rho0, opts.q_decay, opts.weights)


def _rescale_relay(traj, pw, sc, tol):
    """Largest uniform relay-power factor in [1 - tol, 1] restoring information causality."""
    if check_info_causality(traj, pw, sc) == 0:
        return pw
    lo, hi = 1.0 - tol, 1.0
    trial = PowerSchedule(pw.p_s, pw.p_r * lo, pw.P_s)
    if check_info_causality(traj, trial, sc) > 0:
        return pw
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if check_info_causality(traj, PowerSchedule(pw.p_s, pw.p_r * mid, pw.P_s), sc) > 0:
            hi = mid
        else:
            lo = mid
    return PowerSchedule(pw.p_s, pw.p_r * lo, pw.P_s)


def project(s: PddState, sc: Scenario, opts: PddOptions, gamma: float):
    """Snap copies to the primal point and make it exactly feasible.

    The primal point is rounded into the power boxes; then one bounded relay
    power rescale fixes tiny causality excess.  Anything larger goes through
    the slack-penalised restoration of the CCCP module.  Returns
    ``(traj, powers, how)``.
    """
    traj, pw = physical(s, sc)
    pw = PowerSchedule(
        p_s=np.clip(pw.p_s, 0, sc.p_max_s), p_r=np.clip(pw.p_r, 0, sc.p_max_r),
        P_s=np.clip(pw.P_s, sc.P_min_s, sc.P_max_s),
    )
    pw.p_s[-1] = 0.0
    pw.p_r[0] = 0.0
    if check_feasibility(traj, pw, sc, opts.feas_tol).feasible:
        return traj, pw, "none"
    pw2 = _rescale_relay(traj, pw, sc, opts.viol_tol)
    if check_feasibility(traj, pw2, sc, opts.feas_tol).feasible:
        return traj, pw2, "rescale"
    copts = cccp.CccpOptions(gamma=gamma, feas_tol=opts.feas_tol)
    st = cccp.tight_state(traj.waypoints, pw.p_s, pw.p_r, pw.P_s, sc)
    try:
        st = cccp._restore(st, sc, copts)
    except cccp.InitializationError as exc:
        viol = constraint_violation(s, Units.of(sc))
        raise PddError(f"final iterate (violation {viol:.3g}) could not be made feasible: {exc}") from None
    return st.trajectory, st.powers, "restore"


def run(s: PddState, sc: Scenario, opts: PddOptions, callback=None) -> PddTrace:
    """Twin loop on ``s`` in place; returns the convergence trace."""
    u = Units.of(sc)
    gamma = sc.gamma_weight if opts.gamma is None else opts.gamma
    trace = PddTrace()
    for outer in range(opts.max_outer):
        al = al_value(s, u, gamma)
        for _ in range(opts.max_inner):
            inner_sweep(s, u, gamma, sc.R_sum, opts.snr_shrink)
            trace.total_inner += 1
            new = al_value(s, u, gamma)
            done = abs(new - al) < opts.inner_tol_factor * s.rho
            al = new
            if done or trace.total_inner >= opts.max_total_inner:
                break
        viol = constraint_violation(s, u)
        rec = PddRecord(outer, trace.total_inner, surrogate_objective(s, u, gamma), al, viol, s.rho)
        trace.records.append(rec)
        log.debug("pdd outer %d: obj %.6g viol %.3g rho %.3g", outer, rec.objective, viol, s.rho)
        if callback is not None:
            callback(rec)
        if not np.isfinite(al):
            raise PddError(f"augmented Lagrangian became non-finite at outer iteration {outer}")
        prev = trace.records[-2].objective if len(trace.records) > 1 else math.inf
        settled = abs(rec.objective - prev) <= opts.obj_tol * (1 + abs(rec.objective))
        if viol < opts.viol_tol and settled and outer + 1 >= opts.min_outer:
            trace.converged = True
            break
        if trace.total_inner >= opts.max_total_inner:
            break
        dual_and_penalty_update(s, u)
    return trace


def solve(sc: Scenario, opts: PddOptions | None = None, init: PddState | None = None, callback=None):
    """Run the PDD method; returns ``(traj, powers, metrics, trace)``.

    ``trace.converged`` is False when the outer cap was hit first; the point
    returned is still projected to exact feasibility.
    """
    opts = opts or PddOptions()
    gamma = sc.gamma_weight if opts.gamma is None else opts.gamma
    s = init.copy() if init is not None else initialize(sc, opts)
    trace = run(s, sc, opts, callback)
    traj, pw, how = project(s, sc, opts, gamma)
    trace.repaired = how
    return traj, pw, objective(traj, pw, sc, gamma), trace
