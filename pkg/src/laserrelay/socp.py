"""Small dense second-order cone program solver.

Problems are stated as

    maximize    c^T x
    subject to  A x = b
                G x <= h
                F_k x + g_k in Q^{m_k}      (first entry is the cone "t")
                lb <= x <= ub

and solved with a homogeneous self-dual embedding, Nesterov-Todd scaling and
Mehrotra predictor-corrector steps.  Each iteration factors the sparse
quasi-definite KKT system once and refines its solves iteratively.

A point is declared optimal when the primal and dual residuals (relative to
the data norms) and the absolute gap ``s^T z`` are all below ``tol``.  On
badly scaled instances that bar can sit below machine precision; once the
iterates stop improving, the best point that meets the same tolerances in
relative form (residuals also scaled by the iterate norms, gap by the
objective) is accepted as optimal instead.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"


class MalformedProgram(ValueError):
    pass


@dataclass
class Cone:
    """Second-order cone constraint ``F x + g`` in Q^k, rows ordered (t, u)."""

    F: sp.csr_matrix
    g: np.ndarray
    tag: str = ""

    @property
    def dim(self) -> int:
        return self.F.shape[0]


@dataclass
class ConicProgram:
    n: int
    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    cones: list = field(default_factory=list)
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    eq_tags: list = field(default_factory=list)
    ineq_tags: list = field(default_factory=list)
    var_names: list = field(default_factory=list)

    def __post_init__(self):
        n = self.n
        self.c = np.asarray(self.c, dtype=float)
        self.A = sp.csr_matrix(self.A if self.A is not None else (0, n), dtype=float)
        self.G = sp.csr_matrix(self.G if self.G is not None else (0, n), dtype=float)
        self.b = np.asarray(self.b if self.b is not None else np.zeros(0), dtype=float)
        self.h = np.asarray(self.h if self.h is not None else np.zeros(0), dtype=float)
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)

    def validate(self):
        n = self.n
        if self.c.shape != (n,):
            raise MalformedProgram(f"objective has shape {self.c.shape}, expected ({n},)")
        if self.A.shape[1] != n or self.G.shape[1] != n:
            raise MalformedProgram("constraint matrices have the wrong column count")
        if self.A.shape[0] != self.b.shape[0] or self.G.shape[0] != self.h.shape[0]:
            raise MalformedProgram("row counts of A/b or G/h disagree")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise MalformedProgram("bounds have the wrong length")
        if np.any(self.lb > self.ub):
            bad = int(np.argmax(self.lb > self.ub))
            raise MalformedProgram(f"lb > ub for variable {bad}")
        for k, cone in enumerate(self.cones):
            if cone.F.shape[1] != n:
                raise MalformedProgram(f"cone {k} ({cone.tag}) references columns outside 0..{n - 1}")
            if cone.dim < 2 or cone.g.shape != (cone.dim,):
                raise MalformedProgram(f"cone {k} ({cone.tag}) must have dimension >= 2")
        for arr in (self.c, self.b, self.h):
            if not np.all(np.isfinite(arr)):
                raise MalformedProgram("non-finite data in program")

    def objective(self, x) -> float:
        return float(self.c @ x)

    def cone_counts(self) -> Counter:
        return Counter(cone.dim for cone in self.cones)

    def tag_counts(self) -> dict:
        """Counts per tag: linear rows (eq + ineq) and cones keyed by dimension."""
        out: dict = {}
        for t in list(self.eq_tags) + list(self.ineq_tags):
            out.setdefault(t, Counter())["linear"] += 1
        for cone in self.cones:
            out.setdefault(cone.tag, Counter())[cone.dim] += 1
        return out


class ConicBuilder:
    """Incremental construction of a :class:`ConicProgram`.

    Variables are allocated in named blocks; rows are given as
    ``{column: coefficient}`` mappings (or index/coef arrays).
    """

    def __init__(self):
        self.n = 0
        self.blocks: dict[str, np.ndarray] = {}
        self.var_names: list[str] = []
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._c: dict[int, float] = {}
        self._eq: list = []
        self._ineq: list = []
        self._cones: list = []

    def add_var(self, name: str, size: int = 1, lb=-np.inf, ub=np.inf) -> np.ndarray:
        idx = np.arange(self.n, self.n + size)
        self.n += size
        self.blocks[name] = idx
        self.var_names.extend(f"{name}[{i}]" for i in range(size))
        self._lb.extend(np.broadcast_to(np.asarray(lb, dtype=float), (size,)).tolist())
        self._ub.extend(np.broadcast_to(np.asarray(ub, dtype=float), (size,)).tolist())
        return idx

    def set_bounds(self, idx, lb=None, ub=None):
        for j, i in enumerate(np.atleast_1d(idx)):
            if lb is not None:
                self._lb[i] = float(np.broadcast_to(lb, np.shape(np.atleast_1d(idx)))[j])
            if ub is not None:
                self._ub[i] = float(np.broadcast_to(ub, np.shape(np.atleast_1d(idx)))[j])

    def fix(self, idx, value):
        self.set_bounds(idx, lb=value, ub=value)

    def objective(self, terms: dict):
        for i, v in terms.items():
            self._c[int(i)] = self._c.get(int(i), 0.0) + float(v)

    def add_eq(self, terms: dict, rhs: float, tag: str = ""):
        self._eq.append((dict(terms), float(rhs), tag))

    def add_le(self, terms: dict, rhs: float, tag: str = ""):
        """sum(terms) <= rhs."""
        self._ineq.append((dict(terms), float(rhs), tag))

    def add_ge(self, terms: dict, rhs: float, tag: str = ""):
        self.add_le({i: -v for i, v in terms.items()}, -rhs, tag)

    def add_soc(self, rows: list, tag: str = ""):
        """``rows`` is a list of (terms, constant) giving t, u_1, ..., u_k."""
        self._cones.append((rows, tag))

    def add_rotated(self, x, y, u_rows: list, tag: str = ""):
        """Hyperbolic constraint ``sum(u_i^2) <= x * y`` with x, y >= 0.

        ``x`` and ``y`` are (terms, const) affine forms.  Encoded as
        ``||(2 u, x - y)|| <= x + y``, a cone of dimension len(u) + 2.
        """
        (tx, cx), (ty, cy) = x, y
        top = _add_terms(tx, ty), cx + cy
        diff = _add_terms(tx, {i: -v for i, v in ty.items()}), cx - cy
        rows = [top] + [({i: 2 * v for i, v in t.items()}, 2 * c0) for t, c0 in u_rows] + [diff]
        self.add_soc(rows, tag)

    def build(self) -> ConicProgram:
        n = self.n
        c = np.zeros(n)
        for i, v in self._c.items():
            c[i] = v
        A, b = _rows_to_csr([r[0] for r in self._eq], n), np.array([r[1] for r in self._eq])
        G, h = _rows_to_csr([r[0] for r in self._ineq], n), np.array([r[1] for r in self._ineq])
        cones = []
        for rows, tag in self._cones:
            F = _rows_to_csr([t for t, _ in rows], n)
            g = np.array([c0 for _, c0 in rows], dtype=float)
            # stored as "F x + g in Q": the rows were given as affine forms already
            cones.append(Cone(F, g, tag))
        cp = ConicProgram(
            n=n, c=c, A=A, b=b if b.size else np.zeros(0), G=G, h=h if h.size else np.zeros(0),
            cones=cones, lb=np.array(self._lb), ub=np.array(self._ub),
            eq_tags=[r[2] for r in self._eq], ineq_tags=[r[2] for r in self._ineq],
            var_names=list(self.var_names),
        )
        cp.validate()
        return cp


def _add_terms(a: dict, b: dict) -> dict:
    out = dict(a)
    for i, v in b.items():
        out[i] = out.get(i, 0.0) + v
    return out


def _rows_to_csr(rows: list, n: int) -> sp.csr_matrix:
    data, ri, ci = [], [], []
    for r, terms in enumerate(rows):
        for i, v in terms.items():
            if v != 0.0:
                ri.append(r)
                ci.append(int(i))
                data.append(float(v))
    return sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))


# --- solution container -----------------------------------------------------

@dataclass
class ConicSolution:
    status: Status
    x: np.ndarray
    y: np.ndarray                 # equality duals (user rows)
    z_ineq: np.ndarray            # G x <= h duals
    z_cones: list                 # one dual vector per cone
    z_lower: np.ndarray           # bound duals (0 where no bound)
    z_upper: np.ndarray
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    objective: float

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


# --- cone algebra ------------------------------------------------------------

class _Layout:
    """Standard-form bookkeeping: inequality rows [lp | soc groups by dim]."""

    def __init__(self, cp: ConicProgram):
        n = cp.n
        fixed = np.isfinite(cp.lb) & np.isfinite(cp.ub) & (cp.lb == cp.ub)
        lo = np.where(np.isfinite(cp.lb) & ~fixed)[0]
        hi = np.where(np.isfinite(cp.ub) & ~fixed)[0]
        fx = np.where(fixed)[0]
        self.lo, self.hi, self.fx = lo, hi, fx
        eye = sp.identity(n, format="csr")
        self.n_eq_user = cp.A.shape[0]
        self.A = sp.vstack([cp.A, eye[fx]], format="csr")
        self.b = np.concatenate([cp.b, cp.lb[fx]])
        lp_G = sp.vstack([cp.G, -eye[lo], eye[hi]], format="csr")
        lp_h = np.concatenate([cp.h, -cp.lb[lo], cp.ub[hi]])
        self.n_ineq_user = cp.G.shape[0]
        self.l = lp_G.shape[0]
        dims = sorted({cone.dim for cone in cp.cones})
        self.groups = []            # (dim, cone indices in original order)
        blocks_G, blocks_h = [lp_G], [lp_h]
        for k in dims:
            ids = [i for i, cone in enumerate(cp.cones) if cone.dim == k]
            self.groups.append((k, ids))
            for i in ids:
                blocks_G.append(-cp.cones[i].F)
                blocks_h.append(cp.cones[i].g)
        self.G = sp.vstack(blocks_G, format="csr") if blocks_G else sp.csr_matrix((0, n))
        self.h = np.concatenate(blocks_h)
        self.m = self.G.shape[0]
        self.nu = self.l + sum(len(ids) for _, ids in self.groups)
        # slices into the inequality vector
        off = self.l
        self.slices = []
        for k, ids in self.groups:
            self.slices.append((k, off, len(ids)))
            off += k * len(ids)
        # sparse pattern for the block-diagonal scaling matrix
        rows, cols = [np.arange(self.l)], [np.arange(self.l)]
        for k, off, cnt in self.slices:
            base = off + k * np.arange(cnt)[:, None, None]
            r = base + np.arange(k)[None, :, None]
            c = base + np.arange(k)[None, None, :]
            rows.append(np.broadcast_to(r, (cnt, k, k)).ravel())
            cols.append(np.broadcast_to(c, (cnt, k, k)).ravel())
        self.w_rows = np.concatenate(rows)
        self.w_cols = np.concatenate(cols)

    def soc_views(self, v):
        return [v[off:off + k * cnt].reshape(cnt, k) for k, off, cnt in self.slices]

    def unit(self):
        e = np.zeros(self.m)
        e[: self.l] = 1.0
        for k, off, cnt in self.slices:
            e[off:off + k * cnt:k] = 1.0
        return e


def _jdot(u, v):
    return u[:, 0] * v[:, 0] - np.sum(u[:, 1:] * v[:, 1:], axis=1)


def _jnorm2(u):
    """u0^2 - ||u1||^2 in factored form, accurate near the cone boundary."""
    n1 = np.linalg.norm(u[:, 1:], axis=1)
    return (u[:, 0] - n1) * (u[:, 0] + n1)


def _max_step(L: _Layout, v, dv):
    """Largest alpha with v + alpha dv in the cone (v interior)."""
    alpha = np.inf
    lp, dlp = v[: L.l], dv[: L.l]
    neg = dlp < 0
    if np.any(neg):
        alpha = min(alpha, float(np.min(-lp[neg] / dlp[neg])))
    for s, ds in zip(L.soc_views(v), L.soc_views(dv)):
        a = _jdot(ds, ds)
        b = 2 * _jdot(s, ds)
        c = _jnorm2(s)
        for ai, bi, ci, s0, d0 in zip(a, b, c, s[:, 0], ds[:, 0]):
            alpha = min(alpha, _soc_step(ai, bi, ci, s0, d0))
    return alpha


def _soc_step(a, b, c, s0, d0):
    # f(alpha) = a alpha^2 + b alpha + c must stay >= 0 with s0 + alpha d0 >= 0; c > 0.
    tiny = 1e-300
    if abs(a) <= 1e-14 * (abs(b) + abs(c) + tiny):
        if b < 0:
            return -c / b
        if d0 < 0:
            return -s0 / d0
        return np.inf
    disc = b * b - 4 * a * c
    if a < 0:
        return (-b - np.sqrt(max(disc, 0.0))) / (2 * a)
    # a > 0: direction lies in +cone or -cone
    if d0 >= 0:
        return np.inf
    if disc < 0:
        return -s0 / d0
    q = -0.5 * (b - np.sqrt(disc))  # b < 0 here
    r1, r2 = q / a, c / q
    return min(r for r in (r1, r2) if r > 0) if max(r1, r2) > 0 else -s0 / d0


class _Scaling:
    """Nesterov-Todd scaling W with W z = W^{-1} s = lambda."""

    def __init__(self, L: _Layout, s, z):
        self.L = L
        self.lp_w = np.sqrt(s[: L.l] / z[: L.l])
        self.soc = []
        for sv, zv in zip(L.soc_views(s), L.soc_views(z)):
            ns = np.sqrt(np.maximum(_jnorm2(sv), 1e-300))
            nz = np.sqrt(np.maximum(_jnorm2(zv), 1e-300))
            sb = sv / ns[:, None]
            zb = zv / nz[:, None]
            gam = np.sqrt(np.maximum((1 + np.sum(sb * zb, axis=1)) / 2, 1e-300))
            jz = zb.copy()
            jz[:, 1:] *= -1
            wb = (sb + jz) / (2 * gam[:, None])
            eta = np.sqrt(ns / nz)
            self.soc.append((wb[:, 0], wb[:, 1:], eta))

    def apply(self, v, inverse=False):
        L = self.L
        out = np.empty_like(v)
        out[: L.l] = v[: L.l] / self.lp_w if inverse else v[: L.l] * self.lp_w
        for (a, bvec, eta), (k, off, cnt) in zip(self.soc, L.slices):
            blk = v[off:off + k * cnt].reshape(cnt, k)
            v0, v1 = blk[:, 0], blk[:, 1:]
            bv = np.sum(bvec * v1, axis=1)
            sgn = -1.0 if inverse else 1.0
            r0 = a * v0 + sgn * bv
            r1 = sgn * v0[:, None] * bvec + v1 + (bv / (1 + a))[:, None] * bvec
            fac = (1 / eta) if inverse else eta
            res = np.concatenate([r0[:, None], r1], axis=1) * fac[:, None]
            out[off:off + k * cnt] = res.ravel()
        return out

    def matrix(self, inverse: bool = False) -> sp.csr_matrix:
        L = self.L
        sgn = -1.0 if inverse else 1.0
        vals = [1.0 / self.lp_w if inverse else self.lp_w]
        for (a, bvec, eta), (k, off, cnt) in zip(self.soc, L.slices):
            blk = np.empty((cnt, k, k))
            blk[:, 0, 0] = a
            blk[:, 0, 1:] = sgn * bvec
            blk[:, 1:, 0] = sgn * bvec
            blk[:, 1:, 1:] = np.eye(k - 1)[None] + bvec[:, :, None] * bvec[:, None, :] / (1 + a)[:, None, None]
            blk *= (1 / eta if inverse else eta)[:, None, None]
            vals.append(blk.ravel())
        return sp.csr_matrix((np.concatenate(vals), (L.w_rows, L.w_cols)), shape=(L.m, L.m))


def _circ(L: _Layout, u, v):
    """Jordan product u o v."""
    out = np.empty_like(u)
    out[: L.l] = u[: L.l] * v[: L.l]
    for (k, off, cnt) in L.slices:
        ub = u[off:off + k * cnt].reshape(cnt, k)
        vb = v[off:off + k * cnt].reshape(cnt, k)
        r0 = np.sum(ub * vb, axis=1)
        r1 = ub[:, :1] * vb[:, 1:] + vb[:, :1] * ub[:, 1:]
        out[off:off + k * cnt] = np.concatenate([r0[:, None], r1], axis=1).ravel()
    return out


def _circ_solve(L: _Layout, lam, d):
    """x with lam o x = d."""
    out = np.empty_like(d)
    out[: L.l] = d[: L.l] / lam[: L.l]
    for (k, off, cnt) in L.slices:
        lb = lam[off:off + k * cnt].reshape(cnt, k)
        db = d[off:off + k * cnt].reshape(cnt, k)
        l0, l1 = lb[:, 0], lb[:, 1:]
        n1 = np.linalg.norm(l1, axis=1)
        det = (l0 - n1) * (l0 + n1)
        x0 = (l0 * db[:, 0] - np.sum(l1 * db[:, 1:], axis=1)) / det
        x1 = (db[:, 1:] - x0[:, None] * l1) / l0[:, None]
        out[off:off + k * cnt] = np.concatenate([x0[:, None], x1], axis=1).ravel()
    return out


def _cone_violation(L: _Layout, v) -> np.ndarray:
    viol = [np.maximum(-v[: L.l], 0.0)]
    for blk in L.soc_views(v):
        viol.append(np.maximum(np.linalg.norm(blk[:, 1:], axis=1) - blk[:, 0], 0.0))
    return np.concatenate(viol) if viol else np.zeros(0)


def _shift_into_cone(L: _Layout, v):
    worst = 0.0
    if L.l:
        worst = max(worst, float(np.max(-v[: L.l])))
    for blk in L.soc_views(v):
        if blk.size:
            worst = max(worst, float(np.max(np.linalg.norm(blk[:, 1:], axis=1) - blk[:, 0])))
    if worst >= 0:
        v = v + (1 + worst) * L.unit()
    return v


class _KKT:
    """Sparse factorisation of [[0, A', G'], [A, 0, 0], [G, 0, -W'W]].

    The quasi-definite matrix is regularised by a small static diagonal and
    the solution refined against the exact operator.
    """

    def __init__(self, L: _Layout, W: "_Scaling | None", reg: float = 1e-9):
        self.L = L
        self.W = W
        n = L.G.shape[1]
        p = L.A.shape[0]
        m = L.m
        H = sp.identity(m, format="csc") if W is None else W.matrix(inverse=False) @ W.matrix(inverse=False)
        K = sp.bmat([
            [reg * sp.identity(n), L.A.T, L.G.T],
            [L.A, -reg * sp.identity(p), None],
            [L.G, None, -H - reg * sp.identity(m)],
        ], format="csc")
        self.n, self.p, self.m = n, p, m
        self.lu = spla.splu(K, permc_spec="COLAMD", diag_pivot_thresh=0.0,
                            options={"SymmetricMode": True})

    def _h(self, v):
        if self.W is None:
            return v
        return self.W.apply(self.W.apply(v))

    def _raw(self, rx, ry, rz):
        sol = self.lu.solve(np.concatenate([rx, ry, rz]))
        n, p = self.n, self.p
        return sol[:n], sol[n:n + p], sol[n + p:]

    def solve(self, rx, ry, rz, refine: int = 8):
        """Solve the unregularised system by iterative refinement."""
        L = self.L
        dx, dy, dz = self._raw(rx, ry, rz)
        scale = 1 + max(np.linalg.norm(rx), np.linalg.norm(ry), np.linalg.norm(rz))
        prev = np.inf
        for _ in range(refine):
            ex = rx - (L.A.T @ dy + L.G.T @ dz)
            ey = ry - L.A @ dx
            ez = rz - (L.G @ dx - self._h(dz))
            err = max(np.linalg.norm(ex), np.linalg.norm(ey), np.linalg.norm(ez))
            if err <= 1e-14 * scale or err > 0.5 * prev:
                break
            prev = err
            cx, cy, cz = self._raw(ex, ey, ez)
            dx, dy, dz = dx + cx, dy + cy, dz + cz
        return dx, dy, dz


def _split_duals(cp: ConicProgram, L: _Layout, y, z):
    n_eq = L.n_eq_user
    y_user = y[:n_eq]
    z_ineq = z[: L.n_ineq_user]
    z_lower = np.zeros(cp.n)
    z_upper = np.zeros(cp.n)
    off = L.n_ineq_user
    z_lower[L.lo] = z[off:off + len(L.lo)]
    off += len(L.lo)
    z_upper[L.hi] = z[off:off + len(L.hi)]
    # fixed variables: split the equality multiplier by sign
    yf = y[n_eq:]
    z_lower[L.fx] = np.maximum(-yf, 0.0)
    z_upper[L.fx] = np.maximum(yf, 0.0)
    z_cones = [None] * len(cp.cones)
    for (k, ids), (_, o, cnt) in zip(L.groups, L.slices):
        blk = z[o:o + k * cnt].reshape(cnt, k)
        for j, i in enumerate(ids):
            z_cones[i] = blk[j].copy()
    return y_user, z_ineq, z_cones, z_lower, z_upper


def _residuals(L: _Layout, c0, x, y, s, z):
    nb = max(1.0, float(np.linalg.norm(L.b)) if L.b.size else 0.0)
    nh = max(1.0, float(np.linalg.norm(L.h)) if L.h.size else 0.0)
    nc = max(1.0, float(np.linalg.norm(c0)))
    pres = 0.0
    if L.b.size:
        pres = max(pres, float(np.linalg.norm(L.A @ x - L.b)) / nb)
    if L.m:
        pres = max(pres, float(np.linalg.norm(L.G @ x + s - L.h)) / nh)
    dres = float(np.linalg.norm(L.A.T @ y + L.G.T @ z + c0)) / nc
    gap = abs(float(s @ z))
    return pres, dres, gap


def _relative_residuals(L: _Layout, c0, x, y, s, z):
    """As :func:`_residuals`, each term also scaled by the size of the iterate."""
    Ax, Gx, Aty, Gtz = L.A @ x, L.G @ x, L.A.T @ y, L.G.T @ z
    nrm = np.linalg.norm
    pres = 0.0
    if L.b.size:
        pres = float(nrm(Ax - L.b)) / max(1.0, nrm(L.b), nrm(Ax))
    if L.m:
        pres = max(pres, float(nrm(Gx + s - L.h)) / max(1.0, nrm(L.h), nrm(Gx), nrm(s)))
    dres = float(nrm(Aty + Gtz + c0)) / max(1.0, nrm(c0), nrm(Aty), nrm(Gtz))
    gap = abs(float(s @ z)) / max(1.0, abs(float(c0 @ x)), abs(float(L.b @ y + L.h @ z)))
    return pres, dres, gap


def solve(cp: ConicProgram, tol: float = 1e-8, max_iters: int = 100) -> ConicSolution:
    """Solve ``cp``; the status tells whether the returned point is usable."""
    cp.validate()
    # a diverging iterate shows up as a non-finite merit and is handled there
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _solve(cp, tol, max_iters)


def _solve(cp: ConicProgram, tol: float, max_iters: int) -> ConicSolution:
    L = _Layout(cp)
    c0 = -cp.c
    n, m = cp.n, L.m
    A, b, G, h = L.A, L.b, L.G, L.h

    kkt = _KKT(L, None)
    x, _, zr = kkt.solve(np.zeros(n), b, h)
    s = _shift_into_cone(L, -zr)
    _, y, z = kkt.solve(-c0, np.zeros(A.shape[0]), np.zeros(m))
    z = _shift_into_cone(L, z)
    tau, kappa = 1.0, 1.0
    e = L.unit()
    nu = L.nu

    status = Status.ITER_LIMIT
    it = 0
    best = (np.inf, x, y, z, s, tau)
    relaxed = None          # best iterate meeting the relative criteria
    stall = 0
    for it in range(max_iters + 1):
        rx = A.T @ y + G.T @ z + c0 * tau
        ry = A @ x - b * tau
        rz = G @ x + s - h * tau
        rt = kappa + c0 @ x + b @ y + h @ z
        mu = (s @ z + tau * kappa) / (nu + 1)

        pres, dres, gap = _residuals(L, c0, x / tau, y / tau, s / tau, z / tau)
        if pres <= tol and dres <= tol and gap <= tol:
            status = Status.OPTIMAL
            break
        merit = float(np.max([pres, dres, gap]))
        if not np.isfinite(merit):
            break
        rel = float(np.max(_relative_residuals(L, c0, x / tau, y / tau, s / tau, z / tau)))
        if rel <= tol and (relaxed is None or rel < relaxed[0]):
            relaxed = (rel, x.copy(), y.copy(), z.copy(), s.copy(), tau)
        if merit < best[0]:
            best = (merit, x.copy(), y.copy(), z.copy(), s.copy(), tau)
            stall = 0
        else:
            stall += 1
            if stall >= 5 and (best[0] <= 1e3 * tol or relaxed is not None):
                break
        hz_by = -(h @ z + b @ y)
        if hz_by > 0:
            if np.linalg.norm(A.T @ y + G.T @ z) / hz_by <= tol:
                status = Status.INFEASIBLE
                break
        cx = -(c0 @ x)
        if cx > 0:
            pr = max(np.linalg.norm(A @ x) if b.size else 0.0, np.linalg.norm(G @ x + s))
            if pr / cx <= tol:
                status = Status.UNBOUNDED
                break
        if it == max_iters:
            break

        W = _Scaling(L, s, z)
        lam = W.apply(z)
        try:
            kkt = _KKT(L, W)
        except (RuntimeError, ValueError):
            break
        u1 = kkt.solve(-c0, b, h)
        c_u1 = c0 @ u1[0] + b @ u1[1] + h @ u1[2]

        def direction(eta_, ds_rhs, dk_rhs):
            u0 = kkt.solve(-eta_ * rx, -eta_ * ry, -eta_ * rz - W.apply(_circ_solve(L, lam, ds_rhs)))
            dt = (-eta_ * rt - dk_rhs / tau - (c0 @ u0[0] + b @ u0[1] + h @ u0[2])) / (c_u1 - kappa / tau)
            dx = u0[0] + dt * u1[0]
            dy = u0[1] + dt * u1[1]
            dz = u0[2] + dt * u1[2]
            ds = W.apply(_circ_solve(L, lam, ds_rhs) - W.apply(dz))
            dk = (dk_rhs - kappa * dt) / tau
            return dx, dy, dz, ds, dt, dk

        def step_to_boundary(dz, ds, dt, dk):
            a = min(_max_step(L, s, ds), _max_step(L, z, dz))
            if dt < 0:
                a = min(a, -tau / dt)
            if dk < 0:
                a = min(a, -kappa / dk)
            return a

        # predictor
        aff = direction(1.0, -_circ(L, lam, lam), -tau * kappa)
        a_aff = min(1.0, step_to_boundary(aff[2], aff[3], aff[4], aff[5]))
        sigma = (1 - a_aff) ** 3
        # corrector
        corr = _circ(L, W.apply(aff[3], inverse=True), W.apply(aff[2]))
        ds_rhs = -_circ(L, lam, lam) - corr + sigma * mu * e
        dk_rhs = -tau * kappa - aff[4] * aff[5] + sigma * mu
        dx, dy, dz, ds, dt, dk = direction(1 - sigma, ds_rhs, dk_rhs)
        alpha = min(1.0, 0.99 * step_to_boundary(dz, ds, dt, dk))
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        tau = tau + alpha * dt
        kappa = kappa + alpha * dk

    if status is Status.INFEASIBLE:
        scale = -(h @ z + b @ y)
        xs, ys, zs, ss = x * np.nan, y / scale, z / scale, s * np.nan
    elif status is Status.UNBOUNDED:
        scale = -(c0 @ x)
        xs, ys, zs, ss = x / scale, y * np.nan, z * np.nan, s / scale
    else:
        if status is Status.ITER_LIMIT and relaxed is not None:
            status = Status.OPTIMAL
            _, x, y, z, s, tau = relaxed
        elif status is Status.ITER_LIMIT and np.isfinite(best[0]):
            _, x, y, z, s, tau = best
        xs, ys, zs, ss = x / tau, y / tau, z / tau, s / tau
    pres, dres, gap = _residuals(L, c0, xs, ys, ss, zs) if status not in (
        Status.INFEASIBLE, Status.UNBOUNDED) else (np.inf, np.inf, np.inf)
    y_user, z_ineq, z_cones, z_lo, z_hi = _split_duals(cp, L, ys, zs)
    return ConicSolution(
        status=status, x=xs, y=y_user, z_ineq=z_ineq, z_cones=z_cones,
        z_lower=z_lo, z_upper=z_hi, primal_residual=pres, dual_residual=dres,
        gap=gap, iterations=it, objective=float(cp.c @ xs) if status is not Status.INFEASIBLE else np.nan,
    )


def kkt_residuals(cp: ConicProgram, sol: ConicSolution) -> tuple[float, float, float]:
    """(primal, dual, gap) residuals of a primal-dual pair for ``cp``.

    Primal: equality error and cone-membership violation of the slacks,
    relative to the data norms.  Dual: stationarity error plus dual cone
    violation, relative to ``max(1, ||c||)``.  Gap: the complementarity
    ``s^T z`` (absolute), which scales with the objective.
    """
    L = _Layout(cp)
    x = sol.x
    s = L.h - L.G @ x
    y = np.concatenate([sol.y, sol.z_upper[L.fx] - sol.z_lower[L.fx]])
    z = np.concatenate([sol.z_ineq, sol.z_lower[L.lo], sol.z_upper[L.hi]]
                       + [sol.z_cones[i] for _, ids in L.groups for i in ids])
    c0 = -cp.c
    nb = max(1.0, float(np.linalg.norm(L.b)) if L.b.size else 0.0)
    nh = max(1.0, float(np.linalg.norm(L.h)) if L.h.size else 0.0)
    nc = max(1.0, float(np.linalg.norm(c0)))
    pres = float(np.linalg.norm(_cone_violation(L, s))) / nh
    if L.b.size:
        pres = max(pres, float(np.linalg.norm(L.A @ x - L.b)) / nb)
    dres = (float(np.linalg.norm(L.A.T @ y + L.G.T @ z + c0))
            + float(np.linalg.norm(_cone_violation(L, z)))) / nc
    gap = abs(float(s @ z))
    return pres, dres, gap


# --- conic benchmark format ---------------------------------------------------

def write_cbf(cp: ConicProgram, path) -> None:
    """Dump ``cp`` in the plain-text Conic Benchmark Format (CBF v3).

    Bounds are emitted as extra linear rows so any CBF reader sees the same
    feasible set.
    """
    cp.validate()
    n = cp.n
    eye = sp.identity(n, format="csr")
    lo = np.where(np.isfinite(cp.lb))[0]
    hi = np.where(np.isfinite(cp.ub))[0]
    blocks = []   # (kind, matrix M, vector v) meaning M x + v in kind
    if cp.A.shape[0]:
        blocks.append(("L=", cp.A, -cp.b))
    if cp.G.shape[0]:
        blocks.append(("L-", cp.G, -cp.h))
    if lo.size:
        blocks.append(("L+", eye[lo], -cp.lb[lo]))
    if hi.size:
        blocks.append(("L-", eye[hi], -cp.ub[hi]))
    for cone in cp.cones:
        blocks.append(("Q", cone.F, cone.g))
    total = sum(M.shape[0] for _, M, _ in blocks)
    lines = ["VER", "3", "", "OBJSENSE", "MAX", "", "VAR", f"{n} 1", f"F {n}", ""]
    lines += ["CON", f"{total} {len(blocks)}"] + [f"{k} {M.shape[0]}" for k, M, _ in blocks] + [""]
    obj = [(i, v) for i, v in enumerate(cp.c) if v != 0]
    if obj:
        lines += ["OBJACOORD", str(len(obj))] + [f"{i} {float(v)!r}" for i, v in obj] + [""]
    acoord, bcoord = [], []
    row0 = 0
    for _, M, v in blocks:
        Mc = sp.coo_matrix(M)
        acoord += [f"{row0 + r} {c} {float(val)!r}" for r, c, val in zip(Mc.row, Mc.col, Mc.data)]
        bcoord += [f"{row0 + r} {float(val)!r}" for r, val in enumerate(v) if val != 0]
        row0 += M.shape[0]
    if acoord:
        lines += ["ACOORD", str(len(acoord))] + acoord + [""]
    if bcoord:
        lines += ["BCOORD", str(len(bcoord))] + bcoord + [""]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def read_cbf(path) -> ConicProgram:
    """Parse a CBF file written by :func:`write_cbf` (L=, L-, L+, F, Q only)."""
    with open(path) as fh:
        tok = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    i = 0
    sense, n, blocks = "MAX", 0, []
    obj, acoord, bcoord = {}, [], {}
    while i < len(tok):
        key = tok[i]
        i += 1
        if key == "VER":
            i += 1
        elif key == "OBJSENSE":
            sense = tok[i]
            i += 1
        elif key == "VAR":
            n, k = map(int, tok[i].split())
            i += 1 + k
        elif key == "CON":
            _, k = map(int, tok[i].split())
            i += 1
            for _ in range(k):
                kind, cnt = tok[i].split()
                blocks.append((kind, int(cnt)))
                i += 1
        elif key == "OBJACOORD":
            k = int(tok[i])
            i += 1
            for _ in range(k):
                j, v = tok[i].split()
                obj[int(j)] = float(v)
                i += 1
        elif key == "ACOORD":
            k = int(tok[i])
            i += 1
            for _ in range(k):
                r, c, v = tok[i].split()
                acoord.append((int(r), int(c), float(v)))
                i += 1
        elif key == "BCOORD":
            k = int(tok[i])
            i += 1
            for _ in range(k):
                r, v = tok[i].split()
                bcoord[int(r)] = float(v)
                i += 1
        else:
            raise MalformedProgram(f"unsupported CBF section {key!r}")
    total = sum(c for _, c in blocks)
    M = sp.csr_matrix(([v for _, _, v in acoord], ([r for r, _, _ in acoord], [c for _, c, _ in acoord])),
                      shape=(total, n))
    vec = np.zeros(total)
    for r, v in bcoord.items():
        vec[r] = v
    c = np.zeros(n)
    for j, v in obj.items():
        c[j] = v
    if sense == "MIN":
        c = -c
    A_rows, b_vals, G_rows, h_vals, cones = [], [], [], [], []
    row = 0
    for kind, cnt in blocks:
        Mi, vi = M[row:row + cnt], vec[row:row + cnt]
        if kind == "L=":
            A_rows.append(Mi)
            b_vals.append(-vi)
        elif kind == "L-":
            G_rows.append(Mi)
            h_vals.append(-vi)
        elif kind == "L+":
            G_rows.append(-Mi)
            h_vals.append(vi)
        elif kind == "Q":
            cones.append(Cone(sp.csr_matrix(Mi), vi.copy()))
        else:
            raise MalformedProgram(f"unsupported CBF cone {kind!r}")
        row += cnt
    A = sp.vstack(A_rows, format="csr") if A_rows else sp.csr_matrix((0, n))
    G = sp.vstack(G_rows, format="csr") if G_rows else sp.csr_matrix((0, n))
    cp = ConicProgram(n=n, c=c, A=A, b=np.concatenate(b_vals) if b_vals else np.zeros(0),
                      G=G, h=np.concatenate(h_vals) if h_vals else np.zeros(0), cones=cones)
    cp.validate()
    return cp
