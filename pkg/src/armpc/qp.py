"""Dense convex QP solver based on operator splitting (ADMM).

Solves problems of the form

    minimize    0.5 * z' H z + f' z
    subject to  lo <= G z <= hi

where H is symmetric positive semidefinite and the bounds may contain
+/-inf entries.  The solver alternates an equality-constrained quadratic
step with a projection onto the bound box.  The constraint rows are
equilibrated, the cost is normalized to unit magnitude (residual
tolerances apply to the normalized problem), and the penalty parameter
adapts to the primal/dual residual ratio with refactorization on large
changes.  Problem setup (scaling, Gram matrix) is cached on the matrix
bytes so families of structurally identical problems re-solve cheaply.
"""

from __future__ import annotations

import hashlib
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

__all__ = [
    "QpProblem",
    "QpSolution",
    "QpStatus",
    "QpSolver",
    "solve_qp",
    "DEFAULT_TOL",
    "DEFAULT_CAP",
]

DEFAULT_TOL = 1e-6
DEFAULT_CAP = 4000

# ADMM constants
_REG = 1e-9            # diagonal regularization added to H before factorizing
_ALPHA = 1.6           # over-relaxation
_CHECK_EVERY = 5       # residual/termination check interval (iterations)
_RHO_TRIGGER = 5.0     # refactor when rho drifts by this factor
_RHO_MIN, _RHO_MAX = 1e-6, 1e6
_PINF_TOL = 1e-9       # relative tolerance of the infeasibility certificate
_DIVERGE_LIMIT = 1e8   # scaled-residual divergence backstop
_DIVERGE_STREAK = 100


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    ITERATION_CAP = "iteration_cap"
    INFEASIBLE = "infeasible"


def _as_float_array(a, name, ndim):
    arr = np.ascontiguousarray(np.asarray(a, dtype=float))
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class QpProblem:
    """One box/inequality constrained QP instance.

    Attributes
    ----------
    H : (d, d) ndarray
        Symmetric PSD cost matrix.
    f : (d,) ndarray
        Linear cost vector.
    G : (q, d) ndarray
        Constraint matrix; ``q`` may be zero.
    lo, hi : (q,) ndarray
        Lower/upper constraint bounds, -inf/+inf allowed.
    """

    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        H = _as_float_array(self.H, "H", 2)
        f = _as_float_array(self.f, "f", 1)
        G = _as_float_array(self.G, "G", 2)
        lo = _as_float_array(self.lo, "lo", 1)
        hi = _as_float_array(self.hi, "hi", 1)
        d = H.shape[0]
        if H.shape != (d, d):
            raise ValueError(f"H must be square, got shape {H.shape}")
        if f.shape != (d,):
            raise ValueError(f"f has length {f.shape[0]}, expected {d}")
        if G.shape[1] != d:
            raise ValueError(f"G has {G.shape[1]} columns, expected {d}")
        q = G.shape[0]
        if lo.shape != (q,) or hi.shape != (q,):
            raise ValueError(f"lo/hi must have length {q}")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(f)) and np.all(np.isfinite(G))):
            raise ValueError("H, f and G entries must be finite")
        asym = float(np.max(np.abs(H - H.T))) if d else 0.0
        scale = max(1.0, float(np.max(np.abs(H))) if d else 1.0)
        if asym > 1e-10 * scale:
            raise ValueError(f"H is not symmetric (asymmetry {asym:.3e})")
        if np.any(lo > hi):
            raise ValueError("lo > hi for at least one constraint row")
        object.__setattr__(self, "H", np.ascontiguousarray(0.5 * (H + H.T)))
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def n_constraints(self) -> int:
        return self.G.shape[0]


@dataclass
class QpSolution:
    z_star: np.ndarray
    status: QpStatus
    iterations: int
    objective: float
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


# ---------------------------------------------------------------------------
# ADMM iteration loop.  The numpy version is the reference implementation;
# the numba version mirrors it with explicit loops and is used when numba
# imports (set ARMPC_NO_NUMBA=1 to force the numpy path).  Scaled-row
# multipliers relate to the original rows by lam_i = d_i * rho * u_i.
# Status codes: 0 converged, 1 cap reached, 2 infeasible.
# ---------------------------------------------------------------------------

def _admm_loop_numpy(H, GtG, f, Gs, lo_s, hi_s, d_row, lo_u, hi_u,
                     rho0, cap, tol, check_every):
    d = H.shape[0]
    q = Gs.shape[0]
    dinv = 1.0 / d_row
    rho = rho0
    L = np.linalg.cholesky(H + rho * GtG)
    z = np.zeros(d)
    y = np.clip(np.zeros(q), lo_s, hi_s)
    u = np.zeros(q)
    GsT = np.ascontiguousarray(Gs.T)
    best_z = np.zeros(d)
    best_obj = np.inf
    have_best = False
    lam_mark = np.zeros(q)
    diverge_streak = 0
    status = 1
    it = 0
    while it < cap:
        it += 1
        rhs = rho * (GsT @ (y - u)) - f
        z = scipy.linalg.cho_solve((L, True), rhs, check_finite=False)
        gz = Gs @ z
        gz_rel = _ALPHA * gz + (1.0 - _ALPHA) * y
        y = np.clip(gz_rel + u, lo_s, hi_s)
        u = u + gz_rel - y
        if it % check_every == 0 or it == cap:
            viol_s = gz - np.clip(gz, lo_s, hi_s)
            r_prim = float(np.max(np.abs(viol_s * dinv)))
            r_dual = float(np.max(np.abs(H @ z + f + GsT @ (rho * u))))
            if r_prim <= tol and r_dual <= tol:
                status = 0
                break
            if r_prim <= tol:
                obj = 0.5 * float(z @ (H @ z)) + float(f @ z)
                if obj < best_obj:
                    best_obj = obj
                    best_z = z.copy()
                    have_best = True
            # primal infeasibility certificate from the dual increment
            dlam = (rho * u - lam_mark) * d_row
            lam_mark = rho * u
            nlam = float(np.max(np.abs(dlam)))
            if nlam > 1e-14:
                eps = _PINF_TOL * nlam
                if float(np.max(np.abs(GsT @ (dlam * dinv)))) <= eps:
                    pos = np.maximum(dlam, 0.0)
                    neg = np.minimum(dlam, 0.0)
                    bad = bool(np.any((pos > eps) & np.isinf(hi_u))
                               or np.any((neg < -eps) & np.isinf(lo_u)))
                    if not bad:
                        supp = float(np.sum(np.where(np.isfinite(hi_u), hi_u, 0.0) * pos)
                                     + np.sum(np.where(np.isfinite(lo_u), lo_u, 0.0) * neg))
                        if supp <= -eps:
                            status = 2
                            break
            if r_prim > _DIVERGE_LIMIT or r_dual > _DIVERGE_LIMIT:
                diverge_streak += 1
                if diverge_streak >= _DIVERGE_STREAK:
                    status = 2
                    break
            else:
                diverge_streak = 0
            # residual-balancing penalty adaptation
            p_ref = max(float(np.max(np.abs(gz))), float(np.max(np.abs(y))), 1e-10)
            d_ref = max(float(np.max(np.abs(H @ z))), float(np.max(np.abs(f))),
                        float(np.max(np.abs(GsT @ (rho * u)))), 1e-10)
            ratio = math.sqrt((r_prim / p_ref) / max(r_dual / d_ref, 1e-16))
            rho_new = min(max(rho * ratio, _RHO_MIN), _RHO_MAX)
            if rho_new > rho * _RHO_TRIGGER or rho_new < rho / _RHO_TRIGGER:
                u = u * (rho / rho_new)  # keeps the multiplier rho*u continuous
                rho = rho_new
                L = np.linalg.cholesky(H + rho * GtG)
    if status == 1 and have_best:
        z = best_z
    lam = rho * u * d_row
    return z, lam, status, it


def _make_jit_loop():
    from numba import njit

    @njit(cache=True)
    def loop(H, GtG, f, Gs, lo_s, hi_s, d_row, lo_u, hi_u, rho0, cap, tol, check_every):
        d = H.shape[0]
        q = Gs.shape[0]
        rho = rho0
        L = np.zeros((d, d))
        K = H + rho * GtG
        # dense Cholesky (lower)
        for i in range(d):
            for j in range(i + 1):
                s = K[i, j]
                for k2 in range(j):
                    s -= L[i, k2] * L[j, k2]
                if i == j:
                    L[i, i] = math.sqrt(max(s, 1e-300))
                else:
                    L[i, j] = s / L[j, j]
        z = np.zeros(d)
        w = np.zeros(d)
        y = np.zeros(q)
        for i in range(q):
            y[i] = min(max(0.0, lo_s[i]), hi_s[i])
        u = np.zeros(q)
        gz = np.zeros(q)
        best_z = np.zeros(d)
        best_obj = np.inf
        have_best = False
        lam_mark = np.zeros(q)
        diverge_streak = 0
        status = 1
        it = 0
        while it < cap:
            it += 1
            for i in range(d):
                s = -f[i]
                for j in range(q):
                    s += rho * Gs[j, i] * (y[j] - u[j])
                w[i] = s
            # substitution with the lower Cholesky factor
            for i in range(d):
                s = w[i]
                for j in range(i):
                    s -= L[i, j] * w[j]
                w[i] = s / L[i, i]
            for i in range(d - 1, -1, -1):
                s = w[i]
                for j in range(i + 1, d):
                    s -= L[j, i] * z[j]
                z[i] = s / L[i, i]
            for i in range(q):
                s = 0.0
                for j in range(d):
                    s += Gs[i, j] * z[j]
                gz[i] = s
                rel = _ALPHA * s + (1.0 - _ALPHA) * y[i]
                yi = rel + u[i]
                if yi < lo_s[i]:
                    yi = lo_s[i]
                elif yi > hi_s[i]:
                    yi = hi_s[i]
                y[i] = yi
                u[i] = u[i] + rel - yi
            if it % check_every == 0 or it == cap:
                r_prim = 0.0
                p_ref = 1e-10
                for i in range(q):
                    v = gz[i]
                    if abs(v) > p_ref:
                        p_ref = abs(v)
                    if abs(y[i]) > p_ref:
                        p_ref = abs(y[i])
                    if v < lo_s[i]:
                        v = (lo_s[i] - v) / d_row[i]
                    elif v > hi_s[i]:
                        v = (v - hi_s[i]) / d_row[i]
                    else:
                        v = 0.0
                    if v > r_prim:
                        r_prim = v
                r_dual = 0.0
                d_ref = 1e-10
                for i in range(d):
                    hz = 0.0
                    for j in range(d):
                        hz += H[i, j] * z[j]
                    gl = 0.0
                    for j in range(q):
                        gl += Gs[j, i] * rho * u[j]
                    if abs(hz) > d_ref:
                        d_ref = abs(hz)
                    if abs(gl) > d_ref:
                        d_ref = abs(gl)
                    if abs(f[i]) > d_ref:
                        d_ref = abs(f[i])
                    if abs(hz + f[i] + gl) > r_dual:
                        r_dual = abs(hz + f[i] + gl)
                if r_prim <= tol and r_dual <= tol:
                    status = 0
                    break
                if r_prim <= tol:
                    obj = 0.0
                    for i in range(d):
                        s = 0.0
                        for j in range(d):
                            s += H[i, j] * z[j]
                        obj += z[i] * 0.5 * s + f[i] * z[i]
                    if obj < best_obj:
                        best_obj = obj
                        for i in range(d):
                            best_z[i] = z[i]
                        have_best = True
                nlam = 0.0
                for i in range(q):
                    dl = (rho * u[i] - lam_mark[i]) * d_row[i]
                    if abs(dl) > nlam:
                        nlam = abs(dl)
                if nlam > 1e-14:
                    eps = _PINF_TOL * nlam
                    gmax = 0.0
                    for i in range(d):
                        s = 0.0
                        for j in range(q):
                            s += Gs[j, i] * (rho * u[j] - lam_mark[j])
                        if abs(s) > gmax:
                            gmax = abs(s)
                    if gmax <= eps:
                        bad = False
                        supp = 0.0
                        for i in range(q):
                            dl = (rho * u[i] - lam_mark[i]) * d_row[i]
                            if dl > eps and np.isinf(hi_u[i]):
                                bad = True
                                break
                            if dl < -eps and np.isinf(lo_u[i]):
                                bad = True
                                break
                            if dl > 0 and not np.isinf(hi_u[i]):
                                supp += hi_u[i] * dl
                            elif dl < 0 and not np.isinf(lo_u[i]):
                                supp += lo_u[i] * dl
                        if not bad and supp <= -eps:
                            status = 2
                            break
                for i in range(q):
                    lam_mark[i] = rho * u[i]
                if r_prim > _DIVERGE_LIMIT or r_dual > _DIVERGE_LIMIT:
                    diverge_streak += 1
                    if diverge_streak >= _DIVERGE_STREAK:
                        status = 2
                        break
                else:
                    diverge_streak = 0
                ratio = math.sqrt((r_prim / p_ref) / max(r_dual / d_ref, 1e-16))
                rho_new = min(max(rho * ratio, _RHO_MIN), _RHO_MAX)
                if rho_new > rho * _RHO_TRIGGER or rho_new < rho / _RHO_TRIGGER:
                    for i in range(q):
                        u[i] = u[i] * (rho / rho_new)
                    rho = rho_new
                    for i in range(d):
                        for j in range(d):
                            K[i, j] = H[i, j] + rho * GtG[i, j]
                    for i in range(d):
                        for j in range(i + 1):
                            s = K[i, j]
                            for k2 in range(j):
                                s -= L[i, k2] * L[j, k2]
                            if i == j:
                                L[i, i] = math.sqrt(max(s, 1e-300))
                            else:
                                L[i, j] = s / L[j, j]
        if status == 1 and have_best:
            for i in range(d):
                z[i] = best_z[i]
        lam = np.zeros(q)
        for i in range(q):
            lam[i] = rho * u[i] * d_row[i]
        return z, lam, status, it

    return loop


_JIT_LOOP = None
if not os.environ.get("ARMPC_NO_NUMBA"):
    try:
        _JIT_LOOP = _make_jit_loop()
    except ImportError:  # pragma: no cover
        _JIT_LOOP = None


class QpSolver:
    """ADMM QP solver with cached problem preparation.

    A solver instance keeps an LRU cache of prepared problem data
    (equilibrated constraint matrix, its Gram matrix and the cost
    normalization) keyed on the matrix bytes, so repeated solves of
    structurally identical problems skip the setup work.  Solves are
    otherwise independent and instances share no mutable state.
    """

    def __init__(self, rho: float | None = None, cache_size: int = 128,
                 use_jit: bool | None = None):
        self.rho = rho
        self.cache_size = cache_size
        if use_jit is None:
            use_jit = _JIT_LOOP is not None
        self._loop = _JIT_LOOP if (use_jit and _JIT_LOOP is not None) else _admm_loop_numpy
        self._cache: OrderedDict[bytes, tuple] = OrderedDict()

    def _prepare(self, p: QpProblem):
        key = (hashlib.blake2b(p.H.tobytes(), digest_size=16).digest()
               + hashlib.blake2b(p.G.tobytes(), digest_size=16).digest()
               + repr(self.rho).encode())
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        # cost normalization: residual tolerances apply to the problem
        # with H scaled to unit magnitude
        s_cost = max(float(np.max(np.abs(p.H))) if p.dim else 1.0, 1e-10)
        H = p.H / s_cost + _REG * np.eye(p.dim)
        G = p.G
        q = G.shape[0]
        if q:
            row_inf = np.max(np.abs(G), axis=1)
            d_row = 1.0 / np.maximum(row_inf, 1e-10)
            Gs = np.ascontiguousarray(d_row[:, None] * G)
        else:
            d_row = np.zeros(0)
            Gs = np.zeros((0, p.dim))
        GtG = np.ascontiguousarray(Gs.T @ Gs)
        if self.rho is None:
            h_scale = max(float(np.trace(H)) / max(p.dim, 1), 1e-6)
            g_scale = max(float(np.trace(GtG)) / max(p.dim, 1), 1e-6) if q else 1.0
            rho = float(np.sqrt(h_scale / g_scale))
            rho = min(max(rho, 1e-3), 1e3)
        else:
            rho = float(self.rho)
        try:
            np.linalg.cholesky(H + max(rho, 1e-6) * GtG)
        except np.linalg.LinAlgError as exc:
            raise ValueError("H is not positive semidefinite") from exc
        prepared = (np.ascontiguousarray(H), GtG, Gs,
                    np.ascontiguousarray(d_row), rho, s_cost)
        self._cache[key] = prepared
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return prepared

    def solve(self, p: QpProblem, cap: int = DEFAULT_CAP,
              tol: float = DEFAULT_TOL) -> QpSolution:
        if cap < 1:
            raise ValueError("cap must be >= 1")
        if tol <= 0:
            raise ValueError("tol must be > 0")
        H, GtG, Gs, d_row, rho, s_cost = self._prepare(p)
        f = np.ascontiguousarray(p.f / s_cost)
        q = Gs.shape[0]
        if q == 0:
            z = np.linalg.solve(H, -f)
            obj = 0.5 * float(z @ (p.H @ z)) + float(p.f @ z)
            return QpSolution(z, QpStatus.OPTIMAL, 0, obj, np.zeros(0))
        lo_s = np.ascontiguousarray(d_row * p.lo)
        hi_s = np.ascontiguousarray(d_row * p.hi)
        z, lam, code, it = self._loop(
            H, GtG, f, Gs, lo_s, hi_s, d_row,
            np.ascontiguousarray(p.lo), np.ascontiguousarray(p.hi),
            rho, cap, tol, _CHECK_EVERY)
        z = np.asarray(z)
        status = (QpStatus.OPTIMAL, QpStatus.ITERATION_CAP, QpStatus.INFEASIBLE)[code]
        obj = 0.5 * float(z @ (p.H @ z)) + float(p.f @ z)
        return QpSolution(z, status, int(it), obj, s_cost * np.asarray(lam))


_default_solver = QpSolver()


def solve_qp(p: QpProblem, cap: int = DEFAULT_CAP, tol: float = DEFAULT_TOL) -> QpSolution:
    """Solve a QpProblem with the shared default solver instance."""
    return _default_solver.solve(p, cap=cap, tol=tol)
