"""Condensed, input-parametrized MPC for one control cycle.

The horizon covers ``T`` steps but only ``P`` sample instants carry free
input variables; inputs at the remaining steps are linear interpolations
of the neighboring samples.  States are eliminated by substituting the
dynamics, so the decision vector is the stacked sampled inputs (length
n*P).  The tracking cost is accumulated at the sample instants only,
while state bounds are enforced at every step of the horizon.

Reference indexing convention: ``refs_x[k]`` is the reference for the
state at cycle-relative step ``k`` (``k = 0`` pairs with the current
state and contributes a constant cost term), and ``refs_u[k]`` pairs
with the input applied at step ``k``.
"""

from __future__ import annotations

import hashlib
import time
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .plants import DiscreteModel
from .qp import DEFAULT_CAP, DEFAULT_TOL, QpProblem, QpSolution, QpSolver, _default_solver

__all__ = [
    "MpcConfig",
    "MpcProblem",
    "CondensedDynamics",
    "ControlSolution",
    "interpolation_weights",
    "sample_instants",
    "interpolation_operator",
    "condense",
    "build_qp",
    "solve_mpc",
    "evaluate_cycle_cost",
    "relative_loss",
    "average_cost",
]


@dataclass(frozen=True)
class MpcConfig:
    """Tracking weights and horizon limit shared by all cycles."""

    Q: np.ndarray
    R: np.ndarray
    T_max: int
    ts: float

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        if Q.ndim == 1:
            Q = np.diag(Q)
        if R.ndim == 1:
            R = np.diag(R)
        for name, M in (("Q", Q), ("R", R)):
            if M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be square")
            if np.max(np.abs(M - M.T)) > 1e-10 * max(1.0, np.max(np.abs(M))):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")
        if self.T_max < 2:
            raise ValueError("T_max must be >= 2")
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "R", 0.5 * (R + R.T))


@dataclass
class MpcProblem:
    """One control cycle's data: model, current state, references, sizing."""

    model: DiscreteModel
    x_c: np.ndarray
    refs_x: np.ndarray
    refs_u: np.ndarray
    T: int
    P: int
    u_prev: np.ndarray

    def __post_init__(self):
        self.x_c = np.asarray(self.x_c, dtype=float)
        self.refs_x = np.asarray(self.refs_x, dtype=float)
        self.refs_u = np.asarray(self.refs_u, dtype=float)
        self.u_prev = np.asarray(self.u_prev, dtype=float)
        m, n = self.model.m, self.model.n
        if not (2 <= self.P <= self.T):
            raise ValueError(f"need 2 <= P <= T, got T={self.T}, P={self.P}")
        if self.x_c.shape != (m,):
            raise ValueError("x_c has wrong length")
        if self.refs_x.shape != (self.T, m):
            raise ValueError(f"refs_x must have shape ({self.T}, {m})")
        if self.refs_u.shape != (self.T, n):
            raise ValueError(f"refs_u must have shape ({self.T}, {n})")
        if self.u_prev.shape != (n,):
            raise ValueError("u_prev has wrong length")


@dataclass
class CondensedDynamics:
    """Stacked prediction x = S z + n_vec over the horizon."""

    S: np.ndarray
    n_vec: np.ndarray


@dataclass
class ControlSolution:
    z_star: np.ndarray
    u_first: np.ndarray
    full_inputs: np.ndarray
    qp: QpSolution
    cycle_cost: float
    solve_time: float


def sample_instants(T: int, P: int) -> np.ndarray:
    """Integer steps at which inputs are decision variables.

    The j-th sample sits at round(j * (T-1)/(P-1)); the first and last
    land on steps 0 and T-1 exactly.  Computed in integer arithmetic so
    the grid is exact whenever (T-1)/(P-1) is an integer.
    """
    if P < 2:
        raise ValueError("P must be >= 2")
    if P > T:
        raise ValueError("P must be <= T")
    j = np.arange(P, dtype=np.int64)
    return (2 * j * (T - 1) + (P - 1)) // (2 * (P - 1))


def interpolation_weights(T: int, P: int) -> list[tuple[int, int, float]]:
    """Per-step (previous sample, next sample, weight) triples.

    Step k between samples j and j+1 gets weight w = fractional position
    within the segment; w is exactly 0 at sample instants.  The terminal
    step maps to (P-1, P-1, 0).
    """
    kappa = sample_instants(T, P)
    out = []
    j = 0
    for k in range(T):
        if k == T - 1:
            out.append((P - 1, P - 1, 0.0))
            break
        while kappa[j + 1] <= k:
            j += 1
        gap = int(kappa[j + 1] - kappa[j])
        out.append((j, j + 1, (k - int(kappa[j])) / gap))
    return out


def interpolation_operator(T: int, P: int, n: int) -> np.ndarray:
    """(n*T, n*P) operator mapping sampled inputs to all-step inputs."""
    theta = np.zeros((n * T, n * P))
    eye = np.eye(n)
    for k, (kp, kn, w) in enumerate(interpolation_weights(T, P)):
        theta[k * n:(k + 1) * n, kp * n:(kp + 1) * n] += (1.0 - w) * eye
        if w != 0.0:
            theta[k * n:(k + 1) * n, kn * n:(kn + 1) * n] += w * eye
    return theta


# ---------------------------------------------------------------------------
# Per-(model, weights, T, P) build plan, cached: the expensive matrices do
# not depend on the cycle state or references.
# ---------------------------------------------------------------------------

@dataclass
class _CyclePlan:
    T: int
    P: int
    m: int
    n: int
    kappa: np.ndarray
    A_pows: list
    S: np.ndarray
    theta: np.ndarray
    H: np.ndarray
    G: np.ndarray
    Sx: np.ndarray      # S rows at the costed sample instants
    f_state: np.ndarray  # -2 * Sx' Qtil, applied to (r_til - n_til)
    r_diagblocks: np.ndarray  # R repeated, for the input cost part of f
    lo_fix: np.ndarray
    hi_fix: np.ndarray
    x_keep: np.ndarray  # state-bound rows retained in G


_plan_cache: OrderedDict[bytes, _CyclePlan] = OrderedDict()
_PLAN_CACHE_SIZE = 512


def _digest(*arrays) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.digest()


def _build_plan(model: DiscreteModel, cfg: MpcConfig, T: int, P: int) -> _CyclePlan:
    key = _digest(model.A_d, model.B_d, model.bounds.x_min, model.bounds.x_max,
                  model.bounds.u_min, model.bounds.u_max, model.bounds.du_min,
                  model.bounds.du_max, cfg.Q, cfg.R) + bytes([T, P])
    hit = _plan_cache.get(key)
    if hit is not None:
        _plan_cache.move_to_end(key)
        return hit
    m, n = model.m, model.n
    A_d, B_d = model.A_d, model.B_d
    A_pows = [np.eye(m)]
    for _ in range(T):
        A_pows.append(A_d @ A_pows[-1])
    # block lower-triangular prediction matrix (rows: x at steps 1..T)
    S_full = np.zeros((m * T, n * T))
    for row in range(T):
        S_full[row * m:(row + 1) * m, row * n:(row + 1) * n] = B_d
        if row:
            S_full[row * m:(row + 1) * m, :row * n] = (
                A_d @ S_full[(row - 1) * m:row * m, :row * n])
    theta = interpolation_operator(T, P, n)
    S = S_full @ theta
    kappa = sample_instants(T, P)
    # tracking cost: states at sample instants 1..P-1, inputs at all samples
    x_rows = []
    for j in range(1, P):
        blk = (int(kappa[j]) - 1) * m
        x_rows.extend(range(blk, blk + m))
    Sx = S[x_rows, :]
    Qtil = np.kron(np.eye(P - 1), cfg.Q)
    Rtil = np.kron(np.eye(P), cfg.R)
    H = 2.0 * (Sx.T @ Qtil @ Sx + Rtil)
    f_state = -2.0 * (Sx.T @ Qtil)
    # constraints: state bounds at all T steps, input bounds at samples,
    # rate bounds between consecutive samples (scaled by the step gap so
    # the per-step rate of the interpolated inputs is what is bounded),
    # and the first-sample rate against the previously applied input.
    b = model.bounds
    G_rate = np.zeros((n * (P - 1), n * P))
    lo_rate = np.zeros(n * (P - 1))
    hi_rate = np.zeros(n * (P - 1))
    for j in range(P - 1):
        gap = float(kappa[j + 1] - kappa[j])
        G_rate[j * n:(j + 1) * n, j * n:(j + 1) * n] = -np.eye(n)
        G_rate[j * n:(j + 1) * n, (j + 1) * n:(j + 2) * n] = np.eye(n)
        lo_rate[j * n:(j + 1) * n] = gap * b.du_min
        hi_rate[j * n:(j + 1) * n] = gap * b.du_max
    G_first = np.zeros((n, n * P))
    G_first[:, :n] = np.eye(n)
    # state rows whose bounds are infinite on both sides never bind; drop
    # them once here (they would only slow the solver down)
    x_keep = np.tile(np.isfinite(b.x_min) | np.isfinite(b.x_max), T)
    G = np.vstack([S[x_keep], np.eye(n * P), G_rate, G_first])
    lo_fix = np.concatenate([np.tile(b.x_min, T)[x_keep], np.tile(b.u_min, P),
                             lo_rate, np.full(n, np.nan)])
    hi_fix = np.concatenate([np.tile(b.x_max, T)[x_keep], np.tile(b.u_max, P),
                             hi_rate, np.full(n, np.nan)])
    plan = _CyclePlan(T=T, P=P, m=m, n=n, kappa=kappa, A_pows=A_pows, S=S,
                      theta=theta, H=H, G=G, Sx=Sx, f_state=f_state,
                      r_diagblocks=Rtil, lo_fix=lo_fix, hi_fix=hi_fix,
                      x_keep=x_keep)
    _plan_cache[key] = plan
    if len(_plan_cache) > _PLAN_CACHE_SIZE:
        _plan_cache.popitem(last=False)
    return plan


def condense(model: DiscreteModel, x_c, T: int, P: int,
             cfg: MpcConfig | None = None) -> CondensedDynamics:
    """Stacked prediction matrices for the parametrized horizon."""
    if cfg is None:
        cfg = MpcConfig(np.eye(model.m), np.eye(model.n), max(T, 2), model.ts)
    plan = _build_plan(model, cfg, T, P)
    x_c = np.asarray(x_c, dtype=float)
    n_vec = np.concatenate([plan.A_pows[j] @ x_c for j in range(1, T + 1)])
    return CondensedDynamics(S=plan.S, n_vec=n_vec)


def _assemble(plan: _CyclePlan, p: MpcProblem):
    m, n, T, P = plan.m, plan.n, plan.T, plan.P
    n_vec = np.concatenate([plan.A_pows[j] @ p.x_c for j in range(1, T + 1)])
    kap = plan.kappa
    r_til = p.refs_x[kap[1:]].reshape(-1)
    n_til = np.concatenate([n_vec[(int(kap[j]) - 1) * m:int(kap[j]) * m]
                            for j in range(1, P)])
    v_til = p.refs_u[kap].reshape(-1)
    f = plan.f_state @ (r_til - n_til) - 2.0 * (plan.r_diagblocks @ v_til)
    lo = plan.lo_fix.copy()
    hi = plan.hi_fix.copy()
    n_state = int(np.sum(plan.x_keep))
    lo[:n_state] -= n_vec[plan.x_keep]
    hi[:n_state] -= n_vec[plan.x_keep]
    b = p.model.bounds
    lo[-n:] = b.du_min + p.u_prev
    hi[-n:] = b.du_max + p.u_prev
    return n_vec, f, lo, hi


def build_qp(p: MpcProblem, cfg: MpcConfig) -> QpProblem:
    """Condensed QP over the sampled inputs for one cycle."""
    if p.T > cfg.T_max:
        raise ValueError(f"T={p.T} exceeds T_max={cfg.T_max}")
    plan = _build_plan(p.model, cfg, p.T, p.P)
    _, f, lo, hi = _assemble(plan, p)
    return QpProblem(H=plan.H, f=f, G=plan.G, lo=lo, hi=hi)


def evaluate_cycle_cost(p: MpcProblem, cfg: MpcConfig, z: np.ndarray,
                        full_inputs: np.ndarray) -> float:
    """Tracking cost of a candidate input plan, normalized by the horizon.

    Re-simulates the model (noiseless) under the interpolated inputs and
    accumulates the weighted state/input errors at every step of the
    horizon (the step-0 state term uses the current state), then divides
    by the horizon length.  Evaluating all steps -- not only the sampled
    instants the optimizer sees -- keeps the reported per-step cost
    comparable across different sample counts.
    """
    m = p.model.m
    x = p.x_c
    states = np.empty((p.T, m))
    states[0] = x
    for k in range(p.T - 1):
        x = p.model.A_d @ x + p.model.B_d @ full_inputs[k]
        states[k + 1] = x
    ex = p.refs_x - states
    eu = p.refs_u - full_inputs
    cost = float(np.sum((ex @ cfg.Q) * ex)) + float(np.sum((eu @ cfg.R) * eu))
    return cost / p.T


def solve_mpc(p: MpcProblem, cfg: MpcConfig, cap: int = DEFAULT_CAP,
              tol: float = DEFAULT_TOL,
              solver: QpSolver | None = None) -> ControlSolution:
    """Build and solve one cycle's QP; wall time covers build through u_first."""
    t0 = time.perf_counter()
    if p.T > cfg.T_max:
        raise ValueError(f"T={p.T} exceeds T_max={cfg.T_max}")
    plan = _build_plan(p.model, cfg, p.T, p.P)
    _, f, lo, hi = _assemble(plan, p)
    qp = (solver or _default_solver).solve(
        QpProblem(H=plan.H, f=f, G=plan.G, lo=lo, hi=hi), cap=cap, tol=tol)
    z = qp.z_star
    n = plan.n
    u_first = z[:n].copy()
    elapsed = time.perf_counter() - t0
    full_inputs = (plan.theta @ z).reshape(p.T, n)
    cost = evaluate_cycle_cost(p, cfg, z, full_inputs)
    return ControlSolution(z_star=z, u_first=u_first, full_inputs=full_inputs,
                           qp=qp, cycle_cost=cost, solve_time=elapsed)


def relative_loss(a: float, b: float) -> float:
    """Relative deviation |a - b| / b with a guarded zero baseline."""
    if b == 0.0:
        return 0.0 if a == 0.0 else np.inf
    return abs(a - b) / b


def average_cost(cycle_costs) -> float:
    """Arithmetic mean of per-cycle normalized costs."""
    costs = np.asarray(list(cycle_costs), dtype=float)
    if costs.size == 0:
        raise ValueError("average_cost of an empty sequence")
    return float(np.mean(costs))
