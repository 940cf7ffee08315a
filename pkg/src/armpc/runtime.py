"""Closed-loop execution of the adaptive and fixed-setting controllers.

One run tracks a reference trajectory for a number of cycles: per cycle
the controller picks (horizon, samples) -- either fixed or predicted
from the reference-window features -- solves the condensed QP, applies
the first input to the noisy plant and updates the state estimate.  The
per-cycle wall time covers feature extraction and prediction (adaptive)
plus QP build and solve, which is the quantity the benchmark compares.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .features import extract_features
from .mpc import MpcConfig, MpcProblem, average_cost, solve_mpc
from .plants import StateEstimate, estimate
from .qp import DEFAULT_CAP, DEFAULT_TOL, QpStatus
from .svr import SvrModel, predict, round_and_clamp, train_svr

__all__ = [
    "FixedController",
    "AdaptiveController",
    "RunConfig",
    "CycleRow",
    "RunReport",
    "run_loop",
    "train_predictors",
    "motivation_experiment",
    "feasibility_experiment",
    "ablation_run",
    "MOTIVATION_SETTINGS",
    "ABLATION_MASKS",
]

log = logging.getLogger(__name__)

MOTIVATION_SETTINGS = ((40, 40), (5, 5), (40, 3), (40, 25))
ABLATION_MASKS = {
    "full": (),
    "no_wavelet": ("wavelet",),
    "no_curvature": ("curvature",),
    "no_error": ("error",),
}


@dataclass(frozen=True)
class FixedController:
    T: int
    P: int

    def __post_init__(self):
        if not (2 <= self.P <= self.T):
            raise ValueError("fixed setting requires 2 <= P <= T")

    @property
    def label(self) -> str:
        return f"fixed_{self.T}_{self.P}"


@dataclass(frozen=True)
class AdaptiveController:
    """Predicts (horizon, samples) per cycle; ``model_p=None`` ties P = T."""

    model_t: SvrModel
    model_p: SvrModel | None

    @property
    def label(self) -> str:
        return "adaptive" if self.model_p is not None else "adaptive_t_only"


@dataclass(frozen=True)
class RunConfig:
    controller: FixedController | AdaptiveController
    cycles: int
    seed: int
    cap: int = DEFAULT_CAP
    tol: float = DEFAULT_TOL
    noise: bool = True


@dataclass
class CycleRow:
    cycle: int
    horizon: int
    samples: int
    cycle_cost: float
    solve_time: float
    status: str
    tracking_error: float


@dataclass
class RunReport:
    label: str
    seed: int
    rows: list[CycleRow] = field(default_factory=list)

    @property
    def avg_cost(self) -> float:
        return average_cost(r.cycle_cost for r in self.rows)

    @property
    def mean_solve_time(self) -> float:
        return float(np.mean([r.solve_time for r in self.rows]))

    @property
    def optimal_fraction(self) -> float:
        n = len(self.rows)
        return sum(r.status == QpStatus.OPTIMAL.value for r in self.rows) / n if n else 0.0

    def summary(self) -> dict:
        return {
            "label": self.label,
            "seed": self.seed,
            "cycles": len(self.rows),
            "avg_cost": self.avg_cost,
            "mean_solve_time": self.mean_solve_time,
            "optimal_fraction": self.optimal_fraction,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cycle", "horizon", "samples", "cycle_cost",
                             "solve_time", "status", "tracking_error"])
            for r in self.rows:
                writer.writerow([r.cycle, r.horizon, r.samples,
                                 f"{r.cycle_cost:.17g}", f"{r.solve_time:.9f}",
                                 r.status, f"{r.tracking_error:.17g}"])


def run_loop(cfg: RunConfig, plant, mpc_cfg: MpcConfig, refs: np.ndarray,
             noise_std=None, meas_noise_std=None, x0=None) -> RunReport:
    """Execute the closed loop for ``cfg.cycles`` cycles along ``refs``."""
    refs = np.asarray(refs, dtype=float)
    T_l = mpc_cfg.T_max
    H = cfg.cycles
    if refs.shape[0] < H + T_l:
        raise ValueError(f"need at least {H + T_l} reference rows, got {refs.shape[0]}")
    if refs.shape[1] != plant.m:
        raise ValueError("reference column count does not match the model")
    rng = np.random.default_rng(cfg.seed)
    noisy = cfg.noise and noise_std is not None
    w_std = np.asarray(noise_std, dtype=float) if noisy else None
    v_std = (np.asarray(meas_noise_std, dtype=float)
             if (cfg.noise and meas_noise_std is not None) else None)
    Qn = np.diag(w_std ** 2) if w_std is not None else np.zeros((plant.m, plant.m))
    Rn = np.diag(v_std ** 2) if v_std is not None else None
    x_true = np.array(refs[0] if x0 is None else x0, dtype=float)
    est = StateEstimate(x_true.copy(), Rn.copy() if Rn is not None else np.zeros((plant.m, plant.m)))
    u_prev = np.zeros(plant.n)
    adaptive = isinstance(cfg.controller, AdaptiveController)
    report = RunReport(label=cfg.controller.label, seed=cfg.seed)
    refs_u_all = np.zeros((refs.shape[0], plant.n))
    realized_x = np.empty((H, plant.m))
    applied_u = np.empty((H, plant.n))
    for c in range(H):
        window = refs[c:c + T_l]
        t0 = time.perf_counter()
        if adaptive:
            fv = extract_features(window, est.x_hat)
            pred_t = predict(cfg.controller.model_t, fv.values)
            if cfg.controller.model_p is not None:
                pred_p = predict(cfg.controller.model_p,
                                 np.append(fv.values, pred_t))
            else:
                pred_p = pred_t
            T, P = round_and_clamp(pred_t, pred_p, T_l)
            if cfg.controller.model_p is None:
                P = T
        else:
            T, P = cfg.controller.T, cfg.controller.P
        model = plant.linearize(est.x_hat)
        prob = MpcProblem(model=model, x_c=est.x_hat, refs_x=window[:T],
                          refs_u=refs_u_all[c:c + T], T=T, P=P, u_prev=u_prev)
        sol = solve_mpc(prob, mpc_cfg, cap=cfg.cap, tol=cfg.tol)
        cycle_time = time.perf_counter() - t0
        if sol.qp.status is QpStatus.INFEASIBLE:
            u = u_prev.copy()
        else:
            u = sol.u_first
        tracking_error = float(np.linalg.norm(refs[c] - x_true))
        realized_x[c] = x_true
        applied_u[c] = u
        report.rows.append(CycleRow(
            cycle=c, horizon=T, samples=P, cycle_cost=np.nan,
            solve_time=cycle_time, status=sol.qp.status.value,
            tracking_error=tracking_error))
        x_true = plant.true_step(x_true, u, w_std, rng if noisy else None)
        if v_std is not None:
            y_meas = x_true + rng.normal(0.0, 1.0, plant.m) * v_std
            est = estimate(est, model, u, y_meas, Qn, Rn)
        else:
            est = StateEstimate(x_true.copy(), est.P_cov)
        u_prev = u
    # per-cycle cost: tracking cost of the realized trajectory averaged
    # over the cycle's horizon window (truncated at the end of the run)
    ex = refs[:H] - realized_x
    eu = refs_u_all[:H] - applied_u
    step_cost = (np.sum((ex @ mpc_cfg.Q) * ex, axis=1)
                 + np.sum((eu @ mpc_cfg.R) * eu, axis=1))
    cum = np.concatenate([[0.0], np.cumsum(step_cost)])
    for row in report.rows:
        hi = min(row.cycle + row.horizon, H)
        row.cycle_cost = float((cum[hi] - cum[row.cycle]) / (hi - row.cycle))
    return report


def train_predictors(ds: Dataset, c_reg: float, tau: float, scale: float,
                     tol: float = 1e-3, cap: int = 50, drop_groups=(),
                     with_p: bool = True,
                     max_train: int = 50000) -> tuple[SvrModel, SvrModel | None]:
    """Fit the horizon predictor and (optionally) the sample-count predictor.

    ``drop_groups`` zeroes feature groups before fitting; the scaler then
    drops those columns so they vanish from the predictor.  The sample
    count model sees the features augmented with the horizon label.
    ``max_train`` caps the records used per fit (prediction latency is
    part of the control cycle, so the dual expansion must stay small).
    """
    X = ds.features.copy()
    if drop_groups:
        keep = ds.layout.mask(drop=drop_groups)
        X[:, ~keep] = 0.0
    model_t = train_svr(X, ds.t_star.astype(float), c_reg, tau, scale,
                        tol=tol, cap=cap, target="horizon", max_train=max_train)
    model_p = None
    if with_p:
        Xp = np.hstack([X, ds.t_star.astype(float)[:, None]])
        model_p = train_svr(Xp, ds.p_star.astype(float), c_reg, tau, scale,
                            tol=tol, cap=cap, target="samples", max_train=max_train)
    return model_t, model_p


def motivation_experiment(plant, mpc_cfg: MpcConfig, slow_refs, rapid_refs,
                          cycles: int, seed: int, cap: int = DEFAULT_CAP,
                          tol: float = DEFAULT_TOL, noise_std=None,
                          meas_noise_std=None,
                          settings=MOTIVATION_SETTINGS):
    """Fixed-setting comparison over a slow and a rapid reference set."""
    table = []
    for refs_name, refs in (("slow", slow_refs), ("rapid", rapid_refs)):
        for (T, P) in settings:
            cfg = RunConfig(controller=FixedController(T, P), cycles=cycles,
                            seed=seed, cap=cap, tol=tol)
            rep = run_loop(cfg, plant, mpc_cfg, refs, noise_std, meas_noise_std)
            table.append({"refs": refs_name, "horizon": T, "samples": P,
                          "avg_cost": rep.avg_cost,
                          "mean_solve_time": rep.mean_solve_time,
                          "optimal_fraction": rep.optimal_fraction})
    return table


def feasibility_experiment(plant, mpc_cfg: MpcConfig, refs, caps,
                           controller: AdaptiveController, cycles: int,
                           seed: int, tol: float = DEFAULT_TOL,
                           noise_std=None, meas_noise_std=None):
    """Optimal-solve fraction vs. iteration cap, adaptive vs. full baseline."""
    T_l = mpc_cfg.T_max
    table = []
    for cap in caps:
        for ctrl in (controller, FixedController(T_l, T_l)):
            cfg = RunConfig(controller=ctrl, cycles=cycles, seed=seed,
                            cap=int(cap), tol=tol)
            rep = run_loop(cfg, plant, mpc_cfg, refs, noise_std, meas_noise_std)
            table.append({"cap": int(cap), "controller": ctrl.label,
                          "optimal_fraction": rep.optimal_fraction,
                          "avg_cost": rep.avg_cost,
                          "mean_solve_time": rep.mean_solve_time})
    return table


def ablation_run(plant, mpc_cfg: MpcConfig, ds: Dataset, refs, cycles: int,
                 seed: int, c_reg: float, tau: float, scale: float,
                 cap: int = DEFAULT_CAP, tol: float = DEFAULT_TOL,
                 noise_std=None, meas_noise_std=None,
                 smo_tol: float = 1e-3, smo_cap: int = 50):
    """Feature-group ablations plus the horizon-only variant.

    Each variant retrains its predictors on the masked dataset and runs
    the adaptive loop; the returned table carries cost and timing.
    """
    variants = [(name, drop, True) for name, drop in ABLATION_MASKS.items()]
    variants.append(("t_only", (), False))
    table = []
    for name, drop, with_p in variants:
        model_t, model_p = train_predictors(ds, c_reg, tau, scale, tol=smo_tol,
                                            cap=smo_cap, drop_groups=drop,
                                            with_p=with_p)
        ctrl = AdaptiveController(model_t, model_p)
        cfg = RunConfig(controller=ctrl, cycles=cycles, seed=seed, cap=cap, tol=tol)
        rep = run_loop(cfg, plant, mpc_cfg, refs, noise_std, meas_noise_std)
        table.append({"variant": name, "avg_cost": rep.avg_cost,
                      "mean_solve_time": rep.mean_solve_time,
                      "optimal_fraction": rep.optimal_fraction})
    return table
