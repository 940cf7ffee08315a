"""Offline labeling of control cycles and training-set assembly.

Each cycle of a reference trajectory is labeled with the smallest
(horizon, sample count) pair whose normalized tracking cost stays within
a relative tolerance of the full-size baseline controller.  The search
solves the cycle QP repeatedly: first sweeping the horizon upward with
the sample count tied to it, then sweeping the sample count at the found
horizon.  Initial states for labeling come from a closed-loop pre-pass
that tracks the trajectory with the full-size controller, so the error
features reflect realistic operating conditions.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FeatureLayout, ReferenceWindow, extract_features
from .mpc import MpcConfig, MpcProblem, relative_loss, solve_mpc
from .qp import DEFAULT_CAP, DEFAULT_TOL, QpStatus

__all__ = [
    "DatasetRecord",
    "Dataset",
    "LabelingError",
    "label_cycle",
    "build_dataset",
    "write_dataset",
    "read_dataset",
    "sidecar_path",
]

log = logging.getLogger(__name__)


class LabelingError(RuntimeError):
    """A cycle could not be labeled (baseline infeasible)."""


@dataclass(frozen=True)
class DatasetRecord:
    features: np.ndarray
    t_star: int
    p_star: int


@dataclass
class Dataset:
    """Training records plus the metadata needed to reproduce the layout."""

    features: np.ndarray          # (N, d)
    t_star: np.ndarray           # (N,) int
    p_star: np.ndarray           # (N,) int
    layout: FeatureLayout
    model_id: str
    loss_tol: float
    horizon_max: int

    def __len__(self) -> int:
        return self.features.shape[0]

    def record(self, i: int) -> DatasetRecord:
        return DatasetRecord(self.features[i], int(self.t_star[i]), int(self.p_star[i]))

    def validate(self):
        if self.features.ndim != 2 or self.features.shape[1] != self.layout.size:
            raise ValueError("feature width disagrees with layout")
        if len(self.t_star) != len(self) or len(self.p_star) != len(self):
            raise ValueError("label length mismatch")
        if len(self) and not (np.all(2 <= self.p_star) and np.all(self.p_star <= self.t_star)
                              and np.all(self.t_star <= self.horizon_max)):
            raise ValueError("labels violate 2 <= p <= t <= horizon_max")


def label_cycle(model, x_c, window, cfg: MpcConfig, eps: float, T_l: int,
                cap: int = DEFAULT_CAP, tol: float = DEFAULT_TOL,
                u_prev=None, baseline_cost: float | None = None,
                refs_u=None, solver=None) -> tuple[int, int]:
    """Smallest (horizon, sample count) within ``eps`` of the full baseline.

    Sweeps T = 2..T_l-1 with the sample count tied to T and returns the
    first T whose relative cost deviation from the (T_l, T_l) baseline is
    below ``eps`` (falling back to T_l), then sweeps P = 2..T*-1 at that
    horizon the same way.  Raises LabelingError if the baseline QP is
    infeasible.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    wv = window.values if isinstance(window, ReferenceWindow) else np.asarray(window, float)
    if wv.shape[0] != T_l:
        raise ValueError(f"window must have {T_l} rows")
    n = model.n
    if u_prev is None:
        u_prev = np.zeros(n)
    refs_u = np.zeros((T_l, n)) if refs_u is None else np.asarray(refs_u, float)

    def cost_at(T: int, P: int) -> float | None:
        prob = MpcProblem(model=model, x_c=x_c, refs_x=wv[:T], refs_u=refs_u[:T],
                          T=T, P=P, u_prev=u_prev)
        sol = solve_mpc(prob, cfg, cap=cap, tol=tol, solver=solver)
        if sol.qp.status is QpStatus.INFEASIBLE:
            return None
        return sol.cycle_cost

    if baseline_cost is None:
        baseline_cost = cost_at(T_l, T_l)
        if baseline_cost is None:
            raise LabelingError("baseline cycle QP is infeasible")
    t_star = T_l
    for T in range(2, T_l):
        b = cost_at(T, T)
        if b is not None and relative_loss(b, baseline_cost) < eps:
            t_star = T
            break
    p_star = t_star
    for P in range(2, t_star):
        c = cost_at(t_star, P)
        if c is not None and relative_loss(c, baseline_cost) < eps:
            p_star = P
            break
    return t_star, p_star


# ---------------------------------------------------------------------------
# Parallel labeling.  Workers are primed once with the shared plant/config;
# tasks carry only per-cycle data and results are gathered in index order,
# so the dataset is identical for any worker count.
# ---------------------------------------------------------------------------

_worker_state: dict = {}


def _worker_init(plant, cfg, eps, T_l, cap, tol):
    _worker_state["plant"] = plant
    _worker_state["cfg"] = cfg
    _worker_state["eps"] = eps
    _worker_state["T_l"] = T_l
    _worker_state["cap"] = cap
    _worker_state["tol"] = tol


def _label_task(task):
    idx, x_c, u_prev, baseline, window, refs_u = task
    st = _worker_state
    model = st["plant"].linearize(x_c)
    try:
        t, p = label_cycle(model, x_c, window, st["cfg"], st["eps"], st["T_l"],
                           cap=st["cap"], tol=st["tol"], u_prev=u_prev,
                           baseline_cost=baseline, refs_u=refs_u)
    except LabelingError as exc:
        return idx, None, str(exc)
    return idx, (t, p), None


def _closed_loop_prepass(plant, cfg, traj, T_l, n_steps, cap, tol):
    """Track the trajectory with the full-size controller (noiseless).

    Returns per-step states, previously applied inputs and baseline
    cycle costs (None where the baseline QP failed).
    """
    n = plant.n
    x = traj[0].copy()
    u_prev = np.zeros(n)
    states = np.empty((n_steps, plant.m))
    u_prevs = np.empty((n_steps, n))
    baselines: list[float | None] = []
    ff = np.zeros((traj.shape[0], n))
    for k in range(n_steps):
        states[k] = x
        u_prevs[k] = u_prev
        model = plant.linearize(x)
        prob = MpcProblem(model=model, x_c=x, refs_x=traj[k:k + T_l],
                          refs_u=ff[k:k + T_l], T=T_l, P=T_l, u_prev=u_prev)
        sol = solve_mpc(prob, cfg, cap=cap, tol=tol)
        if sol.qp.status is QpStatus.INFEASIBLE:
            baselines.append(None)
            u = u_prev.copy()  # hold previous input
        else:
            baselines.append(sol.cycle_cost)
            u = sol.u_first
        x = plant.true_step(x, u)
        u_prev = u
    return states, u_prevs, baselines


def build_dataset(plant, cfg: MpcConfig, trajectories, eps: float, T_l: int,
                  stride: int = 1, workers: int = 1,
                  cap: int = DEFAULT_CAP, tol: float = DEFAULT_TOL,
                  model_id: str = "model", limit: int | None = None) -> Dataset:
    """Label cycles along reference trajectories and assemble the dataset.

    Cycle positions step by ``stride`` within each trajectory; ``limit``
    caps the total record count.  Skipped cycles are logged and omitted.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    feats: list[np.ndarray] = []
    ts: list[int] = []
    ps: list[int] = []
    layout = FeatureLayout(m=plant.m, wavelet_len=T_l)
    skipped = 0
    for ti, traj in enumerate(trajectories):
        traj = np.asarray(traj, dtype=float)
        if traj.shape[0] < T_l + 1:
            raise ValueError(f"trajectory {ti} shorter than {T_l + 1} steps")
        c_max = traj.shape[0] - T_l
        positions = list(range(0, c_max + 1, stride))
        if limit is not None:
            positions = positions[:max(limit - len(feats), 0)]
        if not positions:
            break
        states, u_prevs, baselines = _closed_loop_prepass(
            plant, cfg, traj, T_l, positions[-1] + 1, cap, tol)
        ff = np.zeros((traj.shape[0], plant.n))
        tasks = []
        for c in positions:
            if baselines[c] is None:
                log.warning("trajectory %d cycle %d skipped: baseline infeasible", ti, c)
                skipped += 1
                continue
            tasks.append((c, states[c], u_prevs[c], baselines[c],
                          traj[c:c + T_l], ff[c:c + T_l]))
        if workers > 1:
            with ProcessPoolExecutor(
                    max_workers=workers, initializer=_worker_init,
                    initargs=(plant, cfg, eps, T_l, cap, tol)) as pool:
                results = list(pool.map(_label_task, tasks,
                                        chunksize=max(1, len(tasks) // (4 * workers))))
        else:
            _worker_init(plant, cfg, eps, T_l, cap, tol)
            results = [_label_task(t) for t in tasks]
        results.sort(key=lambda r: r[0])
        for (c, label, err), task in zip(results, tasks):
            if label is None:
                log.warning("trajectory %d cycle %d skipped: %s", ti, c, err)
                skipped += 1
                continue
            fv = extract_features(task[4], task[1])
            feats.append(fv.values)
            ts.append(label[0])
            ps.append(label[1])
    if skipped:
        log.info("dataset build skipped %d cycles", skipped)
    X = np.array(feats) if feats else np.zeros((0, layout.size))
    ds = Dataset(features=X, t_star=np.array(ts, dtype=int),
                 p_star=np.array(ps, dtype=int), layout=layout,
                 model_id=model_id, loss_tol=eps, horizon_max=T_l)
    ds.validate()
    return ds


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".meta.json")


def write_dataset(d: Dataset, path) -> None:
    """CSV of feature columns + labels, with a metadata sidecar JSON."""
    d.validate()
    names = d.layout.names()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + ["t_star", "p_star"])
        for i in range(len(d)):
            row = [f"{v:.17g}" for v in d.features[i]]
            row.append(str(int(d.t_star[i])))
            row.append(str(int(d.p_star[i])))
            writer.writerow(row)
    meta = {
        "model_id": d.model_id,
        "loss_tol": d.loss_tol,
        "horizon_max": d.horizon_max,
        "layout": {"m": d.layout.m, "wavelet_len": d.layout.wavelet_len},
        "columns": names,
        "n_records": len(d),
    }
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def read_dataset(path) -> Dataset:
    """Inverse of :func:`write_dataset`; rejects layout disagreements."""
    meta_file = sidecar_path(path)
    if not meta_file.exists():
        raise ValueError(f"missing dataset sidecar {meta_file}")
    with open(meta_file) as fh:
        meta = json.load(fh)
    layout = FeatureLayout(m=int(meta["layout"]["m"]),
                           wavelet_len=int(meta["layout"]["wavelet_len"]))
    expected = layout.names() + ["t_star", "p_star"]
    if meta.get("columns") != layout.names():
        raise ValueError("sidecar layout disagrees with its column list")
    feats, ts, ps = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise ValueError(f"{path}: header does not match the sidecar layout")
        for row in reader:
            if len(row) != len(expected):
                raise ValueError(f"{path}: malformed row of {len(row)} fields")
            feats.append([float(v) for v in row[:-2]])
            ts.append(int(row[-2]))
            ps.append(int(row[-1]))
    X = np.array(feats) if feats else np.zeros((0, layout.size))
    ds = Dataset(features=X, t_star=np.array(ts, dtype=int),
                 p_star=np.array(ps, dtype=int), layout=layout,
                 model_id=str(meta["model_id"]), loss_tol=float(meta["loss_tol"]),
                 horizon_max=int(meta["horizon_max"]))
    ds.validate()
    return ds
