"""Epsilon-insensitive support vector regression with a Gaussian kernel.

Training solves the dual problem by sequential pairwise optimization
(maximal-violating-pair selection with a second-order gain heuristic),
maintaining the two box-constrained coefficient halves subject to their
balance constraint.  Features are z-scored with statistics stored in the
model; zero-variance columns are dropped, which is also how ablation
masks (zeroed feature groups) disappear from the trained predictor.
"""

from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FeatureScaler",
    "SvrModel",
    "GridSearchSpec",
    "train_svr",
    "predict",
    "predict_many",
    "grid_search_cv",
    "round_and_clamp",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)

_FORMAT = "armpc-svr-1"
_SUPPORT_EPS = 1e-12
_MAX_TRAIN = 50000
_SUBSAMPLE_SEED = 1234


@dataclass(frozen=True)
class FeatureScaler:
    """Per-column z-score statistics; zero-variance columns are dropped."""

    mean: np.ndarray
    std: np.ndarray
    keep: np.ndarray

    @staticmethod
    def fit(X: np.ndarray) -> "FeatureScaler":
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        keep = std > 1e-12
        if not np.all(keep):
            log.info("scaler dropped %d zero-variance feature columns",
                     int(np.sum(~keep)))
        safe = np.where(keep, std, 1.0)
        return FeatureScaler(mean=mean, std=safe, keep=keep)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.mean.shape[0]:
            raise ValueError(
                f"expected {self.mean.shape[0]} raw features, got {X.shape[1]}")
        Z = (X - self.mean) / self.std
        return Z[:, self.keep]

    @property
    def n_raw(self) -> int:
        return self.mean.shape[0]

    @property
    def n_kept(self) -> int:
        return int(np.sum(self.keep))


@dataclass
class SvrModel:
    support_vectors: np.ndarray   # (s, d_kept), already scaled
    dual_coeffs: np.ndarray       # (s,)
    bias: float
    kernel_scale: float
    scaler: FeatureScaler
    tau: float
    c_reg: float
    converged: bool = True
    target: str = ""
    _sv_sq: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def kernel(self) -> dict:
        return {"type": "gaussian", "scale": self.kernel_scale}

    def sv_sq(self) -> np.ndarray:
        if self._sv_sq is None:
            self._sv_sq = np.sum(self.support_vectors * self.support_vectors, axis=1)
        return self._sv_sq


def _kernel_matrix(A: np.ndarray, B: np.ndarray, scale: float) -> np.ndarray:
    d2 = (np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :]
          - 2.0 * (A @ B.T))
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-scale * d2)


class _KernelRows:
    """Row-on-demand Gaussian kernel with optional full precompute."""

    def __init__(self, Z: np.ndarray, scale: float, full_limit: int = 6000):
        self.Z = Z
        self.scale = scale
        n = Z.shape[0]
        self.sq = np.sum(Z * Z, axis=1)
        self.full = None
        if n <= full_limit:
            self.full = _kernel_matrix(Z, Z, scale)
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._max_rows = max(256, int(2e8 / max(8 * n, 1)))

    def row(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[i]
        hit = self._cache.get(i)
        if hit is not None:
            self._cache.move_to_end(i)
            return hit
        d2 = self.sq + self.sq[i] - 2.0 * (self.Z @ self.Z[i])
        np.maximum(d2, 0.0, out=d2)
        r = np.exp(-self.scale * d2)
        self._cache[i] = r
        if len(self._cache) > self._max_rows:
            self._cache.popitem(last=False)
        return r


def _smo(kern: _KernelRows, y: np.ndarray, C: float, tau: float,
         tol: float, max_sweeps: int):
    """Pairwise dual ascent; returns (beta, bias, converged, violation)."""
    n = y.shape[0]
    ap = np.zeros(n)
    am = np.zeros(n)
    F = -y.copy()              # K beta - y for beta = 0
    max_updates = max_sweeps * n
    converged = False
    viol = np.inf
    for _ in range(max_updates):
        v_plus = -(F + tau)    # implied bias if the + coefficient is free
        v_minus = -F + tau     # implied bias if the - coefficient is free
        up_p = ap < C
        up_m = am > 0
        lo_p = ap > 0
        lo_m = am < C
        up_vals = np.where(up_p, v_plus, -np.inf)
        up_vals_m = np.where(up_m, v_minus, -np.inf)
        lo_vals = np.where(lo_p, v_plus, np.inf)
        lo_vals_m = np.where(lo_m, v_minus, np.inf)
        i_p = int(np.argmax(up_vals))
        i_m = int(np.argmax(up_vals_m))
        if up_vals[i_p] >= up_vals_m[i_m]:
            i, i_kind, v_i = i_p, +1, up_vals[i_p]
        else:
            i, i_kind, v_i = i_m, -1, up_vals_m[i_m]
        m_low = min(float(np.min(lo_vals)), float(np.min(lo_vals_m)))
        viol = v_i - m_low
        if viol <= tol:
            converged = True
            break
        ki = kern.row(i)
        # second-order selection over candidates with a positive gap
        curv = np.maximum(2.0 - 2.0 * ki, _SUPPORT_EPS)
        gain_p = np.where(lo_p & (v_plus < v_i), (v_i - v_plus) ** 2 / curv, -np.inf)
        gain_m = np.where(lo_m & (v_minus < v_i), (v_i - v_minus) ** 2 / curv, -np.inf)
        j_p = int(np.argmax(gain_p))
        j_m = int(np.argmax(gain_m))
        if gain_p[j_p] >= gain_m[j_m]:
            j, j_kind, v_j = j_p, +1, v_plus[j_p]
        else:
            j, j_kind, v_j = j_m, -1, v_minus[j_m]
        if not np.isfinite(v_j):
            break
        a = max(2.0 - 2.0 * float(ki[j]), _SUPPORT_EPS)
        delta = (v_i - v_j) / a
        if i_kind > 0:
            delta = min(delta, C - ap[i])
        else:
            delta = min(delta, am[i])
        if j_kind > 0:
            delta = min(delta, ap[j])
        else:
            delta = min(delta, C - am[j])
        if delta <= 0:
            break
        if i_kind > 0:
            ap[i] += delta
        else:
            am[i] -= delta
        if j_kind > 0:
            ap[j] -= delta
        else:
            am[j] += delta
        F += delta * (ki - kern.row(j))
    beta = ap - am
    free = ((ap > _SUPPORT_EPS) & (ap < C - _SUPPORT_EPS)
            | (am > _SUPPORT_EPS) & (am < C - _SUPPORT_EPS))
    if np.any(free):
        vals = np.where((ap > _SUPPORT_EPS) & (ap < C - _SUPPORT_EPS),
                        -(F + tau), -F + tau)
        bias = float(np.mean(vals[free]))
    else:
        v_plus = -(F + tau)
        v_minus = -F + tau
        m_up = max(float(np.max(np.where(ap < C, v_plus, -np.inf))),
                   float(np.max(np.where(am > 0, v_minus, -np.inf))))
        m_low = min(float(np.min(np.where(ap > 0, v_plus, np.inf))),
                    float(np.min(np.where(am < C, v_minus, np.inf))))
        bias = 0.5 * (m_up + m_low)
    return beta, bias, converged, viol


def train_svr(X, y, c_reg: float, tau: float, kernel_scale: float = 1.0,
              tol: float = 1e-3, cap: int = 50, target: str = "",
              max_train: int = _MAX_TRAIN) -> SvrModel:
    """Fit the regressor; ``cap`` bounds the pairwise-update sweeps.

    Inputs are raw features; the scaler is fitted here and stored in the
    model.  Training sets larger than ``max_train`` are uniformly
    subsampled with a fixed seed.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y disagree on the sample count")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 training samples")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    if c_reg <= 0 or tau < 0 or kernel_scale <= 0:
        raise ValueError("require c_reg > 0, tau >= 0, kernel_scale > 0")
    if X.shape[0] > max_train:
        rng = np.random.default_rng(_SUBSAMPLE_SEED)
        sel = np.sort(rng.choice(X.shape[0], size=max_train, replace=False))
        X, y = X[sel], y[sel]
        log.info("training subsampled to %d records", max_train)
    scaler = FeatureScaler.fit(X)
    Z = scaler.transform(X)
    kern = _KernelRows(Z, kernel_scale)
    beta, bias, converged, viol = _smo(kern, y, c_reg, tau, tol, cap)
    if not converged and viol > 10 * tol:
        log.warning("SMO stopped at sweep cap with KKT violation %.3g", viol)
    supp = np.abs(beta) > _SUPPORT_EPS
    return SvrModel(
        support_vectors=Z[supp].copy(),
        dual_coeffs=beta[supp].copy(),
        bias=bias,
        kernel_scale=kernel_scale,
        scaler=scaler,
        tau=tau,
        c_reg=c_reg,
        converged=converged,
        target=target,
    )


def predict_many(model: SvrModel, X) -> np.ndarray:
    Z = model.scaler.transform(X)
    if model.support_vectors.shape[0] == 0:
        return np.full(Z.shape[0], model.bias)
    K = _kernel_matrix(Z, model.support_vectors, model.kernel_scale)
    return K @ model.dual_coeffs + model.bias


def predict(model: SvrModel, x) -> float:
    """Dual-expansion prediction for a single raw feature vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict expects a single feature vector")
    if x.shape[0] != model.scaler.n_raw:
        raise ValueError(f"expected {model.scaler.n_raw} features, got {x.shape[0]}")
    sc = model.scaler
    z = ((x - sc.mean) / sc.std)[sc.keep]
    sv = model.support_vectors
    if sv.shape[0] == 0:
        return model.bias
    d2 = model.sv_sq() + float(z @ z) - 2.0 * (sv @ z)
    np.maximum(d2, 0.0, out=d2)
    return float(np.exp(-model.kernel_scale * d2) @ model.dual_coeffs + model.bias)


@dataclass(frozen=True)
class GridSearchSpec:
    c_grid: tuple
    tau_grid: tuple
    scale_grid: tuple
    folds: int = 5

    def __post_init__(self):
        for name in ("c_grid", "tau_grid", "scale_grid"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ValueError(f"{name} must be non-empty")
            object.__setattr__(self, name, vals)
        if self.folds < 2:
            raise ValueError("folds must be >= 2")


def grid_search_cv(X, y, spec: GridSearchSpec, seed: int,
                   tol: float = 1e-3, cap: int = 50):
    """Seeded k-fold grid search minimizing validation RMSE.

    Ties prefer smaller C, then larger tau.  Returns the best parameter
    dict and the full score table.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = X.shape[0]
    if n < spec.folds:
        raise ValueError("fewer samples than folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    folds = np.array_split(perm, spec.folds)
    table = []
    for c_reg in spec.c_grid:
        for tau in spec.tau_grid:
            for scale in spec.scale_grid:
                errs = []
                for k in range(spec.folds):
                    val_idx = folds[k]
                    tr_idx = np.concatenate([folds[j] for j in range(spec.folds)
                                             if j != k])
                    m = train_svr(X[tr_idx], y[tr_idx], c_reg, tau, scale,
                                  tol=tol, cap=cap)
                    pred = predict_many(m, X[val_idx])
                    errs.append(float(np.sqrt(np.mean((pred - y[val_idx]) ** 2))))
                table.append({"c_reg": c_reg, "tau": tau, "scale": scale,
                              "rmse": float(np.mean(errs))})
    best = min(table, key=lambda r: (r["rmse"], r["c_reg"], -r["tau"]))
    return dict(best), table


def round_and_clamp(pred_t: float, pred_p: float, T_l: int) -> tuple[int, int]:
    """Map real-valued predictions to integer (horizon, samples)."""
    if not (math.isfinite(pred_t) and math.isfinite(pred_p)):
        raise ValueError("predictions must be finite")
    t = int(min(max(math.floor(pred_t + 0.5), 2), T_l))
    p = int(min(max(math.floor(pred_p + 0.5), 2), t))
    return t, p


def save_model(model: SvrModel, path) -> None:
    data = {
        "format": _FORMAT,
        "target": model.target,
        "kernel": {"type": "gaussian", "scale": model.kernel_scale},
        "c_reg": model.c_reg,
        "tau": model.tau,
        "bias": model.bias,
        "converged": model.converged,
        "n_features_raw": model.scaler.n_raw,
        "scaler": {
            "mean": model.scaler.mean.tolist(),
            "std": model.scaler.std.tolist(),
            "keep": model.scaler.keep.astype(int).tolist(),
        },
        "dual_coeffs": model.dual_coeffs.tolist(),
        "support_vectors": [row.tolist() for row in model.support_vectors],
    }
    with open(path, "w") as fh:
        json.dump(data, fh)
        fh.write("\n")


def load_model(path) -> SvrModel:
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != _FORMAT:
        raise ValueError(f"unsupported model format {data.get('format')!r}")
    if data.get("kernel", {}).get("type") != "gaussian":
        raise ValueError("unsupported kernel type")
    scaler = FeatureScaler(
        mean=np.array(data["scaler"]["mean"], dtype=float),
        std=np.array(data["scaler"]["std"], dtype=float),
        keep=np.array(data["scaler"]["keep"], dtype=bool),
    )
    if scaler.mean.shape[0] != int(data["n_features_raw"]):
        raise ValueError("scaler length disagrees with the declared feature count")
    sv = np.array(data["support_vectors"], dtype=float)
    if sv.size == 0:
        sv = np.zeros((0, scaler.n_kept))
    coeffs = np.array(data["dual_coeffs"], dtype=float)
    if sv.shape[0] != coeffs.shape[0] or (sv.shape[0] and sv.shape[1] != scaler.n_kept):
        raise ValueError("support vector block disagrees with the scaler layout")
    return SvrModel(
        support_vectors=sv,
        dual_coeffs=coeffs,
        bias=float(data["bias"]),
        kernel_scale=float(data["kernel"]["scale"]),
        scaler=scaler,
        tau=float(data["tau"]),
        c_reg=float(data["c_reg"]),
        converged=bool(data["converged"]),
        target=str(data.get("target", "")),
    )
