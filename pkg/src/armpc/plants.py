"""State-space plant models, discretization, simulation and estimation.

Two benchmark plants are provided: a linear lateral-dynamics vehicle
(bicycle approximation, states lat_vel / yaw / yaw_rate / lat_pos, input
steering angle) and a planar free-flying robot with two thrusters whose
input matrix depends on the heading, handled as a linear
parameter-varying model refreshed from the current heading estimate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ContinuousModel",
    "DiscreteModel",
    "ConstraintSet",
    "VehicleParams",
    "RobotParams",
    "StateEstimate",
    "ModelConfig",
    "VehiclePlant",
    "RobotPlant",
    "discretize",
    "vehicle_model",
    "robot_lpv",
    "robot_dynamics",
    "step",
    "estimate",
    "load_config",
    "build_plant",
    "default_config_path",
]

_CONFIG_DIR = Path(__file__).parent / "configs"


@dataclass(frozen=True)
class ConstraintSet:
    """Box bounds on states, inputs and per-step input rates."""

    x_min: np.ndarray
    x_max: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    du_min: np.ndarray
    du_max: np.ndarray

    def __post_init__(self):
        for name in ("x_min", "x_max", "u_min", "u_max", "du_min", "du_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        for lo, hi in (("x_min", "x_max"), ("u_min", "u_max"), ("du_min", "du_max")):
            a, b = getattr(self, lo), getattr(self, hi)
            if a.shape != b.shape:
                raise ValueError(f"{lo}/{hi} length mismatch")
            if np.any(a > b):
                raise ValueError(f"{lo} > {hi} for some component")


@dataclass(frozen=True)
class ContinuousModel:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise ValueError("B row count must match A")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("model matrices must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class DiscreteModel:
    """Euler-discretized model x[k+1] = A_d x[k] + B_d u[k] with bounds."""

    A_d: np.ndarray
    B_d: np.ndarray
    ts: float
    bounds: ConstraintSet

    def __post_init__(self):
        A_d = np.asarray(self.A_d, dtype=float)
        B_d = np.asarray(self.B_d, dtype=float)
        if self.ts <= 0:
            raise ValueError("ts must be positive")
        if A_d.shape[0] != A_d.shape[1] or B_d.shape[0] != A_d.shape[0]:
            raise ValueError("inconsistent discrete model dimensions")
        if self.bounds.x_min.shape[0] != A_d.shape[0]:
            raise ValueError("state bound length must match state count")
        if self.bounds.u_min.shape[0] != B_d.shape[1]:
            raise ValueError("input bound length must match input count")
        object.__setattr__(self, "A_d", A_d)
        object.__setattr__(self, "B_d", B_d)

    @property
    def m(self) -> int:
        return self.A_d.shape[0]

    @property
    def n(self) -> int:
        return self.B_d.shape[1]


def discretize(c: ContinuousModel, ts: float, bounds: ConstraintSet) -> DiscreteModel:
    """Forward-Euler discretization: A_d = I + ts*A, B_d = ts*B."""
    if ts <= 0:
        raise ValueError("ts must be positive")
    A_d = np.eye(c.m) + ts * c.A
    B_d = ts * c.B
    return DiscreteModel(A_d, B_d, ts, bounds)


@dataclass(frozen=True)
class VehicleParams:
    """Bicycle-model parameters; defaults follow the benchmark sedan."""

    m_kg: float = 1650.0
    Iz: float = 2650.0
    lf: float = 1.1
    lr: float = 1.7
    Cf: float = 55494.0
    Cr: float = 55494.0
    Vx: float = 12.0

    def __post_init__(self):
        for name in ("m_kg", "Iz", "lf", "lr", "Cf", "Cr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.Vx == 0:
            raise ValueError("Vx must be nonzero (appears in denominators)")
        if self.Vx < 0:
            raise ValueError("Vx must be strictly positive")


def vehicle_model(p: VehicleParams) -> ContinuousModel:
    """Lateral bicycle model, states (lat_vel, yaw, yaw_rate, lat_pos), input steering."""
    a = -(2 * p.Cf + 2 * p.Cr) / (p.m_kg * p.Vx)
    b = -p.Vx - (2 * p.Cf * p.lf - 2 * p.Cr * p.lr) / (p.m_kg * p.Vx)
    c = -(2 * p.lf * p.Cf - 2 * p.lr * p.Cr) / (p.Iz * p.Vx)
    d = -(2 * p.lf ** 2 * p.Cf + 2 * p.lr ** 2 * p.Cr) / (p.Iz * p.Vx)
    e = 2 * p.Cf / p.m_kg
    f = 2 * p.lf * p.Cf / p.Iz
    A = np.array([
        [a, 0.0, b, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [c, 0.0, d, 0.0],
        [1.0, p.Vx, 0.0, 0.0],
    ])
    B = np.array([[e], [0.0], [f], [0.0]])
    return ContinuousModel(A, B)


@dataclass(frozen=True)
class RobotParams:
    """Free-flying robot: thrust-to-angular-acceleration gains and input bound."""

    alpha: float = 0.2
    beta: float = 0.2
    M: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be strictly positive")
        if self.M <= 0:
            raise ValueError("M must be strictly positive")


def robot_lpv(p: RobotParams, theta: float) -> ContinuousModel:
    """Robot model linearized at heading theta (input matrix frozen)."""
    if not math.isfinite(theta):
        raise ValueError("theta must be finite")
    A = np.zeros((6, 6))
    A[0, 3] = 1.0
    A[1, 4] = 1.0
    A[2, 5] = 1.0
    ct, st = math.cos(theta), math.sin(theta)
    B = np.zeros((6, 2))
    B[3] = [ct, ct]
    B[4] = [st, st]
    B[5] = [p.alpha, -p.beta]
    return ContinuousModel(A, B)


def robot_dynamics(x: np.ndarray, u: np.ndarray, p: RobotParams) -> np.ndarray:
    """Nonlinear state derivative of the free-flying robot."""
    theta = x[2]
    thrust = u[0] + u[1]
    return np.array([
        x[3],
        x[4],
        x[5],
        thrust * math.cos(theta),
        thrust * math.sin(theta),
        p.alpha * u[0] - p.beta * u[1],
    ])


def step(m: DiscreteModel, x, u, noise_std=None, rng: np.random.Generator | None = None):
    """One discrete step x+ = A_d x + B_d u + w, w ~ N(0, diag(noise_std^2))."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (m.m,):
        raise ValueError(f"state has shape {x.shape}, expected ({m.m},)")
    if u.shape != (m.n,):
        raise ValueError(f"input has shape {u.shape}, expected ({m.n},)")
    x_next = m.A_d @ x + m.B_d @ u
    if noise_std is not None:
        std = np.broadcast_to(np.asarray(noise_std, dtype=float), (m.m,))
        if rng is None:
            raise ValueError("noise requested but no generator supplied")
        x_next = x_next + rng.normal(0.0, 1.0, m.m) * std
    return x_next


@dataclass
class StateEstimate:
    x_hat: np.ndarray
    P_cov: np.ndarray

    def __post_init__(self):
        self.x_hat = np.asarray(self.x_hat, dtype=float)
        self.P_cov = np.asarray(self.P_cov, dtype=float)


def estimate(prev: StateEstimate, m: DiscreteModel, u, y_meas, Qn, Rn) -> StateEstimate:
    """Kalman predict/update with full-state measurement (C = I).

    For the robot the caller supplies the model re-linearized at the
    current heading estimate, which makes this the extended-filter step;
    for the vehicle the model is constant and this is the plain filter.
    """
    u = np.asarray(u, dtype=float)
    y = np.asarray(y_meas, dtype=float)
    Qn = np.asarray(Qn, dtype=float)
    Rn = np.asarray(Rn, dtype=float)
    x_pred = m.A_d @ prev.x_hat + m.B_d @ u
    P_pred = m.A_d @ prev.P_cov @ m.A_d.T + Qn
    S = P_pred + Rn
    try:
        K = np.linalg.solve(S.T, P_pred.T).T
    except np.linalg.LinAlgError as exc:
        raise ValueError("innovation covariance is singular") from exc
    x_new = x_pred + K @ (y - x_pred)
    P_new = (np.eye(m.m) - K) @ P_pred
    P_new = 0.5 * (P_new + P_new.T)
    return StateEstimate(x_new, P_new)


# ---------------------------------------------------------------------------
# Plant wrappers: true propagation + linearization hook for the controller.
# ---------------------------------------------------------------------------

class VehiclePlant:
    state_names = ("lat_vel", "yaw", "yaw_rate", "lat_pos")
    kind = "vehicle"

    def __init__(self, params: VehicleParams, ts: float, bounds: ConstraintSet):
        self.params = params
        self.ts = ts
        self.bounds = bounds
        self.model = discretize(vehicle_model(params), ts, bounds)

    @property
    def m(self):
        return self.model.m

    @property
    def n(self):
        return self.model.n

    def linearize(self, x_hat) -> DiscreteModel:
        return self.model

    def true_step(self, x, u, noise_std=None, rng=None):
        return step(self.model, x, u, noise_std, rng)

    def reference_inputs(self, refs: np.ndarray) -> np.ndarray:
        """Steering sequence implied by a reference state trajectory.

        Least-squares inversion of one dynamics step per sample, clipped
        to the input bounds; the final step repeats the previous value.
        """
        refs = np.asarray(refs, dtype=float)
        resid = refs[1:] - refs[:-1] @ self.model.A_d.T
        b = self.model.B_d[:, 0]
        v = (resid @ b) / float(b @ b)
        v = np.clip(v, self.bounds.u_min[0], self.bounds.u_max[0])
        if len(v):
            v = np.append(v, v[-1])
        else:
            v = np.zeros(1)
        return v[:, None]


class RobotPlant:
    """True propagation integrates the nonlinear dynamics (Euler at ts);
    the controller-facing model freezes the input matrix at the current
    heading estimate."""

    state_names = ("pos_x", "pos_y", "heading", "vel_x", "vel_y", "ang_vel")
    kind = "robot"

    def __init__(self, params: RobotParams, ts: float, bounds: ConstraintSet):
        self.params = params
        self.ts = ts
        self.bounds = bounds

    m = 6
    n = 2

    def linearize(self, x_hat) -> DiscreteModel:
        return discretize(robot_lpv(self.params, float(x_hat[2])), self.ts, self.bounds)

    def true_step(self, x, u, noise_std=None, rng=None):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        x_next = x + self.ts * robot_dynamics(x, u, self.params)
        if noise_std is not None:
            std = np.broadcast_to(np.asarray(noise_std, dtype=float), (6,))
            if rng is None:
                raise ValueError("noise requested but no generator supplied")
            x_next = x_next + rng.normal(0.0, 1.0, 6) * std
        return x_next

    def reference_inputs(self, refs: np.ndarray) -> np.ndarray:
        """Thruster sequence implied by a reference state trajectory.

        Inverts the velocity rows of one dynamics step at the reference
        heading (sum channel from the translational acceleration along
        the heading, difference channel from the angular acceleration),
        clipped to the input bounds.
        """
        refs = np.asarray(refs, dtype=float)
        if refs.shape[0] < 2:
            return np.zeros((refs.shape[0], 2))
        theta = refs[:-1, 2]
        dv = (refs[1:, 3:6] - refs[:-1, 3:6]) / self.ts
        u_sum = np.cos(theta) * dv[:, 0] + np.sin(theta) * dv[:, 1]
        u_diff = dv[:, 2] / (0.5 * (self.params.alpha + self.params.beta))
        u = 0.5 * np.stack([u_sum + u_diff, u_sum - u_diff], axis=1)
        u = np.clip(u, self.bounds.u_min, self.bounds.u_max)
        return np.vstack([u, u[-1]])


# ---------------------------------------------------------------------------
# JSON model configuration
# ---------------------------------------------------------------------------

def _vec(values) -> np.ndarray:
    out = []
    for v in values:
        if isinstance(v, str):
            s = v.strip().lower()
            if s in ("inf", "+inf"):
                out.append(np.inf)
            elif s == "-inf":
                out.append(-np.inf)
            else:
                out.append(float(v))
        else:
            out.append(float(v))
    return np.array(out)


def _constraints_from_dict(d) -> ConstraintSet:
    return ConstraintSet(
        x_min=_vec(d["x_min"]), x_max=_vec(d["x_max"]),
        u_min=_vec(d["u_min"]), u_max=_vec(d["u_max"]),
        du_min=_vec(d["du_min"]), du_max=_vec(d["du_max"]),
    )


@dataclass
class ModelConfig:
    kind: str
    ts: float
    params: VehicleParams | RobotParams
    constraints: ConstraintSet
    tight_constraints: ConstraintSet | None
    noise_std: np.ndarray
    meas_noise_std: np.ndarray
    q_diag: np.ndarray
    r_diag: np.ndarray
    horizon_max: int
    raw: dict = field(default_factory=dict, repr=False)


def load_config(path) -> ModelConfig:
    """Load a plant + controller configuration from a JSON file."""
    with open(path) as fh:
        data = json.load(fh)
    try:
        kind = data["kind"]
        if kind == "vehicle":
            params = VehicleParams(**data["params"])
        elif kind == "robot":
            params = RobotParams(**data["params"])
        else:
            raise ValueError(f"unknown model kind {kind!r}")
        cfg = ModelConfig(
            kind=kind,
            ts=float(data["ts"]),
            params=params,
            constraints=_constraints_from_dict(data["constraints"]),
            tight_constraints=(_constraints_from_dict(data["tight_constraints"])
                               if "tight_constraints" in data else None),
            noise_std=_vec(data["noise_std"]),
            meas_noise_std=_vec(data["meas_noise_std"]),
            q_diag=_vec(data["mpc"]["q_diag"]),
            r_diag=_vec(data["mpc"]["r_diag"]),
            horizon_max=int(data["mpc"]["horizon_max"]),
            raw=data,
        )
    except KeyError as exc:
        raise ValueError(f"config is missing required field {exc}") from exc
    m = cfg.constraints.x_min.shape[0]
    expected = 4 if kind == "vehicle" else 6
    if m != expected or cfg.noise_std.shape[0] != expected:
        raise ValueError(f"{kind} config must have {expected} state entries")
    return cfg


def build_plant(cfg: ModelConfig, tight: bool = False):
    """Instantiate the plant wrapper for a configuration."""
    bounds = cfg.constraints
    if tight:
        if cfg.tight_constraints is None:
            raise ValueError("config has no tight_constraints section")
        bounds = cfg.tight_constraints
    if cfg.kind == "vehicle":
        return VehiclePlant(cfg.params, cfg.ts, bounds)
    return RobotPlant(cfg.params, cfg.ts, bounds)


def default_config_path(kind: str) -> Path:
    """Path of the bundled vehicle/robot configuration file."""
    p = _CONFIG_DIR / f"{kind}.json"
    if not p.exists():
        raise ValueError(f"no bundled config for kind {kind!r}")
    return p
