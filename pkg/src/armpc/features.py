"""Regression features from reference windows, and reference synthesis.

Each per-state trajectory over the lookahead window contributes one mean
discrete-curvature value plus its periodized Daubechies-2 wavelet
coefficients; the per-state absolute tracking errors at the window start
are appended.  The layout is fixed per model so feature columns can be
addressed by group (curvature / wavelet / error) for ablations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "WaveletPlan",
    "ReferenceWindow",
    "FeatureLayout",
    "FeatureVector",
    "curvature",
    "dwt",
    "idwt",
    "extract_features",
    "synthesize_references",
    "write_references",
    "read_references",
]

_SQRT3 = math.sqrt(3.0)
_DB2_LO = np.array([(1 + _SQRT3), (3 + _SQRT3), (3 - _SQRT3), (1 - _SQRT3)]) / (4 * math.sqrt(2.0))
_DB2_HI = np.array([_DB2_LO[3], -_DB2_LO[2], _DB2_LO[1], -_DB2_LO[0]])


@dataclass(frozen=True)
class WaveletPlan:
    """Analysis filter pair + decomposition depth, periodized extension."""

    lo: np.ndarray
    hi: np.ndarray
    levels: int
    mode: str = "periodized"

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.mode != "periodized":
            raise ValueError("only periodized extension is supported")
        if abs(float(np.sum(lo)) - math.sqrt(2.0)) > 1e-12:
            raise ValueError("low-pass filter must sum to sqrt(2)")
        if abs(float(np.sum(hi))) > 1e-12:
            raise ValueError("high-pass filter must sum to 0")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @staticmethod
    def daubechies2(levels: int = 3) -> "WaveletPlan":
        return WaveletPlan(lo=_DB2_LO.copy(), hi=_DB2_HI.copy(), levels=levels)

    def check_length(self, length: int):
        if length % (1 << self.levels):
            raise ValueError(
                f"signal length {length} not divisible by 2^{self.levels}")


def _analyze_level(x: np.ndarray, plan: WaveletPlan):
    """One analysis level; ``x`` may be (n,) or (n, k) for k signals."""
    n = x.shape[0]
    half = n // 2
    idx = (2 * np.arange(half)[:, None] + np.arange(plan.lo.shape[0])[None, :]) % n
    win = x[idx]
    if x.ndim == 1:
        return win @ plan.lo, win @ plan.hi
    return np.einsum("hts,t->hs", win, plan.lo), np.einsum("hts,t->hs", win, plan.hi)


def _synthesize_level(a: np.ndarray, d: np.ndarray, plan: WaveletPlan) -> np.ndarray:
    half = a.shape[0]
    n = 2 * half
    x = np.zeros(n)
    taps = plan.lo.shape[0]
    for i in range(half):
        for t in range(taps):
            j = (2 * i + t) % n
            x[j] += plan.lo[t] * a[i] + plan.hi[t] * d[i]
    return x


def dwt(signal, plan: WaveletPlan) -> np.ndarray:
    """Pyramid decomposition; output is [a_L, d_L, d_{L-1}, ..., d_1].

    Under periodized extension the coefficient count equals the signal
    length; the transform is orthonormal.
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise ValueError("signal must be 1-D")
    plan.check_length(x.shape[0])
    details = []
    a = x
    for _ in range(plan.levels):
        a, d = _analyze_level(a, plan)
        details.append(d)
    return np.concatenate([a] + details[::-1])


def idwt(coeffs, plan: WaveletPlan) -> np.ndarray:
    """Inverse of :func:`dwt` (transpose pyramid of the orthonormal levels)."""
    c = np.asarray(coeffs, dtype=float)
    plan.check_length(c.shape[0])
    base = c.shape[0] >> plan.levels
    a = c[:base]
    pos = base
    for _ in range(plan.levels):
        d = c[pos:pos + a.shape[0]]
        pos += a.shape[0]
        a = _synthesize_level(a, d, plan)
    return a


def curvature(traj) -> float:
    """Mean discrete curvature of a trajectory.

    Uses forward differences; the two trailing points where the second
    difference is undefined are skipped and the mean is taken over the
    valid terms.
    """
    r = np.asarray(traj, dtype=float)
    if r.ndim != 1 or r.shape[0] < 3:
        raise ValueError("trajectory must be 1-D with length >= 3")
    d1 = np.diff(r)
    d2 = np.diff(r, n=2)
    denom = np.power(1.0 + d1[:-1] ** 2, 1.5)
    return float(np.mean(np.abs(d2) / denom))


@dataclass(frozen=True)
class ReferenceWindow:
    """Lookahead reference window: rows are steps, columns are states."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("window must be 2-D (steps x states)")
        if not np.all(np.isfinite(v)):
            raise ValueError("window contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureLayout:
    """Column naming/grouping of the flat feature vector."""

    m: int
    wavelet_len: int

    @property
    def per_state(self) -> int:
        return 1 + self.wavelet_len

    @property
    def size(self) -> int:
        return self.m * self.per_state + self.m

    def names(self) -> list[str]:
        out = []
        for i in range(self.m):
            out.append(f"curv{i}")
            out.extend(f"wav{i}_{j:02d}" for j in range(self.wavelet_len))
        out.extend(f"err{i}" for i in range(self.m))
        return out

    def state_offset(self, i: int) -> int:
        return i * self.per_state

    def group_indices(self, group: str) -> np.ndarray:
        if group == "curvature":
            return np.array([i * self.per_state for i in range(self.m)])
        if group == "wavelet":
            return np.concatenate([
                i * self.per_state + 1 + np.arange(self.wavelet_len)
                for i in range(self.m)])
        if group == "error":
            return self.m * self.per_state + np.arange(self.m)
        raise ValueError(f"unknown feature group {group!r}")

    def mask(self, drop=()) -> np.ndarray:
        """Boolean keep-mask with the given groups dropped."""
        keep = np.ones(self.size, dtype=bool)
        for g in drop:
            keep[self.group_indices(g)] = False
        return keep


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    layout: FeatureLayout = field(repr=False)


def extract_features(window: ReferenceWindow | np.ndarray, x_c,
                     plan: WaveletPlan | None = None) -> FeatureVector:
    """Per-state [curvature, wavelet coefficients] blocks plus the error vector."""
    if not isinstance(window, ReferenceWindow):
        window = ReferenceWindow(np.asarray(window))
    if plan is None:
        plan = WaveletPlan.daubechies2()
    x_c = np.asarray(x_c, dtype=float)
    if x_c.shape != (window.m,):
        raise ValueError(f"state has shape {x_c.shape}, expected ({window.m},)")
    layout = FeatureLayout(m=window.m, wavelet_len=window.length)
    plan.check_length(window.length)
    vals = np.empty(layout.size)
    # all states at once: batched curvature, then the wavelet pyramid in
    # coefficient order [a_L, d_L, ..., d_1] per state.  The wavelet
    # block is taken on the window relative to its first sample, so the
    # features describe the upcoming variation rather than the absolute
    # operating point (position states drift arbitrarily far).
    w = window.values - window.values[0]
    d1 = np.diff(w, axis=0)
    d2 = np.diff(w, n=2, axis=0)
    curvs = np.mean(np.abs(d2) / np.power(1.0 + d1[:-1] ** 2, 1.5), axis=0)
    coeffs = np.empty((window.length, window.m))
    a = w
    pos = window.length
    for _ in range(plan.levels):
        a, d = _analyze_level(a, plan)
        coeffs[pos - d.shape[0]:pos] = d
        pos -= d.shape[0]
    coeffs[:pos] = a
    per = layout.per_state
    for i in range(window.m):
        off = i * per
        vals[off] = curvs[i]
        vals[off + 1:off + per] = coeffs[:, i]
    vals[layout.m * per:] = np.abs(window.values[0] - x_c)
    return FeatureVector(values=vals, layout=layout)


def synthesize_references(plant, length: int, seed: int,
                          dwell_mean: float = 25.0,
                          input_scale: float = 1.0) -> np.ndarray:
    """Random reference state trajectory respecting the input constraints.

    Simulates the plant (noiseless) from the origin under piecewise
    constant inputs redrawn uniformly within ``input_scale`` times the
    input bounds after geometric dwell times, slew-limited by the rate
    bounds.  Returns a (length, m) state array; deterministic per seed.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    b = plant.bounds
    n = b.u_min.shape[0]
    x = np.zeros(plant.m)
    u = np.zeros(n)
    target = np.zeros(n)
    states = np.empty((length, plant.m))
    states[0] = x
    countdown = 0
    for k in range(length - 1):
        if countdown <= 0:
            target = rng.uniform(b.u_min * input_scale, b.u_max * input_scale)
            countdown = rng.geometric(1.0 / dwell_mean) if dwell_mean > 0 else length
        countdown -= 1
        u = np.clip(target, u + b.du_min, u + b.du_max)
        x = plant.true_step(x, u)
        states[k + 1] = x
    return states


def maneuver_references(plant, length: int, seed: int,
                        idle_mean: float = 60.0,
                        pulse_len: int = 12,
                        amp_scale: float = 1.0,
                        amp_range: tuple[float, float] = (0.3, 1.0),
                        wobble=None,
                        wobble_periods: tuple[float, float] = (4.0, 16.0),
                        jump_mean: float = 0.0,
                        jump_amp: float = 0.0,
                        jump_states: tuple = ()) -> np.ndarray:
    """Reference trajectory built from paired input pulses.

    Each maneuver applies a random input direction for ``pulse_len``
    steps and then its negation for the same duration, so rate states
    return near zero and position states settle at a new offset; idle
    gaps separate maneuvers.  Short idles and strong amplitudes give
    rapidly changing references, long idles and small amplitudes give
    slowly changing ones.  Inputs respect the bound and rate constraints.

    ``wobble`` (per-state amplitude vector) superimposes a smooth random
    perturbation that is not exactly realizable by the dynamics, the way
    planner-generated paths deviate from the plant manifold; it gives
    every controller the same irreducible tracking floor.

    ``jump_mean`` > 0 adds waypoint-style step discontinuities: at
    geometric intervals the reference of each state in ``jump_states``
    shifts by a random offset up to ``jump_amp``.  Step changes reward
    lookahead, since a controller can only pre-act on a jump once it
    enters its horizon window.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    b = plant.bounds
    n = b.u_min.shape[0]
    # amplitude ceiling keeping the induced reference states within the
    # plant's state bounds (steady-state gain headroom)
    amp_cap = 0.15 if getattr(plant, "kind", "") == "vehicle" else 0.35
    x = np.zeros(plant.m)
    u = np.zeros(n)
    states = np.empty((length, plant.m))
    states[0] = x
    phase = "idle"
    countdown = max(1, int(rng.geometric(1.0 / idle_mean))) if idle_mean > 0 else length
    pulse = np.zeros(n)
    for k in range(length - 1):
        if countdown <= 0:
            if phase == "idle":
                direction = rng.normal(size=n)
                direction /= max(np.linalg.norm(direction), 1e-12)
                amp = rng.uniform(amp_range[0], amp_range[1]) * amp_scale * amp_cap
                pulse = amp * direction * np.minimum(np.abs(b.u_max), np.abs(b.u_min))
                phase, countdown = "fwd", pulse_len
            elif phase == "fwd":
                pulse = -pulse
                phase, countdown = "back", pulse_len
            else:
                pulse = np.zeros(n)
                phase = "idle"
                countdown = max(1, int(rng.geometric(1.0 / idle_mean))) if idle_mean > 0 else length
        countdown -= 1
        target = np.clip(pulse, b.u_min, b.u_max)
        u = np.clip(target, u + b.du_min, u + b.du_max)
        x = plant.true_step(x, u)
        states[k + 1] = x
    if jump_mean > 0 and jump_states:
        offsets = np.zeros((length, plant.m))
        k = int(rng.geometric(1.0 / jump_mean))
        while k < length:
            for si in jump_states:
                offsets[k:, si] += rng.uniform(0.5, 1.0) * jump_amp * rng.choice((-1.0, 1.0))
            k += int(rng.geometric(1.0 / jump_mean))
        states = states + offsets
    if wobble is not None:
        amps = np.broadcast_to(np.asarray(wobble, dtype=float), (plant.m,))
        t = np.arange(length)[:, None, None]
        periods = rng.uniform(wobble_periods[0], wobble_periods[1], size=(plant.m, 3))
        phases = rng.uniform(0.0, 2.0 * math.pi, size=(plant.m, 3))
        waves = np.sin(2.0 * math.pi * t / periods[None] + phases[None])
        states = states + amps[None, :] * np.mean(waves, axis=2)
    return states


def write_references(path, states: np.ndarray, state_names) -> None:
    """Persist a reference trajectory as CSV (one row per step)."""
    states = np.asarray(states, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(state_names)
        for row in states:
            writer.writerow([f"{v:.17g}" for v in row])


def read_references(path):
    """Load a reference trajectory CSV; returns (states, state_names)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            names = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty reference file") from None
        rows = []
        for row in reader:
            if len(row) != len(names):
                raise ValueError(f"{path}: ragged row with {len(row)} fields")
            rows.append([float(v) for v in row])
    if not rows:
        raise ValueError(f"{path}: no reference rows")
    return np.array(rows), names
