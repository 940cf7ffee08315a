"""Command-line pipeline: synthesize, label, train and benchmark.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical
failure (every control cycle infeasible).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from . import features as feat
from . import plants, runtime, svr
from .mpc import MpcConfig
from .qp import DEFAULT_CAP, DEFAULT_TOL

PROFILES = {
    "desk": {"cycles": 500, "limit": 20000},
    "paper": {"cycles": 2000, "limit": 2000000},
}

# default hyper-parameters of the final predictors (regularization and
# tube width from the benchmark study; kernel scale suits z-scored
# features of this dimensionality)
DEFAULT_C = 7.4129
DEFAULT_TAU = 0.62
DEFAULT_SCALE = 0.01

# reference-synthesis profiles (maneuver style), tuned per plant:
# (idle_mean, pulse_len, amp_scale, amp_range, wobble_scale,
#  jump_mean, jump_amp, jump_states)
REF_PROFILES = {
    ("vehicle", "slow"): (250.0, 60, 0.12, (0.3, 1.0), 1.0, 0.0, 0.0, ()),
    ("vehicle", "rapid"): (25.0, 35, 1.4, (0.6, 1.0), 1.0, 60.0, 0.10, (3,)),
    ("vehicle", "mixed"): (140.0, 40, 0.9, (0.15, 1.0), 0.0, 0.0, 0.0, ()),
    ("robot", "slow"): (250.0, 60, 0.15, (0.3, 1.0), 1.0, 0.0, 0.0, ()),
    ("robot", "rapid"): (25.0, 30, 0.9, (0.6, 1.0), 1.0, 60.0, 0.05, (0, 1)),
    ("robot", "mixed"): (140.0, 35, 0.7, (0.15, 1.0), 0.0, 0.0, 0.0, ()),
}


def _synth_profile(plant, cfg, profile, length, seed, overrides=None):
    idle, plen, amp, amp_range, wobs, jmean, jamp, jstates = REF_PROFILES[
        (cfg.kind, profile)]
    o = overrides or {}
    idle = o.get("idle_mean", idle)
    plen = o.get("pulse_len", plen)
    amp = o.get("amp_scale", amp)
    wobs = o.get("wobble_scale", wobs)
    wobble = wobs * cfg.meas_noise_std if wobs > 0 else None
    return feat.maneuver_references(
        plant, length, seed, idle_mean=idle, pulse_len=plen, amp_scale=amp,
        amp_range=amp_range, wobble=wobble, jump_mean=jmean, jump_amp=jamp,
        jump_states=jstates)


class _UsageError(Exception):
    pass


class NumericalFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _resolve_config(spec: str) -> plants.ModelConfig:
    path = Path(spec)
    if not path.exists() and spec in ("vehicle", "robot"):
        path = plants.default_config_path(spec)
    if not path.exists():
        raise ValueError(f"config file not found: {spec}")
    return plants.load_config(path)


def _mpc_config(cfg: plants.ModelConfig) -> MpcConfig:
    return MpcConfig(np.diag(cfg.q_diag), np.diag(cfg.r_diag),
                     cfg.horizon_max, cfg.ts)


def _write_table(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            fh.write("\n")
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v)
                             for k, v in row.items()})


def _load_refs(paths) -> list[np.ndarray]:
    out = []
    for p in ([paths] if isinstance(paths, (str, Path)) else paths):
        states, _ = feat.read_references(p)
        out.append(states)
    return out


def _adaptive_controller(args) -> runtime.AdaptiveController:
    model_t = svr.load_model(args.svr_t)
    model_p = svr.load_model(args.svr_p) if getattr(args, "svr_p", None) else None
    return runtime.AdaptiveController(model_t, model_p)


def cmd_synthesize(args) -> int:
    cfg = _resolve_config(args.config)
    plant = plants.build_plant(cfg)
    if args.style == "random":
        states = feat.synthesize_references(plant, args.length, args.seed,
                                            dwell_mean=args.dwell_mean,
                                            input_scale=args.input_scale)
    else:
        overrides = {k: v for k, v in (
            ("idle_mean", args.idle_mean), ("pulse_len", args.pulse_len),
            ("amp_scale", args.amp_scale), ("wobble_scale", args.wobble_scale),
        ) if v is not None}
        states = _synth_profile(plant, cfg, args.ref_profile, args.length,
                                args.seed, overrides)
    feat.write_references(args.out, states, plant.state_names)
    print(f"wrote {args.out}: {states.shape[0]} steps of {states.shape[1]} states")
    return 0


def cmd_build_dataset(args) -> int:
    cfg = _resolve_config(args.config)
    plant = plants.build_plant(cfg)
    trajectories = _load_refs(args.traj)
    limit = args.limit if args.limit is not None else PROFILES[args.profile]["limit"]
    ds = ds_mod.build_dataset(plant, _mpc_config(cfg), trajectories,
                              eps=args.eps, T_l=args.t_max, stride=args.stride,
                              workers=args.workers, cap=args.cap, tol=args.tol,
                              model_id=cfg.kind, limit=limit)
    if len(ds) == 0:
        raise NumericalFailure("no cycle could be labeled")
    ds_mod.write_dataset(ds, args.out)
    print(f"wrote {args.out}: {len(ds)} records")
    return 0


def cmd_train(args) -> int:
    ds = ds_mod.read_dataset(args.dataset)
    X = ds.features
    if args.target == "t":
        y = ds.t_star.astype(float)
    else:
        y = ds.p_star.astype(float)
        X = np.hstack([X, ds.t_star.astype(float)[:, None]])
    if args.grid:
        with open(args.grid) as fh:
            g = json.load(fh)
        spec = svr.GridSearchSpec(c_grid=g["c_grid"], tau_grid=g["tau_grid"],
                                  scale_grid=g["scale_grid"], folds=args.folds)
        best, table = svr.grid_search_cv(X, y, spec, seed=args.seed,
                                         tol=args.smo_tol, cap=args.smo_cap)
        print(f"grid best: {best}")
        c_reg, tau, scale = best["c_reg"], best["tau"], best["scale"]
    else:
        c_reg, tau, scale = args.c_reg, args.tau, args.scale
    model = svr.train_svr(X, y, c_reg, tau, scale, tol=args.smo_tol,
                          cap=args.smo_cap,
                          target=("horizon" if args.target == "t" else "samples"))
    svr.save_model(model, args.out)
    print(f"wrote {args.out}: {model.dual_coeffs.shape[0]} support vectors")
    return 0


def _check_all_infeasible(report: runtime.RunReport):
    if report.rows and all(r.status == "infeasible" for r in report.rows):
        raise NumericalFailure("all control cycles were infeasible")


def cmd_run(args) -> int:
    cfg = _resolve_config(args.config)
    plant = plants.build_plant(cfg, tight=args.constraints == "tight")
    refs = _load_refs(args.refs)[0]
    if args.fixed:
        T, P = (int(v) for v in args.fixed.split(","))
        ctrl = runtime.FixedController(T, P)
    else:
        if not args.svr_t:
            raise ValueError("either --fixed T,P or --svr-t must be given")
        ctrl = _adaptive_controller(args)
    cycles = args.cycles if args.cycles is not None else PROFILES[args.profile]["cycles"]
    rc = runtime.RunConfig(controller=ctrl, cycles=cycles, seed=args.seed,
                           cap=args.cap, tol=args.tol, noise=not args.no_noise)
    rep = runtime.run_loop(rc, plant, _mpc_config(cfg), refs,
                           cfg.noise_std, cfg.meas_noise_std)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep.to_csv(out / f"report_{rep.label}.csv")
    with open(out / "summary.json", "w") as fh:
        json.dump(rep.summary(), fh, indent=2)
        fh.write("\n")
    print(f"{rep.label}: avg_cost={rep.avg_cost:.6g} "
          f"mean_solve_time={rep.mean_solve_time * 1000:.3f}ms "
          f"optimal_fraction={rep.optimal_fraction:.3f}")
    _check_all_infeasible(rep)
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args.config)
    plant = plants.build_plant(cfg)
    mcfg = _mpc_config(cfg)
    refs = _load_refs(args.refs)[0]
    ctrl = _adaptive_controller(args)
    cycles = args.cycles if args.cycles is not None else PROFILES[args.profile]["cycles"]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    T_l = mcfg.T_max
    reports = {}
    for c in (ctrl, runtime.FixedController(T_l, T_l)):
        rc = runtime.RunConfig(controller=c, cycles=cycles, seed=args.seed,
                               cap=args.cap, tol=args.tol)
        rep = runtime.run_loop(rc, plant, mcfg, refs,
                               cfg.noise_std, cfg.meas_noise_std)
        rep.to_csv(out / f"report_{rep.label}.csv")
        reports[rep.label] = rep
    adaptive = reports["adaptive"]
    fixed = reports[f"fixed_{T_l}_{T_l}"]
    summary = {
        "adaptive": adaptive.summary(),
        f"fixed_{T_l}_{T_l}": fixed.summary(),
        "time_reduction": 1.0 - adaptive.mean_solve_time / fixed.mean_solve_time,
        "cost_ratio": adaptive.avg_cost / fixed.avg_cost,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"time reduction {summary['time_reduction'] * 100:.1f}%, "
          f"cost ratio {summary['cost_ratio']:.3f}")
    _check_all_infeasible(adaptive)
    return 0


def cmd_motivation(args) -> int:
    cfg = _resolve_config(args.config)
    plant = plants.build_plant(cfg)
    cycles = args.cycles if args.cycles is not None else PROFILES[args.profile]["cycles"]
    if args.slow_refs and args.rapid_refs:
        slow = _load_refs(args.slow_refs)[0]
        rapid = _load_refs(args.rapid_refs)[0]
    else:
        n = cycles + cfg.horizon_max + 10
        slow = _synth_profile(plant, cfg, "slow", n, args.seed + 1)
        rapid = _synth_profile(plant, cfg, "rapid", n, args.seed + 2)
    table = runtime.motivation_experiment(
        plant, _mpc_config(cfg), slow, rapid, cycles=cycles, seed=args.seed,
        cap=args.cap, tol=args.tol, noise_std=cfg.noise_std,
        meas_noise_std=cfg.meas_noise_std)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(out / "motivation.csv", table)
    for row in table:
        print(row)
    return 0


def cmd_ablation(args) -> int:
    cfg = _resolve_config(args.config)
    plant = plants.build_plant(cfg)
    ds = ds_mod.read_dataset(args.dataset)
    refs = _load_refs(args.refs)[0]
    cycles = args.cycles if args.cycles is not None else PROFILES[args.profile]["cycles"]
    table = runtime.ablation_run(
        plant, _mpc_config(cfg), ds, refs, cycles=cycles, seed=args.seed,
        c_reg=args.c_reg, tau=args.tau, scale=args.scale, cap=args.cap,
        tol=args.tol, noise_std=cfg.noise_std, meas_noise_std=cfg.meas_noise_std,
        smo_tol=args.smo_tol, smo_cap=args.smo_cap)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(out / "ablation.csv", table)
    for row in table:
        print(row)
    return 0


def cmd_feasibility(args) -> int:
    cfg = _resolve_config(args.config)
    plant = plants.build_plant(cfg, tight=args.constraints == "tight")
    refs = _load_refs(args.refs)[0]
    ctrl = _adaptive_controller(args)
    caps = [int(v) for v in args.caps.split(",")]
    cycles = args.cycles if args.cycles is not None else PROFILES[args.profile]["cycles"]
    table = runtime.feasibility_experiment(
        plant, _mpc_config(cfg), refs, caps, ctrl, cycles=cycles,
        seed=args.seed, tol=args.tol, noise_std=cfg.noise_std,
        meas_noise_std=cfg.meas_noise_std)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(out / f"feasibility_{args.constraints}.csv", table)
    for row in table:
        print(row)
    return 0


def _add_common(p, out_dir=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cap", type=int, default=DEFAULT_CAP)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    if out_dir:
        p.add_argument("--out-dir", required=True)


def _add_train_params(p):
    p.add_argument("--c-reg", type=float, default=DEFAULT_C)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--scale", type=float, default=DEFAULT_SCALE)
    p.add_argument("--smo-tol", type=float, default=1e-3)
    p.add_argument("--smo-cap", type=int, default=50)


def build_parser() -> _Parser:
    parser = _Parser(prog="armpc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="generate a reference trajectory CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--style", choices=("random", "maneuver"), default="maneuver")
    p.add_argument("--ref-profile", choices=("mixed", "slow", "rapid"), default="mixed")
    p.add_argument("--dwell-mean", type=float, default=25.0)
    p.add_argument("--input-scale", type=float, default=1.0)
    p.add_argument("--idle-mean", type=float)
    p.add_argument("--pulse-len", type=int)
    p.add_argument("--amp-scale", type=float)
    p.add_argument("--wobble-scale", type=float)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("build-dataset", help="label cycles along trajectories")
    p.add_argument("--config", required=True)
    p.add_argument("--traj", action="append", required=True)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--t-max", type=int, default=40)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--limit", type=int)
    p.add_argument("--cap", type=int, default=DEFAULT_CAP)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="fit a horizon or sample-count predictor")
    p.add_argument("--dataset", required=True)
    p.add_argument("--target", choices=("t", "p"), required=True)
    p.add_argument("--grid")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_train_params(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="one closed-loop run")
    p.add_argument("--config", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--fixed")
    p.add_argument("--svr-t")
    p.add_argument("--svr-p")
    p.add_argument("--cycles", type=int)
    p.add_argument("--no-noise", action="store_true")
    p.add_argument("--constraints", choices=("normal", "tight"), default="normal")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="adaptive vs full-horizon benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--svr-t", required=True)
    p.add_argument("--svr-p", required=True)
    p.add_argument("--cycles", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("motivation", help="fixed-setting comparison table")
    p.add_argument("--config", required=True)
    p.add_argument("--slow-refs")
    p.add_argument("--rapid-refs")
    p.add_argument("--cycles", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_motivation)

    p = sub.add_parser("ablation", help="feature-group ablation table")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--cycles", type=int)
    _add_train_params(p)
    _add_common(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("feasibility", help="optimal-rate vs iteration cap table")
    p.add_argument("--config", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--svr-t", required=True)
    p.add_argument("--svr-p", required=True)
    p.add_argument("--caps", required=True)
    p.add_argument("--constraints", choices=("normal", "tight"), default="normal")
    p.add_argument("--cycles", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_feasibility)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
