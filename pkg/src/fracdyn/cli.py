"""Command-line front end: every experiment as a subcommand writing data files plus a manifest.

Exit codes: 0 success, 2 usage or domain error, 3 numerical failure,
4 unsupported parameter regime.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .approx import (
    baseline_omega,
    bm_degenerate,
    build_gamma_grid,
    default_horizon,
    criterion,
    solve_optimal_omega,
    weights_to_dict,
)
from .errors import DomainError, FracdynError, UnsupportedRegimeError
from .kernels import FbmKind, FbmSpec
from .simulate import TimeGrid, check_stability, simulate_exact_fbm_type2, simulate_mafbm

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_REGIME = 0, 2, 3, 4
DEFAULT_H_LIST = "0.1,0.2,0.3,0.4,0.6,0.7,0.8,0.9"
DEFAULT_K_LIST = "3,5,7,9"
PATH_KEYS = ("out", "report", "log", "manifest")


def _g(x) -> str:
    # shortest text that round-trips to the same double
    return repr(float(x))


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise DomainError(f"bad number list {text!r}") from exc


def _ints(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise DomainError(f"bad integer list {text!r}") from exc


def _write_text(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_json(path, doc):
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Timer:
    def __init__(self):
        self.phases = {}

    def __call__(self, name):
        timer = self

        class _Phase:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.phases[name] = timer.phases.get(name, 0.0) + time.perf_counter() - self.t

        return _Phase()


def _grid(args, count=None):
    k = args.terms if count is None else count
    if getattr(args, "gamma_ratio", None) is not None:
        return build_gamma_grid(k, ratio=args.gamma_ratio)
    return build_gamma_grid(k, args.gamma_max)


def _weights(spec, grid, horizon, method):
    if method == "optimal":
        return solve_optimal_omega(spec, grid, horizon)
    if method == "baseline":
        return baseline_omega(spec, grid, horizon)
    raise DomainError(f"unknown weight method {method!r}")


# ------------------------------------------------------------- commands


def cmd_weights(args, timer):
    spec = FbmSpec(args.hurst, FbmKind.parse(args.type))
    with timer("solve"):
        grid = _grid(args)
        w = _weights(spec, grid, args.horizon, args.method)
        doc = weights_to_dict(w)
    _write_json(args.out, doc)
    return [args.out]


def cmd_criterion_sweep(args, timer):
    kind = FbmKind.parse(args.type)
    rows = ["H,K,total_optimal,total_baseline"]
    with timer("sweep"):
        for h in _floats(args.hurst_list):
            spec = FbmSpec(h, kind)
            # K = 0 sentinel: omega = 0 leaves the constant term alone
            c = criterion(spec, build_gamma_grid(1, 1.0), np.zeros(1), args.horizon).total
            rows.append(f"{_g(h)},0,{_g(c)},{_g(c)}")
            for k in _ints(args.k_list):
                grid = _grid(args, k)
                opt = criterion(spec, grid, solve_optimal_omega(spec, grid, args.horizon), args.horizon).total
                if h == 0.5 or k < 2:
                    base = "nan"
                else:
                    base = _g(criterion(spec, grid, baseline_omega(spec, grid, args.horizon), args.horizon).total)
                rows.append(f"{_g(h)},{k},{_g(opt)},{base}")
    _write_text(args.out, "\n".join(rows) + "\n")
    return [args.out]


def mse_sweep(hurst_list, k_list, *, t_end=10.0, steps=4000, refine=10, paths=16, seed=0,
              gamma_ratio=2.0, gamma_max=None, horizon=None, methods=("optimal", "baseline"), threads=None,
              timer=None):
    """Path MSE of MA-fBM against the shared-noise Type II reference.

    Returns rows ``(H, K, method, mse_mean, mse_ci95)``; the CI is the
    normal approximation ``1.96 * sd / sqrt(paths)``.
    """
    timer = timer or _Timer()
    horizon = t_end if horizon is None else horizon
    tgrid = TimeGrid.span(t_end, steps)
    rows = []
    for h in hurst_list:
        spec = FbmSpec(h, FbmKind.TYPE_II)
        with timer("exact"):
            exact = simulate_exact_fbm_type2(h, tgrid, seed, paths, refine, threads=threads).paths[:, :, 0]
        for k in k_list:
            grid = build_gamma_grid(k, ratio=gamma_ratio) if gamma_max is None else build_gamma_grid(k, gamma_max)
            check_stability(grid, tgrid.dt)
            for method in methods:
                if method == "baseline" and (h == 0.5 or k < 2):
                    continue
                with timer("mafbm"):
                    w = _weights(spec, grid, horizon, method)
                    approx = simulate_mafbm(spec, grid, w, tgrid, seed, paths, threads=threads).paths[:, :, 0]
                mse = ((approx - exact) ** 2).mean(axis=1)
                ci = 1.96 * mse.std(ddof=1) / math.sqrt(paths) if paths > 1 else float("nan")
                rows.append((h, k, method, float(mse.mean()), float(ci)))
    return rows


def cmd_mse_sweep(args, timer):
    if FbmKind.parse(args.type) is not FbmKind.TYPE_II:
        raise UnsupportedRegimeError(
            "mse-sweep needs exact reference paths, which exist only for Type II: "
            "Type I would require integrating the kernel from t = -infinity")
    rows = mse_sweep(_floats(args.hurst_list), _ints(args.k_list), t_end=args.t_end, steps=args.steps,
                     refine=args.refine, paths=args.paths, seed=args.seed, gamma_ratio=args.gamma_ratio,
                     gamma_max=args.gamma_max, horizon=args.horizon, methods=tuple(args.methods.split(",")),
                     threads=args.threads, timer=timer)
    lines = ["H,K,method,mse_mean,mse_ci95"]
    lines += [f"{_g(h)},{k},{m},{_g(a)},{_g(c)}" for h, k, m, a, c in rows]
    _write_text(args.out, "\n".join(lines) + "\n")
    return [args.out]


BRIDGE_CHECKPOINTS = (0.5, 1.0, 1.5)


def cmd_bridge(args, timer):
    from .infer import TrainConfig, bridge_experiment

    cfg = TrainConfig(lr=args.lr, final_lr=args.final_lr, steps=args.train_steps, batch=args.batch,
                      seed=args.seed, log_path=args.log)
    with timer("train"):
        rep = bridge_experiment(args.hurst, args.theta, args.sigma, args.t_end, cfg, dt=args.dt,
                                hidden=(args.hidden, args.hidden), eval_paths=args.eval_paths, count=args.terms,
                                gamma_max=args.gamma_max, weight_horizon=args.horizon, harmonics=args.harmonics,
                                threads=args.threads)
    _write_text(args.out, rep.csv_text())
    checks = []
    for t in BRIDGE_CHECKPOINTS:
        if not 0 < t < args.t_end:
            continue
        e, a, se = rep.at(t)
        adj = max(abs(e - a) - 3 * se, 0.0) / a
        checks.append({"t": t, "empirical_var": e, "analytical_var": a, "mc_se": se,
                       "rel_gap": (e - a) / a, "rel_gap_after_slack": adj, "pass": bool(adj <= args.tolerance)})
    summary = {"hurst": args.hurst, "theta": args.theta, "max_rel_gap": rep.max_rel_gap,
               "tolerance": args.tolerance, "checkpoints": checks, "pass": all(c["pass"] for c in checks),
               "elbo_first": rep.history[0]["elbo"] if rep.history else None,
               "elbo_last": rep.history[-1]["elbo"] if rep.history else None}
    _write_json(args.report, summary)
    return [args.out, args.report]


def cmd_simulate(args, timer):
    spec = FbmSpec(args.hurst, FbmKind.parse(args.type))
    if args.bm_degenerate:
        if args.hurst != 0.5:
            raise DomainError("--bm-degenerate is the H = 1/2 Wiener limit; pass --hurst 0.5")
        grid = build_gamma_grid(1, bm_degenerate=True)
    else:
        grid = _grid(args)
    steps = args.steps or int(round(args.t_end / args.dt))
    # stability gate before any work
    tgrid = TimeGrid.span(args.t_end, steps, speeds=None if args.kind == "exact" else grid)
    with timer("simulate"):
        if args.kind == "exact":
            if spec.kind is not FbmKind.TYPE_II:
                raise UnsupportedRegimeError("exact reference paths exist only for Type II")
            ens = simulate_exact_fbm_type2(args.hurst, tgrid, args.seed, args.paths, args.refine, dim=args.dim,
                                           threads=args.threads)
        else:
            horizon = args.horizon or default_horizon(spec.kind, args.t_end)
            w = bm_degenerate(spec, horizon) if args.bm_degenerate else _weights(spec, grid, horizon, args.method)
            ens = simulate_mafbm(spec, grid, w, tgrid, args.seed, args.paths, dim=args.dim, threads=args.threads)
    if args.format == "binary":
        ens.to_binary(args.out)
    else:
        ens.to_csv(args.out)
    return [args.out]


def cmd_hurst_fit(args, timer):
    from .infer import ControlNet, Likelihood, LinearPrior, SimConfig, TrainConfig, fit_hurst, synthetic_hurst_data

    kind = FbmKind.parse(args.type)
    with timer("data"):
        if args.data:
            raw = np.loadtxt(args.data, delimiter=",", skiprows=1, ndmin=2)
            grid = build_gamma_grid(args.terms, args.gamma_max)
            t_end = float(raw[:, 0].max())
            tgrid = TimeGrid.span(t_end, int(round(t_end / args.dt)), speeds=grid)
            like = Likelihood(raw[:, 0], raw[:, 1:], args.obs_std)
        else:
            like, tgrid, grid = synthetic_hurst_data(args.true_hurst, args.obs, args.dim, args.t_end, args.dt,
                                                     args.obs_std, args.data_seed, args.terms, args.gamma_max, kind)
    dim = like.obs_values.shape[1]
    cfg = SimConfig(FbmSpec(args.init_hurst, kind), grid, tgrid, x0=(0.0,) * dim)
    net = ControlNet.create(dim, grid.count, (args.hidden, args.hidden), seed=args.seed,
                           anchors=like.obs_times, targets=like.obs_values)
    tcfg = TrainConfig(lr=args.lr, final_lr=args.final_lr, steps=args.train_steps, batch=args.batch,
                       seed=args.seed, hurst_trainable=True, hurst_lr=args.hurst_lr, h_min=args.h_min,
                       h_max=args.h_max, log_path=args.log)
    with timer("train"):
        fit = fit_hurst(LinearPrior(0.0, 1.0), net, like, cfg, tcfg)
    doc = {"hurst": fit.hurst, "init_hurst": args.init_hurst,
           "true_hurst": None if args.data else args.true_hurst,
           "boundary_warning": fit.boundary_warning, "trajectory": fit.trajectory.tolist(),
           "elbo": fit.elbo_curve.tolist()}
    _write_json(args.out, doc)
    return [args.out]


def cmd_replay(args, timer):
    man = json.loads(Path(args.manifest_file).read_text(encoding="utf-8"))
    if man.get("version") != __version__:
        print(f"note: manifest written by version {man.get('version')}, replaying with {__version__}",
              file=sys.stderr)
    config = dict(man["config"])
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        for key in PATH_KEYS:
            if config.get(key):
                config[key] = str(Path(args.out_dir) / Path(config[key]).name)
    if args.threads is not None:
        config["threads"] = args.threads
    sub = argparse.Namespace(**config)
    code, outputs = _execute(sub)
    if code != EXIT_OK:
        return code
    recorded = [o["sha256"] for o in man["outputs"]]
    same = True
    for new, old in zip(outputs, recorded):
        ok = _sha256(new) == old
        same &= ok
        print(f"{'identical' if ok else 'DIFFERS'} {new}")
    if len(outputs) != len(recorded):
        same = False
    return EXIT_OK if same else EXIT_NUMERIC


COMMANDS = {
    "weights": cmd_weights,
    "criterion-sweep": cmd_criterion_sweep,
    "mse-sweep": cmd_mse_sweep,
    "bridge": cmd_bridge,
    "simulate": cmd_simulate,
    "hurst-fit": cmd_hurst_fit,
}


# --------------------------------------------------------------- parser


FLAG_HELP = {
    "type": "fBM type (I: stationary increments, II: Riemann-Liouville)",
    "hurst": "Hurst index H in (0, 1)",
    "method": "weight method",
    "hurst_list": "comma-separated Hurst indices",
    "k_list": "comma-separated bank sizes K",
    "horizon": "time horizon T of the weight criterion",
    "paths": "number of sample paths",
    "t_end": "end of the time grid",
    "steps": "number of coarse time steps",
    "refine": "fine steps per coarse step of the exact reference",
    "methods": "comma-separated weight methods",
    "theta": "mean-reversion rate of the fOU prior",
    "dt": "time step",
    "train_steps": "optimizer steps",
    "batch": "Monte-Carlo paths per optimizer step",
    "lr": "initial learning rate",
    "final_lr": "learning rate at the end of the cosine decay",
    "eval_paths": "paths for the final variance estimate",
    "kind": "MA-fBM bank or exact Type II reference",
    "dim": "state dimension",
    "format": "output format",
    "obs": "number of synthetic observations",
    "obs_std": "observation noise std",
    "data_seed": "seed of the synthetic data",
    "init_hurst": "starting value of H",
    "hurst_lr": "learning rate of the unconstrained H parameter",
    "hidden": "width of both hidden layers",
    "h_min": "lower end of the H range",
    "h_max": "upper end of the H range",
    "manifest_file": "manifest written by an earlier run",
    "terms": "number K of OU processes",
    "gamma_max": "largest speed; grid runs 1/gamma_max..gamma_max",
    "gamma_ratio": "fixed ratio between neighbouring speeds",
    "report": "JSON gap summary path",
}


def _fill_help(parser):
    for action in parser._actions:
        if action.help is None and action.dest in FLAG_HELP:
            action.help = FLAG_HELP[action.dest]


def _common(p, out_default):
    p.add_argument("--seed", type=int, default=0, help="master seed (default: %(default)s)")
    p.add_argument("--out", default=out_default, help="data output path (default: %(default)s)")
    p.add_argument("--manifest", default=None, help="manifest path (default: <out>.manifest.json)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads; default reads FRACDYN_THREADS (0 = auto)")
    p.add_argument("--timings", action="store_true", help="record per-phase wall time in the manifest")


def _grid_flags(p, terms=5, gamma_max=20.0, gamma_ratio=None):
    p.add_argument("--terms", type=int, default=terms, help="number K of OU processes (default: %(default)s)")
    p.add_argument("--gamma-max", type=float, default=gamma_max,
                   help="largest speed; grid runs 1/gamma_max..gamma_max (default: %(default)s)")
    p.add_argument("--gamma-ratio", type=float, default=gamma_ratio,
                   help="fixed ratio between neighbouring speeds; overrides --gamma-max (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fracdyn", description=__doc__.splitlines()[0],
                                 formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--version", action="version", version=f"fracdyn {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("weights", help="solve for the OU-bank weights", formatter_class=fmt)
    p.add_argument("--type", choices=["I", "II"], default="I")
    p.add_argument("--hurst", type=float, default=0.7)
    _grid_flags(p)
    p.add_argument("--horizon", type=float, default=6.0, help="time horizon T of the criterion")
    p.add_argument("--method", choices=["optimal", "baseline"], default="optimal")
    _common(p, "weights.json")

    p = sub.add_parser("criterion-sweep", help="criterion totals over H and K", formatter_class=fmt)
    p.add_argument("--type", choices=["I", "II"], default="II")
    p.add_argument("--hurst-list", default=DEFAULT_H_LIST)
    p.add_argument("--k-list", default=DEFAULT_K_LIST)
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--gamma-max", type=float, default=None, help="pinned-endpoint grid instead of --gamma-ratio")
    p.add_argument("--gamma-ratio", type=float, default=2.0)
    _common(p, "criterion_sweep.csv")

    p = sub.add_parser("mse-sweep", help="path MSE against exact Type II fBM on shared noise", formatter_class=fmt)
    p.add_argument("--type", choices=["I", "II"], default="II")
    p.add_argument("--hurst-list", default=DEFAULT_H_LIST)
    p.add_argument("--k-list", default=DEFAULT_K_LIST)
    p.add_argument("--paths", type=int, default=16)
    p.add_argument("--t-end", type=float, default=10.0)
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--refine", type=int, default=10)
    p.add_argument("--horizon", type=float, default=None, help="weight horizon (default: --t-end)")
    p.add_argument("--gamma-max", type=float, default=None, help="pinned-endpoint grid instead of --gamma-ratio")
    p.add_argument("--gamma-ratio", type=float, default=2.0)
    p.add_argument("--methods", default="optimal,baseline")
    _common(p, "mse_sweep.csv")

    p = sub.add_parser("bridge", help="fOU bridge: trained posterior variance vs closed form", formatter_class=fmt)
    p.add_argument("--hurst", type=float, default=0.7)
    p.add_argument("--theta", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.1, help="observation noise std at t-end")
    p.add_argument("--t-end", type=float, default=2.0)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--train-steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--final-lr", type=float, default=1e-3, help="cosine-decay end point")
    p.add_argument("--hidden", type=int, default=64, help="width of both hidden layers")
    p.add_argument("--harmonics", type=int, default=4, help="number of sin/cos time-feature frequencies")
    p.add_argument("--eval-paths", type=int, default=1024)
    p.add_argument("--terms", type=int, default=5)
    p.add_argument("--gamma-max", type=float, default=20.0)
    p.add_argument("--horizon", type=float, default=6.0, help="weight horizon")
    p.add_argument("--tolerance", type=float, default=0.15, help="relative gap allowed after 3-sigma slack")
    p.add_argument("--report", default="bridge_report.json")
    p.add_argument("--log", default=None, help="JSON-lines training log")
    _common(p, "bridge.csv")

    p = sub.add_parser("simulate", help="MA-fBM or exact Type II sample paths", formatter_class=fmt)
    p.add_argument("--type", choices=["I", "II"], default="II")
    p.add_argument("--hurst", type=float, default=0.7)
    _grid_flags(p)
    p.add_argument("--method", choices=["optimal", "baseline"], default="optimal")
    p.add_argument("--horizon", type=float, default=None,
                   help="weight horizon (default: t-end for Type II, 3 t-end for Type I)")
    p.add_argument("--bm-degenerate", action="store_true", help="K=1, gamma=0, omega=1 (Brownian motion)")
    p.add_argument("--kind", choices=["mafbm", "exact"], default="mafbm")
    p.add_argument("--refine", type=int, default=10, help="refinement of the exact reference")
    p.add_argument("--t-end", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=None, help="overrides --dt")
    p.add_argument("--paths", type=int, default=4)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--format", choices=["csv", "binary"], default="csv")
    _common(p, "paths.csv")

    p = sub.add_parser("hurst-fit", help="estimate a constant Hurst index by ELBO ascent", formatter_class=fmt)
    p.add_argument("--type", choices=["I", "II"], default="II")
    p.add_argument("--data", default=None, help="CSV with header; columns t, x_0, ..., x_{D-1}")
    p.add_argument("--true-hurst", type=float, default=0.7, help="generator H for synthetic data")
    p.add_argument("--obs", type=int, default=32)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--t-end", type=float, default=4.0)
    p.add_argument("--dt", type=float, default=0.02)
    p.add_argument("--obs-std", type=float, default=0.05)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--init-hurst", type=float, default=0.5)
    p.add_argument("--train-steps", type=int, default=1500)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--final-lr", type=float, default=1e-3)
    p.add_argument("--hurst-lr", type=float, default=2e-2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--h-min", type=float, default=0.05)
    p.add_argument("--h-max", type=float, default=0.95)
    p.add_argument("--terms", type=int, default=5)
    p.add_argument("--gamma-max", type=float, default=20.0)
    p.add_argument("--log", default=None, help="JSON-lines training log")
    _common(p, "hurst_fit.json")

    p = sub.add_parser("replay", help="re-run a manifest and compare output bytes", formatter_class=fmt)
    p.add_argument("manifest_file")
    p.add_argument("--out-dir", default=None, help="write regenerated files here instead of over the originals")
    p.add_argument("--threads", type=int, default=None, help="worker threads for the re-run")
    for sp in sub.choices.values():
        _fill_help(sp)
    return ap


# ------------------------------------------------------------------ main


def _execute(args):
    """Run one data command and write its manifest; returns (exit code, outputs)."""
    timer = _Timer()
    started = _dt.datetime.now(_dt.timezone.utc)
    t0 = time.perf_counter()
    outputs = COMMANDS[args.command](args, timer)
    config = {k: v for k, v in vars(args).items()}
    man = {
        "subcommand": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "threads_env": os.environ.get("FRACDYN_THREADS"),
        "wall_clock": {"started": started.isoformat(), "seconds": time.perf_counter() - t0},
        "outputs": [{"path": str(p), "sha256": _sha256(p), "bytes": Path(p).stat().st_size} for p in outputs],
    }
    if getattr(args, "timings", False):
        man["timings"] = timer.phases
    _write_json(args.manifest or f"{args.out}.manifest.json", man)
    return EXIT_OK, outputs


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            return cmd_replay(args, _Timer())
        code, outputs = _execute(args)
        for p in outputs:
            print(p)
        return code
    except UnsupportedRegimeError as exc:
        print(f"fracdyn: unsupported regime: {exc}", file=sys.stderr)
        return EXIT_REGIME
    except DomainError as exc:
        print(f"fracdyn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FracdynError, ArithmeticError, np.linalg.LinAlgError) as exc:
        cond = getattr(exc, "condition", None)
        extra = f" (condition number {cond:.3e})" if cond is not None else ""
        print(f"fracdyn: numerical failure: {exc}{extra}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"fracdyn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
