"""``pdqat`` command line.

Exit codes: 0 success, 2 usage/config/input/format errors, 3 numeric
failure (divergence, or a gradient check above tolerance).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plotting, reports
from .checkpoint import load_checkpoint, save_checkpoint
from .config import OUTPUT_ENV, config_echo, data_config_from_echo, load_config, load_data
from .errors import NumericError, PDQATError
from .primal_dual import (DualState, lagrangian_gradcheck, train_baseline_ste, train_pdqat)
from .sensitivity import (epsilon_sweep, mixed_precision_eval, rank_layers,
                          subgradient_probe)
from .shadow import full_eval_accuracy, quantized_eval_accuracy

log = logging.getLogger("pdqat")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
GRADCHECK_TOL = 1e-4
CHECKPOINT_NAME = "model.pdqat"


class UsageError(PDQATError):
    pass


def _out_dir(args, fallback):
    out = getattr(args, "out", None) or os.environ.get(OUTPUT_ENV) or fallback
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _test_set(train, test):
    return test if test is not None else train


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    rc = load_config(args.config)
    out = _out_dir(args, rc.output_dir)
    cfg = rc.train
    train, test = load_data(rc.data)
    if cfg.epochs == 0:
        n = len(cfg.layers) - 1
        reports.write_empty_metrics(out / "metrics.csv", n)
        print(f"epochs = 0: wrote header-only {out / 'metrics.csv'}")
        return EXIT_OK
    fit = train_baseline_ste if args.baseline else train_pdqat
    report = fit(cfg, train)
    reports.write_metrics(out / "metrics.csv", report)
    duals = report.duals
    if report.best_state is not None:
        # checkpoint the best-validation epoch, not the last one
        report.model.load_arrays(report.best_state)
        duals = report.best_duals
    save_checkpoint(out / CHECKPOINT_NAME, report.model, duals, config_echo(rc))
    ev = _test_set(train, test).astype(cfg.np_dtype)
    qa = quantized_eval_accuracy(report.model, ev.x, ev.y)
    fa = full_eval_accuracy(report.model, ev.x, ev.y)
    print(f"epochs run: {report.stop_epoch}  test quantized acc {qa:.4f}  full acc {fa:.4f}")
    if not args.no_figures:
        plotting.plot_training(report, out / "training.png")
    print(f"outputs in {out}")
    return EXIT_OK


def _require_duals(ck, path):
    if ck.duals is None:
        raise UsageError(f"{path} has no dual variables (baseline run?); "
                         "ranking needs a checkpoint produced by PDQAT training")
    return ck.duals


def cmd_rank(args):
    ck = load_checkpoint(args.checkpoint)
    ranking = rank_layers(_require_duals(ck, args.checkpoint), args.statistic)
    out = _out_dir(args, Path(args.checkpoint).parent)
    reports.write_rank(out / "rank.csv", ranking)
    if not args.no_figures:
        plotting.plot_rank(ranking, out / "rank.png")
    for layer, lam in ranking:
        print(f"layer {layer}: lambda = {lam:.6g}")
    return EXIT_OK


def _checkpoints_from_seeds(args):
    """Train one PDQAT model per seed; returns checkpoint paths."""
    rc = load_config(args.config)
    base = _out_dir(args, rc.output_dir)
    train, _ = load_data(rc.data)
    paths = []
    for s in args.seeds:
        srun = replace(rc.train, seed=int(s))
        report = train_pdqat(srun, train)
        sub = base / f"seed_{s}"
        sub.mkdir(parents=True, exist_ok=True)
        echo = config_echo(rc)
        echo["train"]["seed"] = int(s)
        paths.append(save_checkpoint(sub / CHECKPOINT_NAME, report.model, report.duals, echo))
    return paths


def cmd_mixed_eval(args):
    if args.seeds and not args.config:
        raise UsageError("--seeds needs --config to train one model per seed")
    paths = list(args.checkpoints)
    if args.seeds:
        paths += _checkpoints_from_seeds(args)
    if not paths:
        raise UsageError("give at least one checkpoint, or --config with --seeds")
    rc = load_config(args.config) if args.config else None
    data_cfg = rc.data if rc else None
    rows = []
    for p in paths:
        ck = load_checkpoint(p)
        ranking = rank_layers(_require_duals(ck, p))
        dc = data_cfg or data_config_from_echo(ck.config)
        train, test = load_data(dc)
        ev = train if args.split == "train" else _test_set(train, test)
        seed = ck.config.get("train", {}).get("seed", "")
        x = ev.x.astype(np.float32)
        for k in args.k:
            for mode in args.mode:
                acc = mixed_precision_eval(ck.model, ranking, k, mode, x, ev.y)
                rows.append((k, mode, acc, seed))
                print(f"{p}: K={k} {mode} acc={acc:.4f}")
    out = _out_dir(args, rc.output_dir if rc else Path(paths[0]).parent)
    reports.write_mixed_eval(out / "mixed_eval.csv", rows)
    if not args.no_figures:
        plotting.plot_mixed_eval(rows, out / "mixed_eval.png")
    return EXIT_OK


def _param(name):
    if name in ("eps_out", "eps_layer"):
        return name
    if name.startswith("eps_layer_") and name[10:].isdigit():
        return int(name[10:])
    raise UsageError(f"--param must be eps_out, eps_layer or eps_layer_<id>, got {name!r}")


def cmd_sweep(args):
    rc = load_config(args.config)
    out = _out_dir(args, rc.output_dir)
    train, test = load_data(rc.data)
    rows = epsilon_sweep(rc.train, _param(args.param), args.values, train,
                         _test_set(train, test), jobs=args.jobs)
    reports.write_sweep(out / "sweep.csv", rows)
    if not args.no_figures:
        plotting.plot_sweep(rows, out / "sweep.png")
    for v, acc, lam in rows:
        print(f"{args.param}={v:g}: test acc {acc:.4f}  lambda {lam:.6g}")
    return EXIT_OK


def cmd_probe(args):
    rc = load_config(args.config)
    out = _out_dir(args, rc.output_dir)
    train, _ = load_data(rc.data)
    probe = subgradient_probe(rc.train, train, sorted(args.values), _param(args.param),
                              jobs=args.jobs)
    reports.write_probe(out / "probe.csv", probe)
    if not args.no_figures:
        plotting.plot_probe(probe, out / "probe.png")
    tau = probe.tolerance()
    ok = bool(np.all(probe.worst_margin >= -tau))
    for e, p, lam, m in zip(probe.eps, probe.objective, probe.lambdas, probe.worst_margin):
        print(f"eps={e:g}: objective {p:.6g}  lambda {lam:.6g}  worst margin {m:.3g}")
    print("subgradient margins " + ("within tolerance" if ok else "VIOLATED"))
    return EXIT_OK


def gradcheck_points(train_cfg, data, points=20, batch=16, seed=0):
    """Max relative gradient error over ``points`` random weights/multipliers.

    Runs in float64 with every multiplier drawn from (0, 1].
    """
    cfg = replace(train_cfg, dtype="float64")
    cset = cfg.constraint_set()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in range(points):
        model = replace(cfg, seed=int(rng.integers(2**31))).build_model(
            data.input_shape, data.num_classes)
        model.train()
        L1 = model.n_constraints
        duals = DualState(1.0 - rng.random(L1), float(1.0 - rng.random()), cfg.dual_lr)
        idx = rng.choice(len(data), min(batch, len(data)), replace=False)
        x = data.x[idx].astype(np.float64)
        err = lagrangian_gradcheck(model, x, data.y[idx], duals, cset, seed=p)
        worst = max(worst, err)
    return worst


def cmd_gradcheck(args):
    rc = load_config(args.config)
    train, _ = load_data(rc.data)
    err = gradcheck_points(rc.train, train, args.points, args.batch, args.seed)
    passed = err < GRADCHECK_TOL
    print(f"max relative error {err:.3e} over {args.points} points: "
          + ("PASS" if passed else "FAIL"))
    return EXIT_OK if passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="pdqat",
                                description="Primal-dual quantization-aware training.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, figures=True):
        sp.add_argument("--out", help=f"output directory (overrides ${OUTPUT_ENV})")
        if figures:
            sp.add_argument("--no-figures", action="store_true", help="skip PNG figures")

    sp = sub.add_parser("train", help="train a model from a config file")
    sp.add_argument("config")
    sp.add_argument("--baseline", action="store_true",
                    help="train the quantized model directly with STE instead")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("rank", help="rank layers by final multiplier")
    sp.add_argument("checkpoint")
    sp.add_argument("--statistic", choices=["final", "mean"], default="final")
    common(sp)
    sp.set_defaults(func=cmd_rank)

    sp = sub.add_parser("mixed-eval", help="accuracy with top/bottom-K layers unquantized")
    sp.add_argument("checkpoints", nargs="*")
    sp.add_argument("--k", type=int, nargs="+", required=True)
    sp.add_argument("--mode", nargs="+", choices=["top", "bottom"], default=["top", "bottom"])
    sp.add_argument("--config", help="data source; with --seeds also the training recipe")
    sp.add_argument("--seeds", type=int, nargs="+", default=[])
    sp.add_argument("--split", choices=["train", "test"], default="test")
    common(sp)
    sp.set_defaults(func=cmd_mixed_eval)

    sp = sub.add_parser("sweep", help="retrain over a list of constraint bounds")
    sp.add_argument("config")
    sp.add_argument("--param", required=True, help="eps_out, eps_layer or eps_layer_<id>")
    sp.add_argument("--values", type=float, nargs="+", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("probe", help="check multipliers against objective differences")
    sp.add_argument("config")
    sp.add_argument("--param", default="eps_out")
    sp.add_argument("--values", type=float, nargs="+", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    common(sp)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the Lagrangian gradient")
    sp.add_argument("config")
    sp.add_argument("--points", type=int, default=20)
    sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericError as e:
        print(f"pdqat: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as e:
        print(f"pdqat: file not found: {e.filename}", file=sys.stderr)
        return EXIT_USAGE
    except PDQATError as e:
        print(f"pdqat: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
