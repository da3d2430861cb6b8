"""Figures written next to the CSV outputs.

Everything renders through the Agg backend straight to files; nothing is
ever shown interactively.
"""

from __future__ import annotations

import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def _figure(width=6.0, height=None, ncols=1):
    height = height or width * GOLDEN
    return plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(report, path):
    """Multipliers (left) and per-layer distances (right) per epoch."""
    fig, axes = _figure(ncols=2)
    ep = report.column("epoch")
    lam_cols = [h for h in report.header if h.startswith("lambda_")]
    d_cols = [h for h in report.header if h.startswith("d_")]
    ax = axes[0, 0]
    if report.duals is not None:
        for h in lam_cols:
            ax.plot(ep, report.column(h), label=h.replace("lambda_", "layer ")
                    if h != "lambda_out" else "output")
        ax.legend(fontsize=7)
    ax.set_xlabel("epoch")
    ax.set_ylabel("multiplier")
    ax = axes[0, 1]
    for h in d_cols:
        ax.plot(ep, report.column(h), label=h)
    ax.set_yscale("symlog", linthresh=1e-4)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean distance")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_rank(ranking, path):
    fig, axes = _figure()
    ax = axes[0, 0]
    ids = [str(i) for i, _ in ranking]
    ax.bar(ids, [l for _, l in ranking], color="0.4")
    ax.set_xlabel("layer (descending multiplier)")
    ax.set_ylabel("final multiplier")
    return _save(fig, path)


def plot_mixed_eval(rows, path):
    """Mean accuracy vs K per mode, error bars over seeds."""
    by = defaultdict(lambda: defaultdict(list))
    for k, mode, acc, _seed in rows:
        by[mode][int(k)].append(float(acc))
    fig, axes = _figure()
    ax = axes[0, 0]
    for mode, d in sorted(by.items()):
        ks = sorted(d)
        mu = [np.mean(d[k]) for k in ks]
        sd = [np.std(d[k]) for k in ks]
        ax.errorbar(ks, mu, yerr=sd, marker="o", capsize=3,
                    label="largest multipliers" if mode == "top" else "smallest multipliers")
    ax.set_xlabel("layers in high precision")
    ax.set_ylabel("accuracy")
    ax.legend()
    return _save(fig, path)


def plot_probe(probe, path):
    fig, axes = _figure()
    ax = axes[0, 0]
    ax.plot(probe.eps, probe.objective, "o-", color="k")
    span = (probe.eps.max() - probe.eps.min()) or 1.0
    for e, p, lam in zip(probe.eps, probe.objective, probe.lambdas):
        xs = np.array([e - 0.15 * span, e + 0.15 * span])
        ax.plot(xs, p - lam * (xs - e), "--", lw=0.8, color="tab:red")
    ax.set_xlabel("constraint bound")
    ax.set_ylabel("final objective")
    return _save(fig, path)


def plot_sweep(rows, path):
    fig, axes = _figure(ncols=2)
    v = [r[0] for r in rows]
    axes[0, 0].plot(v, [r[1] for r in rows], "o-")
    axes[0, 0].set_xlabel("value")
    axes[0, 0].set_ylabel("quantized test accuracy")
    axes[0, 1].plot(v, [r[2] for r in rows], "o-", color="tab:red")
    axes[0, 1].set_xlabel("value")
    axes[0, 1].set_ylabel("final multiplier")
    return _save(fig, path)
