"""CSV outputs.  One writer per file kind; headers are fixed."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .primal_dual import TrainReport, metrics_header

RANK_HEADER = ["layer", "lambda", "rank"]
MIXED_HEADER = ["K", "mode", "accuracy", "seed"]
PROBE_HEADER = ["eps", "objective", "lambda", "worst_margin"]
SWEEP_HEADER = ["value", "test_acc", "lambda_final"]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_metrics(path, report: TrainReport):
    return write_csv(path, report.header, report.metrics)


def write_empty_metrics(path, n_constraints):
    return write_csv(path, metrics_header(n_constraints), [])


def write_rank(path, ranking):
    rows = [(layer, lam, pos) for pos, (layer, lam) in enumerate(ranking, start=1)]
    return write_csv(path, RANK_HEADER, rows)


def write_mixed_eval(path, rows):
    return write_csv(path, MIXED_HEADER, rows)


def write_probe(path, probe):
    rows = [(float(e), float(p), float(l), float(m)) for e, p, l, m in
            zip(probe.eps, probe.objective, probe.lambdas, probe.worst_margin)]
    return write_csv(path, PROBE_HEADER, rows)


def write_sweep(path, rows):
    return write_csv(path, SWEEP_HEADER, rows)
