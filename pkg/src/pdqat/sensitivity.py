"""Using the final multipliers: layer ranking, mixed precision, sweeps.

A large multiplier on layer ``l``'s proximity constraint means the
objective would drop most if that constraint were relaxed, so those
layers are the first candidates for high precision.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Sequence, Tuple

import numpy as np

from .data import Dataset
from .errors import InputError
from .primal_dual import DualState, TrainRunConfig, mean_loss, train_pdqat
from .shadow import ShadowModel, quantized_eval_accuracy

log = logging.getLogger(__name__)


@dataclass
class LayerRanking:
    """``(layer_id, lambda)`` pairs, largest multiplier first."""

    entries: List[Tuple[int, float]]

    @property
    def layer_ids(self):
        return [i for i, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def rank_layers(duals: DualState, statistic="final") -> LayerRanking:
    """Sort constrained layers by multiplier, descending; ties by layer id.

    ``statistic="mean"`` ranks by the trajectory average instead of the
    final value, which is steadier when multipliers oscillate.
    """
    if statistic == "final":
        values = np.asarray(duals.lambdas, dtype=float)
    elif statistic == "mean":
        traj = duals.trajectory_array()
        values = traj[:, :-1].mean(axis=0) if len(traj) else np.asarray(duals.lambdas)
    else:
        raise InputError(f"unknown ranking statistic {statistic!r}")
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return LayerRanking([(i + 1, float(values[i])) for i in order])


def select_layers(ranking: LayerRanking, k, mode="top"):
    if not 0 <= k <= len(ranking):
        raise InputError(f"K must lie in [0, {len(ranking)}], got {k}")
    if mode == "top":
        return ranking.layer_ids[:k]
    if mode == "bottom":
        return ranking.layer_ids[len(ranking) - k:]
    raise InputError(f"mode must be 'top' or 'bottom', got {mode!r}")


def mixed_precision_eval(model: ShadowModel, ranking: LayerRanking, k, mode, x, y):
    """Quantized accuracy with the top/bottom ``k`` ranked layers in high precision.

    The model is restored afterwards.
    """
    chosen = select_layers(ranking, k, mode)
    with model.precision_override({i: False for i in chosen}):
        return quantized_eval_accuracy(model, x, y)


# ---------------------------------------------------------------------------
# repeated training
# ---------------------------------------------------------------------------

def _train_job(args):
    config, train, test = args
    report = train_pdqat(config, train)
    out = {"objective": mean_loss(report.model, train.astype(config.np_dtype)),
           "duals": report.duals, "final_loss": report.metrics[-1][1] if report.metrics else None}
    if test is not None:
        out["test_acc"] = quantized_eval_accuracy(report.model, test.x.astype(config.np_dtype),
                                                  test.y)
    return out


def run_many(configs, train, test=None, jobs=1):
    """Train one model per config, optionally in worker processes."""
    args = [(c, train, test) for c in configs]
    if jobs <= 1 or len(args) <= 1:
        return [_train_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_train_job, args))


def _with_eps(config: TrainRunConfig, param, value, n_layers):
    if param == "eps_out":
        return replace(config, eps_out=float(value))
    if param == "eps_layer":
        return replace(config, eps_layer=float(value))
    if isinstance(param, int):
        eps = config.constraint_set().eps_layer.copy()
        if not 1 <= param <= n_layers:
            raise InputError(f"no constrained layer {param}")
        eps[param - 1] = float(value)
        return replace(config, eps_layer=list(eps))
    raise InputError(f"unknown constraint parameter {param!r}")


def _lambda_for(duals: DualState, param, quantized):
    if param == "eps_out":
        return duals.lambda_out
    if isinstance(param, int):
        return float(duals.lambdas[param - 1])
    lam = duals.lambdas[quantized] if np.any(quantized) else duals.lambdas
    return float(np.mean(lam)) if lam.size else 0.0


@dataclass
class SensitivityProbe:
    eps: np.ndarray
    objective: np.ndarray
    lambdas: np.ndarray
    converged: np.ndarray
    margins: np.ndarray = field(repr=False)

    def tolerance(self, rel=0.05):
        return rel * np.maximum(1.0, np.abs(self.objective))

    @property
    def worst_margin(self):
        """Per grid point, the smallest margin against every other converged point."""
        m = np.where(self.converged[None, :], self.margins, np.inf)
        out = m.min(axis=1)
        return np.where(self.converged, out, np.nan)


def probe_margins(eps, objective, lambdas):
    """``P(e') - P(e) + lam(e) (e' - e)`` for every ordered pair ``(e, e')``."""
    eps = np.asarray(eps, float)
    P = np.asarray(objective, float)
    lam = np.asarray(lambdas, float)
    return P[None, :] - P[:, None] + lam[:, None] * (eps[None, :] - eps[:, None])


def subgradient_probe(config: TrainRunConfig, train: Dataset, eps_grid, param="eps_out",
                      max_loss=None, jobs=1) -> SensitivityProbe:
    """Retrain at each bound in ``eps_grid``; record objective and multiplier.

    ``param`` is ``"eps_out"`` or a 1-based layer id.  Runs whose final
    objective exceeds ``max_loss`` are flagged as not converged and
    excluded from the margins.
    """
    eps = np.asarray(eps_grid, float)
    if eps.size == 0:
        raise InputError("empty epsilon grid")
    if np.any(np.diff(eps) <= 0):
        raise InputError("epsilon grid must be strictly increasing")
    n_layers = len(config.layers) - 1
    configs = [_with_eps(config, param, e, n_layers) for e in eps]
    results = run_many(configs, train, jobs=jobs)
    quantized = np.array(config.quant_spec.enabled[:-1], dtype=bool)
    P = np.array([r["objective"] for r in results])
    lam = np.array([_lambda_for(r["duals"], param, quantized) for r in results])
    conv = np.ones(len(eps), bool) if max_loss is None else P <= max_loss
    for e, ok in zip(eps, conv):
        if not ok:
            log.warning("probe run at eps=%g did not converge", e)
    return SensitivityProbe(eps, P, lam, conv, probe_margins(eps, P, lam))


def epsilon_sweep(config: TrainRunConfig, param, values, train: Dataset, test: Dataset,
                  jobs=1):
    """One seeded run per value; rows of ``(value, test_acc, lambda_final)``.

    For ``eps_layer`` the reported multiplier is the mean over quantized
    constrained layers.
    """
    values = [float(v) for v in values]
    if not values:
        raise InputError("sweep needs at least one value")
    if len(set(values)) != len(values):
        raise InputError("sweep values must be distinct")
    n_layers = len(config.layers) - 1
    configs = [_with_eps(config, param, v, n_layers) for v in values]
    results = run_many(configs, train, test, jobs=jobs)
    quantized = np.array(config.quant_spec.enabled[:-1], dtype=bool)
    return [(v, r["test_acc"], _lambda_for(r["duals"], param, quantized))
            for v, r in zip(values, results)]
