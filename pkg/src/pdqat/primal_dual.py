"""Primal-dual quantization-aware training and the STE baseline.

The primal step minimizes the empirical Lagrangian

    mean loss(f(x), y) + sum_l lam_l (mean d_l - eps_l) + lam_out (mean d - eps_out)

over the weights with Adam; after every epoch the constraint slacks are
measured on the training set and the multipliers take one projected
gradient-ascent step, ``lam <- max(0, lam + lr_dual * slack)``.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import nn
from .constraints import (ConstraintSet, SlackAccumulator, SlackReport,
                          compute_slacks, layer_distance_grad,
                          layer_distance_per_sample, output_distance_grad_logits,
                          output_distance_per_sample, trace_distances)
from .data import Dataset, batch_iter, split
from .errors import InputError, NumericError
from .quantize import QuantSpec
from .shadow import LayerSpec, ShadowModel, accuracy

log = logging.getLogger(__name__)


@dataclass
class DualState:
    """Multipliers for the ``L-1`` layer constraints and the output one."""

    lambdas: np.ndarray
    lambda_out: float = 1.0
    lr: float = 0.01
    trajectory: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64).reshape(-1)
        if np.any(self.lambdas < 0) or self.lambda_out < 0:
            raise InputError("multipliers must be non-negative")
        if not self.lr > 0:
            raise InputError(f"dual learning rate must be positive, got {self.lr}")

    @classmethod
    def init(cls, n_layers, lr=0.01, layer_init=0.0, out_init=1.0):
        return cls(np.full(n_layers, float(layer_init)), float(out_init), lr)

    def vector(self):
        return np.append(self.lambdas, self.lambda_out)

    def trajectory_array(self):
        n = len(self.lambdas) + 1
        if not self.trajectory:
            return np.zeros((0, n))
        return np.vstack(self.trajectory)

    def copy(self):
        return copy.deepcopy(self)


def dual_step(duals: DualState, slacks: SlackReport, update_layers=True,
              update_out=True) -> DualState:
    """Projected ascent step on every multiplier; appends to the trajectory.

    Multipliers excluded via ``update_layers`` / ``update_out`` are left as
    they are (still recorded in the trajectory).
    """
    if update_layers:
        duals.lambdas = np.maximum(0.0, duals.lambdas + duals.lr * slacks.layer_slack)
    if update_out:
        duals.lambda_out = max(0.0, duals.lambda_out + duals.lr * slacks.out_slack)
    duals.trajectory.append(duals.vector())
    return duals


@dataclass
class TrainRunConfig:
    layers: List[LayerSpec]
    bits: List[int]
    epochs: int = 50
    batch_size: int = 64
    adam: nn.AdamConfig = field(default_factory=nn.AdamConfig)
    dual_lr: float = 0.01
    eps_layer: object = None
    eps_out: float = 0.2
    mse_norm: str = "per_element"
    log_floor: float = 1e-12
    layer_constraints: bool = True
    dual_update: bool = True
    lambda_layer_init: float = 0.0
    lambda_out_init: float = 1.0
    seed: int = 0
    early_stop: bool = True
    val_fraction: float = 0.1
    patience: int = 10
    slack_subsample: Optional[int] = None
    batchnorm: bool = True
    activation: str = "clip"
    default_bits: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        self.layers = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in self.layers]
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")
        if not self.dual_lr > 0:
            raise InputError("dual learning rate must be positive")
        if self.batch_size < 1:
            raise InputError("batch size must be >= 1")
        if len(self.bits) != len(self.layers):
            raise InputError(
                f"bits list has {len(self.bits)} entries for {len(self.layers)} layers")
        if self.dtype not in nn.DTYPES:
            raise InputError(f"dtype must be one of {sorted(nn.DTYPES)}")

    @property
    def np_dtype(self):
        return nn.DTYPES[self.dtype]

    @property
    def quant_spec(self):
        return QuantSpec.from_bits(self.bits, self.default_bits)

    def constraint_set(self):
        return ConstraintSet.for_bits(self.quant_spec.bits, self.eps_out, self.eps_layer,
                                      mse_norm=self.mse_norm, log_floor=self.log_floor)

    def build_model(self, input_shape, num_classes=None):
        model = ShadowModel.build(input_shape, self.layers, self.quant_spec, self.seed,
                                  self.np_dtype, self.batchnorm, self.activation)
        if num_classes is not None and model.num_classes != num_classes:
            raise InputError(
                f"last layer has {model.num_classes} outputs for {num_classes} classes")
        return model

    def init_duals(self, n_layers):
        return DualState.init(n_layers, self.dual_lr, self.lambda_layer_init,
                              self.lambda_out_init)


@dataclass
class LagrangianTerms:
    value: float
    loss: float
    layer_distances: np.ndarray
    out_distance: float


def _finite(name, v):
    if not np.isfinite(v):
        raise NumericError(f"non-finite {name} term in the Lagrangian: {v}")


def empirical_lagrangian(x, y, model: ShadowModel, duals: DualState,
                         constraints: ConstraintSet, backward=True,
                         quant_chain=None) -> LagrangianTerms:
    """Value of the empirical Lagrangian on one batch.

    With ``backward`` the gradient w.r.t. the weights is accumulated into
    each parameter's ``.grad``.  It flows through the loss, the
    full-precision output probabilities and the hybrid layer evaluations;
    everything on the quantized chain is a constant.  ``quant_chain``
    pins that chain to precomputed activations.
    """
    lam = duals.lambdas
    L1 = model.n_constraints
    if len(lam) != L1 or constraints.n_layers != L1:
        raise InputError(f"model has {L1} constrained layers, got {len(lam)} multipliers "
                         f"and {constraints.n_layers} bounds")
    trace = model.forward_pair(x, keep_cache=backward, quant_chain=quant_chain)
    loss, g_logits = nn.softmax_cross_entropy(trace.logits, y)
    _finite("loss", loss)
    p_full, p_quant = trace.p_full, trace.p_quant
    d_out = float(output_distance_per_sample(p_full, p_quant, constraints.log_floor).mean())
    _finite("output distance", d_out)
    d_layer = np.zeros(L1)
    for l in range(1, L1 + 1):
        d_layer[l - 1] = layer_distance_per_sample(
            trace.hybrid[l], trace.quant[l], constraints.mse_norm).mean()
        _finite(f"layer {l} distance", d_layer[l - 1])
    value = (loss + float(np.dot(lam, d_layer - constraints.eps_layer))
             + duals.lambda_out * (d_out - constraints.eps_out))
    _finite("Lagrangian", value)
    if backward:
        if duals.lambda_out != 0:
            g_logits = g_logits + duals.lambda_out * output_distance_grad_logits(
                p_full, p_quant, constraints.log_floor).astype(g_logits.dtype)
        model.backward(g_logits, trace.full_caches)
        for l in range(1, L1 + 1):
            if lam[l - 1] != 0:
                g = layer_distance_grad(trace.hybrid[l], trace.quant[l], constraints.mse_norm)
                model.blocks[l - 1].backward(g, trace.hybrid_caches[l], scale=lam[l - 1],
                                             need_input=False)
    return LagrangianTerms(float(value), loss, d_layer, d_out)


def lagrangian_gradcheck(model: ShadowModel, x, y, duals: DualState,
                         constraints: ConstraintSet, frozen=True, params=None,
                         max_entries=None, seed=0):
    """Max relative error of the Lagrangian's analytic gradient.

    With ``frozen`` the quantized chain is computed once at the current
    weights and held fixed while differencing, which is exactly the
    function the analytic gradient differentiates.  Without it the
    quantized chain is recomputed at every perturbed point; the two agree
    wherever the quantizers are locally constant.
    """
    chain = model.forward_pair(x, keep_cache=False).quant if frozen else None

    def objective():
        return empirical_lagrangian(x, y, model, duals, constraints, True, chain).value

    if params is None:
        params = model.parameters()
    return nn.gradcheck(objective, params, max_entries=max_entries, seed=seed)


def _shuffle_seed(seed, epoch):
    return np.random.SeedSequence([seed, epoch]).generate_state(1)[0]


def primal_epoch(model, duals, constraints, data: Dataset, adam: nn.AdamConfig,
                 epoch=0, batch_size=64, seed=0):
    """One pass of Adam steps on the Lagrangian with fixed multipliers.

    Returns the sample-weighted mean training loss over the epoch.
    """
    model.train()
    params = model.parameters()
    total, n = 0.0, 0
    for xb, yb in batch_iter(data, batch_size, _shuffle_seed(seed, epoch)):
        model.zero_grad()
        terms = empirical_lagrangian(xb, yb, model, duals, constraints)
        nn.adam_step(params, adam, epoch)
        total += terms.loss * len(yb)
        n += len(yb)
    return total / n


def evaluate_constraints(model: ShadowModel, data: Dataset, constraints: ConstraintSet,
                         batch_size=1024, subsample=None, seed=0):
    """Eval-mode pass over ``data``: slacks plus full/quantized accuracy.

    ``subsample`` restricts the pass to that many randomly drawn samples.
    """
    if subsample is not None and subsample < len(data):
        idx = np.sort(np.random.default_rng(seed).choice(len(data), subsample, replace=False))
        data = data.subset(idx)
    acc = SlackAccumulator(constraints.n_layers)
    with model.evaluating():
        for xb, yb in batch_iter(data, batch_size):
            trace = model.forward_pair(xb, keep_cache=False)
            layer, out = trace_distances(trace, constraints)
            acc.add(layer, out)
            acc.correct_full += int(np.sum(np.argmax(trace.logits, 1) == yb))
            acc.correct_quant += int(np.sum(np.argmax(trace.logits_quant, 1) == yb))
    report = compute_slacks(acc, constraints)
    return report, acc.correct_full / acc.count, acc.correct_quant / acc.count


def mean_loss(model, data: Dataset, batch_size=1024):
    """Eval-mode mean cross-entropy of the full-precision model."""
    logits = model.predict(data.x, "full", batch_size)
    return nn.softmax_cross_entropy(logits, data.y)[0]


def metrics_header(n_constraints):
    idx = range(1, n_constraints + 1)
    return (["epoch", "train_loss", "full_acc", "quant_acc"]
            + [f"d_{i}" for i in idx] + ["d_out"]
            + [f"s_{i}" for i in idx] + ["s_out"]
            + [f"lambda_{i}" for i in idx] + ["lambda_out"])


def metrics_row(epoch, loss, full_acc, quant_acc, slacks: SlackReport, duals):
    row = [epoch, loss, full_acc, quant_acc, *slacks.layer_distance, slacks.out_distance,
           *slacks.layer_slack, slacks.out_slack]
    if duals is None:
        row += [""] * (len(slacks.layer_slack) + 1)
    else:
        row += [*duals.lambdas, duals.lambda_out]
    return row


@dataclass
class TrainReport:
    model: ShadowModel
    duals: Optional[DualState]
    header: List[str]
    metrics: List[list]
    stop_epoch: int
    best_epoch: Optional[int] = None
    best_state: Optional[dict] = None
    best_duals: Optional[DualState] = None
    val_acc: List[float] = field(default_factory=list)

    def column(self, name):
        i = self.header.index(name)
        return np.array([r[i] for r in self.metrics], dtype=float)


class _EarlyStopper:
    def __init__(self, patience):
        self.patience = patience
        self.best = -1.0
        self.best_epoch = None
        self.bad = 0

    def update(self, score, epoch):
        if score > self.best:
            self.best, self.best_epoch, self.bad = score, epoch, 0
            return True
        self.bad += 1
        return False

    @property
    def stop(self):
        return self.bad >= self.patience


def _prepare(config: TrainRunConfig, train: Dataset, val: Optional[Dataset]):
    train = train.astype(config.np_dtype)
    if config.early_stop and val is None:
        train, val = split(train, config.val_fraction, config.seed)
    if val is not None:
        val = val.astype(config.np_dtype)
    return train, val


def _run(config, train, val, model, epoch_fn, duals, on_epoch):
    constraints = config.constraint_set()
    header = metrics_header(model.n_constraints)
    report = TrainReport(model, duals, header, [], 0)
    stopper = _EarlyStopper(config.patience)
    for epoch in range(config.epochs):
        loss = epoch_fn(epoch, constraints)
        if not math.isfinite(loss):
            raise NumericError(f"training loss diverged at epoch {epoch + 1}: {loss}")
        slacks, full_acc, quant_acc = evaluate_constraints(
            model, train, constraints, subsample=config.slack_subsample,
            seed=_shuffle_seed(config.seed, epoch))
        if duals is not None:
            if config.dual_update:
                dual_step(duals, slacks, update_layers=config.layer_constraints)
            else:
                duals.trajectory.append(duals.vector())
        report.metrics.append(metrics_row(epoch + 1, loss, full_acc, quant_acc, slacks, duals))
        report.stop_epoch = epoch + 1
        log.info("epoch %d loss %.4f full %.3f quant %.3f", epoch + 1, loss, full_acc, quant_acc)
        if on_epoch is not None:
            on_epoch(report)
        if val is not None and config.early_stop:
            score = accuracy(model.predict(val.x, "quant"), val.y)
            report.val_acc.append(score)
            if stopper.update(score, epoch + 1):
                report.best_epoch = epoch + 1
                report.best_state = model.snapshot()
                report.best_duals = duals.copy() if duals is not None else None
            if stopper.stop:
                log.info("early stop at epoch %d (best %d)", epoch + 1, stopper.best_epoch)
                break
    return report


def train_pdqat(config: TrainRunConfig, train: Dataset, val: Optional[Dataset] = None,
                on_epoch: Optional[Callable] = None) -> TrainReport:
    """Alternate primal epochs and dual steps for ``config.epochs`` epochs."""
    train, val = _prepare(config, train, val)
    model = config.build_model(train.input_shape, train.num_classes)
    duals = config.init_duals(model.n_constraints)
    if not config.layer_constraints:
        duals.lambdas[:] = 0.0
    adam = replace(config.adam, step=0)

    def epoch_fn(epoch, constraints):
        return primal_epoch(model, duals, constraints, train, adam, epoch,
                            config.batch_size, config.seed)

    return _run(config, train, val, model, epoch_fn, duals, on_epoch)


def train_unconstrained(config: TrainRunConfig, train: Dataset,
                        val: Optional[Dataset] = None,
                        on_epoch: Optional[Callable] = None) -> TrainReport:
    """Plain cross-entropy training of the full-precision model."""
    train, val = _prepare(config, train, val)
    model = config.build_model(train.input_shape, train.num_classes)
    adam = replace(config.adam, step=0)
    params = model.parameters()

    def epoch_fn(epoch, constraints):
        model.train()
        total = 0.0
        for xb, yb in batch_iter(train, config.batch_size, _shuffle_seed(config.seed, epoch)):
            model.zero_grad()
            logits, caches = model.forward(xb, "full", keep_cache=True)
            loss, g = nn.softmax_cross_entropy(logits, yb)
            model.backward(g, caches)
            nn.adam_step(params, adam, epoch)
            total += loss * len(yb)
        return total / len(train)

    return _run(config, train, val, model, epoch_fn, None, on_epoch)


def train_baseline_ste(config: TrainRunConfig, train: Dataset,
                       val: Optional[Dataset] = None) -> TrainReport:
    """Minimize the quantized model's loss directly, backpropagating with STE."""
    train, val = _prepare(config, train, val)
    model = config.build_model(train.input_shape, train.num_classes)
    adam = replace(config.adam, step=0)
    params = model.parameters()

    def epoch_fn(epoch, constraints):
        model.train()
        total = 0.0
        for xb, yb in batch_iter(train, config.batch_size, _shuffle_seed(config.seed, epoch)):
            model.zero_grad()
            # keeps the full-precision batch-norm statistics current
            model.forward(xb, "full")
            logits, caches = model.forward(xb, "quant", keep_cache=True, ste=True)
            loss, g = nn.softmax_cross_entropy(logits, yb)
            _finite("loss", loss)
            model.backward(g, caches)
            nn.adam_step(params, adam, epoch)
            total += loss * len(yb)
        return total / len(train)

    return _run(config, train, val, model, epoch_fn, None, None)
