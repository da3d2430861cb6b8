"""Proximity constraints between a model and its quantized counterpart.

Layerwise constraints use a mean-squared error between the hybrid output
``f_l(z^q_{l-1})`` and the quantized output ``f^q_l(z^q_{l-1})``; the output
constraint uses the cross-entropy of the quantized class probabilities
under the full-precision ones.  Gradients only ever flow into the
full-precision argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import ContractError, DimensionError, InputError

LOG_FLOOR = 1e-12
MSE_NORMS = ("per_element", "per_sample_l2")


def default_epsilon(k):
    """Grid spacing of a ``k``-bit fixed-point code, ``1 / (2**k - 1)``."""
    if k < 1:
        raise InputError(f"bitwidth must be >= 1, got {k}")
    return 1.0 / (2 ** int(k) - 1)


def _flat(z):
    return z.reshape(z.shape[0], -1)


def layer_distance_per_sample(z_hybrid, z_quant, norm="per_element"):
    if z_hybrid.shape != z_quant.shape:
        raise DimensionError(f"layer_distance: shapes {z_hybrid.shape} and {z_quant.shape}")
    sq = _flat(z_hybrid - z_quant) ** 2
    if norm == "per_element":
        return sq.mean(axis=1)
    if norm == "per_sample_l2":
        return sq.sum(axis=1)
    raise InputError(f"unknown mse_norm {norm!r}; expected one of {MSE_NORMS}")


def layer_distance(z_hybrid, z_quant, norm="per_element"):
    """Batch mean of the per-sample squared error (see ``norm``)."""
    return float(layer_distance_per_sample(z_hybrid, z_quant, norm).mean())


def layer_distance_grad(z_hybrid, z_quant, norm="per_element"):
    """Gradient of :func:`layer_distance` w.r.t. ``z_hybrid``."""
    if z_hybrid.shape != z_quant.shape:
        raise DimensionError(f"layer_distance: shapes {z_hybrid.shape} and {z_quant.shape}")
    B = z_hybrid.shape[0]
    scale = 2.0 / B
    if norm == "per_element":
        scale /= _flat(z_hybrid).shape[1]
    elif norm != "per_sample_l2":
        raise InputError(f"unknown mse_norm {norm!r}")
    return (z_hybrid - z_quant) * scale


def _check_simplex(p, name):
    s = p.sum(axis=1)
    if not np.all(np.abs(s - 1) <= 1e-4):
        raise ContractError(f"output_distance: rows of {name} must sum to 1")


def output_distance_per_sample(p_full, p_quant, floor=LOG_FLOOR):
    if p_full.shape != p_quant.shape:
        raise DimensionError(f"output_distance: shapes {p_full.shape} and {p_quant.shape}")
    _check_simplex(p_full, "p_full")
    _check_simplex(p_quant, "p_quant")
    return -(p_full * np.log(np.maximum(p_quant, floor))).sum(axis=1)


def output_distance(p_full, p_quant, floor=LOG_FLOOR):
    """Batch mean of ``-sum_i p_full_i log max(p_quant_i, floor)``."""
    return float(output_distance_per_sample(p_full, p_quant, floor).mean())


def output_distance_grad_logits(p_full, p_quant, floor=LOG_FLOOR):
    """Gradient of :func:`output_distance` w.r.t. the logits behind ``p_full``."""
    B = p_full.shape[0]
    g = -np.log(np.maximum(p_quant, floor)) / B
    return p_full * (g - (p_full * g).sum(axis=1, keepdims=True))


@dataclass
class ConstraintSet:
    """Bounds for the ``L-1`` layerwise constraints and the output one."""

    eps_layer: np.ndarray
    eps_out: float
    mse_norm: str = "per_element"
    log_floor: float = LOG_FLOOR

    def __post_init__(self):
        self.eps_layer = np.asarray(self.eps_layer, dtype=np.float64).reshape(-1)
        if np.any(self.eps_layer < 0) or self.eps_out < 0:
            raise InputError("constraint bounds must be non-negative")
        if self.mse_norm not in MSE_NORMS:
            raise InputError(f"unknown mse_norm {self.mse_norm!r}")

    @property
    def n_layers(self):
        return len(self.eps_layer)

    @classmethod
    def for_bits(cls, bits, eps_out, eps_layer=None, **kw):
        """Bounds for a model whose layers use ``bits`` (one entry per layer).

        Without ``eps_layer`` each constrained layer gets
        :func:`default_epsilon` of its own bitwidth.
        """
        n = len(bits) - 1
        if eps_layer is None:
            eps_layer = [default_epsilon(b) for b in bits[:n]]
        elif np.isscalar(eps_layer):
            eps_layer = [float(eps_layer)] * n
        elif len(eps_layer) != n:
            raise InputError(f"eps_layer needs {n} entries, got {len(eps_layer)}")
        return cls(np.asarray(eps_layer, dtype=float), float(eps_out), **kw)


@dataclass
class SlackReport:
    layer_distance: np.ndarray
    layer_slack: np.ndarray
    out_distance: float
    out_slack: float
    count: int


@dataclass
class SlackAccumulator:
    """Running sums of per-sample distances over an evaluation pass."""

    n_layers: int
    layer_sum: np.ndarray = None
    out_sum: float = 0.0
    count: int = 0
    correct_full: int = 0
    correct_quant: int = 0

    def __post_init__(self):
        if self.layer_sum is None:
            self.layer_sum = np.zeros(self.n_layers)

    def add(self, layer_per_sample: List[np.ndarray], out_per_sample: np.ndarray):
        for i, d in enumerate(layer_per_sample):
            self.layer_sum[i] += float(np.sum(d, dtype=np.float64))
        self.out_sum += float(np.sum(out_per_sample, dtype=np.float64))
        self.count += len(out_per_sample)


def trace_distances(trace, constraints: ConstraintSet):
    """Per-sample layer distances (list) and output distances of a trace."""
    layer = [layer_distance_per_sample(trace.hybrid[l], trace.quant[l], constraints.mse_norm)
             for l in range(1, constraints.n_layers + 1)]
    out = output_distance_per_sample(trace.p_full, trace.p_quant, constraints.log_floor)
    return layer, out


def compute_slacks(acc: SlackAccumulator, constraints: ConstraintSet) -> SlackReport:
    """Dataset-mean distances minus their bounds."""
    if acc.count == 0:
        raise InputError("compute_slacks needs at least one evaluated sample")
    ld = acc.layer_sum / acc.count
    od = acc.out_sum / acc.count
    return SlackReport(ld, ld - constraints.eps_layer, od, od - constraints.eps_out, acc.count)
