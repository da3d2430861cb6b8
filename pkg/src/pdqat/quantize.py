"""Fixed-point weight/activation quantizers (DoReFa style) and the STE.

The straight-through estimator is only used by the baseline trainer; the
primal-dual trainer never differentiates through a quantizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import ContractError, InputError


def levels(k):
    """Number of grid steps, ``2**k - 1``."""
    if k < 1:
        raise InputError(f"bitwidth must be >= 1, got {k}")
    return float(2 ** int(k) - 1)


def fixed_point_round(z, k):
    """Snap values in [0, 1] to the grid ``{i / (2**k - 1)}``.

    Ties round half away from zero, which on [0, 1] is ``floor(x + 0.5)``.
    Raises ContractError if any entry is outside [0, 1]; clip first.
    """
    z = np.asarray(z)
    if z.size and not (np.all(z >= 0) and np.all(z <= 1)):
        raise ContractError("fixed_point_round expects inputs in [0, 1]")
    n = levels(k)
    return np.floor(z * n + 0.5) / n


def quantize_weights(w, k):
    """``2 r(1/2 + tanh(w) / (2 max|tanh(w)|)) - 1`` with a per-tensor max.

    All-zero ``w`` (max|tanh| = 0) maps to zeros.
    """
    w = np.asarray(w)
    t = np.tanh(w)
    m = np.max(np.abs(t)) if t.size else 0.0
    if m == 0:
        return np.zeros_like(w)
    inner = np.clip(0.5 + t / (2 * m), 0, 1)
    return (2 * fixed_point_round(inner, k) - 1).astype(w.dtype, copy=False)


def quantize_activations(a, k):
    a = np.asarray(a)
    return fixed_point_round(np.clip(a, 0, 1), k).astype(a.dtype, copy=False)


def ste_backward(grad_out, pre_quant_input, clip=True):
    """Straight-through gradient of a quantizer.

    With ``clip`` (activation quantizer) the gradient passes where the
    pre-quantization input lies in [0, 1] and is zero elsewhere.  Without it
    (the rounding stage of the weight quantizer) it passes everywhere.
    """
    if not clip:
        return grad_out
    x = pre_quant_input
    return grad_out * ((x >= 0) & (x <= 1))


def ste_weight_backward(grad_q, w):
    """STE through ``quantize_weights``: round is identity, max is constant.

    d/dw of ``tanh(w) / max|tanh(w)|`` with the max frozen.
    """
    t = np.tanh(w)
    m = np.max(np.abs(t))
    if m == 0:
        return np.zeros_like(grad_q)
    return grad_q * (1 - t * t) / m


@dataclass
class QuantSpec:
    """Per-layer bitwidths.  A layer is quantized iff its entry is enabled.

    Built from a bits list where 0 means high precision, e.g.
    ``[0, 2, 2, 0]``.
    """

    bits: List[int]
    enabled: List[bool]
    default_bits: int = 2

    def __post_init__(self):
        if len(self.bits) != len(self.enabled):
            raise InputError("bits and enabled lists differ in length")
        for i, (b, on) in enumerate(zip(self.bits, self.enabled)):
            if on and b < 1:
                raise InputError(f"layer {i + 1}: enabled with bitwidth {b}")

    @classmethod
    def from_bits(cls, bits, default_bits=2):
        bits = [int(b) for b in bits]
        if any(b < 0 for b in bits):
            raise InputError("bitwidths must be >= 0 (0 = high precision)")
        return cls([b if b > 0 else default_bits for b in bits],
                   [b > 0 for b in bits], default_bits)

    @classmethod
    def default(cls, n_layers, k=2):
        """First and last layers high precision, the rest at ``k`` bits."""
        bits = [k] * n_layers
        bits[0] = 0
        bits[-1] = 0
        return cls.from_bits(bits, default_bits=k)

    def to_bits(self):
        return [b if on else 0 for b, on in zip(self.bits, self.enabled)]

    def __len__(self):
        return len(self.bits)
