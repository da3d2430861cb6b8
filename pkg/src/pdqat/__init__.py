"""Primal-dual quantization-aware training in numpy.

A full-precision network is trained jointly with its quantized shadow
under explicit proximity constraints; the constraint multipliers double
as per-layer sensitivity scores.
"""

from .errors import (ConfigError, ContractError, DimensionError, FormatError, InputError,
                     NumericError, PDQATError, StateError, UnsupportedVersionError)
from .primal_dual import (DualState, TrainReport, TrainRunConfig, empirical_lagrangian,
                          train_baseline_ste, train_pdqat, train_unconstrained)
from .quantize import QuantSpec, quantize_activations, quantize_weights
from .shadow import LayerSpec, ShadowModel

__version__ = "0.1.0"
