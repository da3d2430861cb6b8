"""Paired full-precision / quantized model.

A :class:`ShadowModel` is a chain of blocks ``f_L o ... o f_1``.  Each
block is one linear map (dense or conv), an optional batch norm, and an
activation.  Every block can be evaluated three ways:

``full``
    full-precision weights, full-precision batch-norm statistics.
``quant``
    the block's quantized counterpart: ``q_w(W)``, the quantized-path
    batch-norm statistics, and ``q_a`` on the output.  A block whose
    quantization is disabled evaluates exactly like ``full`` here.
``hybrid``
    the full-precision block applied to the quantized chain's input,
    ``f_l(z^q_{l-1})``.  This is where layerwise constraint gradients enter.

Only ``full`` and ``hybrid`` evaluations carry gradients in primal-dual
training; the quantized chain is treated as a constant.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import nn
from .errors import DimensionError, InputError, NumericError, StateError
from .quantize import (QuantSpec, quantize_activations, quantize_weights,
                       ste_backward, ste_weight_backward)


@dataclass
class LayerSpec:
    """Architecture entry for one block."""

    kind: str = "dense"
    size: int = 16
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    batchnorm: Optional[bool] = None
    activation: Optional[str] = None


class Block:
    def __init__(self, layer, activation="clip", batchnorm=True, bits=2,
                 quantized=False, dtype=np.float32):
        self.layer = layer
        self.activation = activation
        self.bits = bits
        self.quantized = quantized
        c = layer.out_channels
        if batchnorm:
            self.affine = nn.affine_params(c, dtype)
            self.bn = {"full": nn.BatchNormState.create(c, dtype),
                       "quant": nn.BatchNormState.create(c, dtype)}
        else:
            self.affine = None
            self.bn = None

    @property
    def kind(self):
        return self.layer.kind

    @property
    def has_bn(self):
        return self.bn is not None

    def named_parameters(self):
        out = [(k, p) for k, p in self.layer.params.items()]
        if self.affine is not None:
            out += [("bn_" + k, p) for k, p in self.affine.items()]
        return out

    def set_training(self, flag):
        if self.bn is not None:
            for s in self.bn.values():
                s.training = flag

    def forward(self, x, path="full", keep_cache=True, ste=False):
        """Evaluate the block along ``path``; returns ``(out, cache)``.

        Running statistics are only updated by the chain that owns them:
        ``full`` updates the full-precision state, ``quant`` updates the
        quantized state when the block is quantized.  ``hybrid`` never
        updates anything.
        """
        quant = path == "quant" and self.quantized
        W = self.layer.params["weight"].value
        weight = quantize_weights(W, self.bits) if quant else None
        pre, lcache = self.layer.forward(x, weight)
        bcache = None
        if self.bn is not None:
            state = self.bn["quant" if quant else "full"]
            update = path == "full" or quant
            pre, bcache = nn.batchnorm_forward(pre, state, self.affine, update)
        out, amask = nn.activation_forward(self.activation, pre)
        prequant = None
        if quant and self.activation != "none":
            if not np.all(np.isfinite(out)):
                raise NumericError(
                    f"non-finite activation entering the quantizer of {self.layer.name}")
            if ste:
                prequant = out
            out = quantize_activations(out, self.bits)
        if not keep_cache:
            return out, None
        return out, {"layer": lcache, "bn": bcache, "act": amask,
                     "weight": weight, "prequant": prequant, "ste": ste and quant}

    def backward(self, grad_out, cache, scale=1.0, need_input=True):
        """Accumulate ``scale * d/dtheta`` into the parameters.

        Returns the gradient w.r.t. the block input (or None).
        """
        if cache is None:
            raise StateError("block backward called without a forward cache")
        g = grad_out if scale == 1.0 else grad_out * scale
        if cache["prequant"] is not None:
            g = ste_backward(g, cache["prequant"])
        g = nn.activation_backward(self.activation, g, cache["act"])
        if cache["bn"] is not None:
            g, dgamma, dbeta = nn.batchnorm_grads(g, cache["bn"], self.affine)
            self.affine["scale"].grad += dgamma
            self.affine["shift"].grad += dbeta
        gx, pg = self.layer.grads(g, cache["layer"], cache["weight"])
        params = self.layer.params
        if cache["ste"]:
            pg["weight"] = ste_weight_backward(pg["weight"], params["weight"].value)
        params["weight"].grad += pg["weight"]
        params["bias"].grad += pg["bias"]
        return gx if need_input else None


@dataclass
class DualForwardTrace:
    """Activations of one dual forward pass.

    ``full[l]`` and ``quant[l]`` hold ``z_l`` and ``z^q_l`` for
    ``l = 0..L`` (index 0 is the input).  ``hybrid[l]`` holds
    ``f_l(z^q_{l-1})`` for the constrained layers ``l = 1..L-1`` (index 0 is
    unused).
    """

    full: List[np.ndarray]
    quant: List[np.ndarray]
    hybrid: List[Optional[np.ndarray]]
    full_caches: List[dict] = field(default_factory=list)
    hybrid_caches: List[Optional[dict]] = field(default_factory=list)

    @property
    def logits(self):
        return self.full[-1]

    @property
    def logits_quant(self):
        return self.quant[-1]

    @property
    def p_full(self):
        return nn.softmax(self.full[-1])

    @property
    def p_quant(self):
        return nn.softmax(self.quant[-1])


class ShadowModel:
    def __init__(self, blocks: List[Block], input_shape, num_classes, specs=None):
        self.blocks = blocks
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.specs = specs
        self.training = True

    @classmethod
    def build(cls, input_shape, specs, quant: QuantSpec = None, seed=0,
              dtype=np.float32, batchnorm=True, activation="clip"):
        """Construct blocks from a list of :class:`LayerSpec`.

        The last block emits logits: no activation, no batch norm.
        """
        specs = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in specs]
        if not specs:
            raise InputError("model needs at least one layer")
        L = len(specs)
        if quant is None:
            quant = QuantSpec.default(L)
        if len(quant) != L:
            raise InputError(f"bits list has {len(quant)} entries for {L} layers")
        rng = np.random.default_rng(seed)
        shape = tuple(input_shape)
        blocks = []
        for i, s in enumerate(specs):
            last = i == L - 1
            name = f"layer{i + 1}"
            if s.kind == "dense":
                n_in = int(np.prod(shape))
                layer = nn.Dense(n_in, s.size, rng, dtype, name)
                shape = (s.size,)
            elif s.kind == "conv":
                if len(shape) != 3:
                    raise DimensionError(f"{name}: conv needs C x H x W input, got {shape}")
                layer = nn.Conv2d(shape[0], s.size, s.kernel, s.stride, s.padding, rng,
                                  dtype, name)
                ho = nn.conv_output_size(shape[1], s.kernel, s.stride, s.padding)
                wo = nn.conv_output_size(shape[2], s.kernel, s.stride, s.padding)
                if ho <= 0 or wo <= 0:
                    raise DimensionError(f"{name}: kernel does not fit input {shape}")
                shape = (s.size, ho, wo)
            else:
                raise InputError(f"{name}: unknown layer kind {s.kind!r}")
            act = "none" if last else (s.activation or activation)
            bn = False if last else (batchnorm if s.batchnorm is None else s.batchnorm)
            blocks.append(Block(layer, act, bn, quant.bits[i], quant.enabled[i], dtype))
        if len(shape) != 1:
            raise DimensionError("last layer must be dense")
        return cls(blocks, input_shape, shape[0], specs)

    # -- bookkeeping --------------------------------------------------------

    @property
    def n_layers(self):
        return len(self.blocks)

    @property
    def n_constraints(self):
        return len(self.blocks) - 1

    @property
    def dtype(self):
        return self.blocks[0].layer.params["weight"].value.dtype

    def named_parameters(self):
        return [(f"layer{i + 1}.{k}", p)
                for i, b in enumerate(self.blocks) for k, p in b.named_parameters()]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self):
        self.training = True
        for b in self.blocks:
            b.set_training(True)
        return self

    def eval(self):
        self.training = False
        for b in self.blocks:
            b.set_training(False)
        return self

    @contextmanager
    def evaluating(self):
        was = self.training
        self.eval()
        try:
            yield self
        finally:
            if was:
                self.train()

    @property
    def quant_spec(self):
        return QuantSpec([b.bits for b in self.blocks],
                         [b.quantized for b in self.blocks])

    def set_precision(self, layer_id, enabled, k=None):
        """Toggle quantization of layer ``layer_id`` (1-based)."""
        if not 1 <= layer_id <= len(self.blocks):
            raise InputError(f"unknown layer id {layer_id}")
        b = self.blocks[layer_id - 1]
        if k is not None:
            if k < 1:
                raise InputError(f"bitwidth must be >= 1, got {k}")
            b.bits = int(k)
        b.quantized = bool(enabled)
        return self

    @contextmanager
    def precision_override(self, enabled: dict):
        """Temporarily set ``{layer_id: enabled}``; restored on exit."""
        saved = {i: self.blocks[i - 1].quantized for i in enabled}
        try:
            for i, on in enabled.items():
                self.set_precision(i, on)
            yield self
        finally:
            for i, on in saved.items():
                self.blocks[i - 1].quantized = on

    # -- forward passes -----------------------------------------------------

    def _check_input(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(
                f"layer1: input shape {tuple(x.shape[1:])}, model expects {self.input_shape}"
            )

    def forward(self, x, path="full", keep_cache=False, ste=False):
        """Single chain; returns ``(logits, caches)``."""
        self._check_input(x)
        caches = []
        z = x
        for b in self.blocks:
            z, c = b.forward(z, path, keep_cache, ste)
            caches.append(c)
        return z, caches

    def backward(self, grad_logits, caches, scale=1.0):
        g = grad_logits
        for b, c in zip(reversed(self.blocks), reversed(caches)):
            g = b.backward(g, c, scale, need_input=b is not self.blocks[0])

    def forward_pair(self, x, keep_cache=True, hybrid=True, quant_chain=None):
        """Full chain, quantized chain and hybrid evaluations on one batch.

        ``quant_chain`` reuses a previously computed ``trace.quant`` instead
        of re-running the quantized chain (used to freeze the shadow model
        when checking gradients).
        """
        self._check_input(x)
        full, hyb = [x], [None]
        quant = [x] if quant_chain is None else list(quant_chain)
        fcaches, hcaches = [], [None]
        L = len(self.blocks)
        for i, b in enumerate(self.blocks):
            z, c = b.forward(full[-1], "full", keep_cache)
            full.append(z)
            fcaches.append(c)
            if hybrid and i < L - 1:
                h, hc = b.forward(quant[i], "hybrid", keep_cache)
                hyb.append(h)
                hcaches.append(hc)
            if quant_chain is None:
                quant.append(b.forward(quant[i], "quant", keep_cache=False)[0])
        return DualForwardTrace(full, quant, hyb, fcaches, hcaches)

    def predict(self, x, path="full", batch_size=1024):
        """Eval-mode logits along one chain, computed in batches."""
        with self.evaluating():
            outs = [self.forward(x[i:i + batch_size], path)[0]
                    for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    # -- state snapshots ----------------------------------------------------

    def state_arrays(self):
        """Every array needed to restore the model, keyed by name."""
        out = {}
        for i, b in enumerate(self.blocks):
            pre = f"layer{i + 1}."
            for k, p in b.named_parameters():
                out[pre + k] = p.value
            if b.bn is not None:
                for prec, s in b.bn.items():
                    out[f"{pre}bn_{prec}.running_mean"] = s.running_mean
                    out[f"{pre}bn_{prec}.running_var"] = s.running_var
        return out

    def snapshot(self):
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def load_arrays(self, arrays, strict=True):
        mine = self.state_arrays()
        if strict:
            missing = set(mine) - set(arrays)
            if missing:
                raise InputError(f"missing arrays: {sorted(missing)}")
        for k, v in mine.items():
            if k in arrays:
                if arrays[k].shape != v.shape:
                    raise DimensionError(f"{k}: shape {arrays[k].shape}, expected {v.shape}")
                v[...] = arrays[k]


def accuracy(logits, labels):
    """Fraction of rows whose argmax equals the label (ties -> lowest id)."""
    if len(labels) == 0:
        raise InputError("cannot compute accuracy of an empty dataset")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def quantized_eval_accuracy(model: ShadowModel, x, y, batch_size=1024):
    if len(y) == 0:
        raise InputError("empty dataset")
    return accuracy(model.predict(x, "quant", batch_size), y)


def full_eval_accuracy(model: ShadowModel, x, y, batch_size=1024):
    if len(y) == 0:
        raise InputError("empty dataset")
    return accuracy(model.predict(x, "full", batch_size), y)
