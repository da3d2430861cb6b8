"""Small numpy layer engine with explicit forward and backward passes.

Tensors are plain ``numpy.ndarray`` objects.  Every forward kernel returns
``(output, cache)`` and the matching backward kernel consumes that cache,
so the same layer can be evaluated several times in one step (full chain,
hybrid evaluation) without the caches clobbering each other.

Training runs in float32.  float64 exists for gradient checking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError, StateError

DTYPES = {"float32": np.float32, "float64": np.float64}

FD_STEP = 1e-5


class Parameter:
    """A trainable array with its gradient accumulator and Adam moments."""

    __slots__ = ("value", "grad", "m", "v")

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0)

    def __repr__(self):
        return f"Parameter(shape={self.value.shape}, dtype={self.value.dtype})"


LayerParams = dict  # name -> Parameter


def _uniform(rng, bound, shape, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def _dense_check(x, W, name):
    if x.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(
            f"{name}: input shape {x.shape} incompatible with weight {W.shape}"
        )


def dense_forward(x, params, weight=None, name="dense"):
    """``x @ W + b`` row by row.  ``weight`` overrides the stored weight."""
    W = params["weight"].value if weight is None else weight
    _dense_check(x, W, name)
    return x @ W + params["bias"].value


def dense_grads(grad_out, x, W):
    """Return ``(grad_in, grad_W, grad_b)`` without touching any buffer."""
    return grad_out @ W.T, x.T @ grad_out, grad_out.sum(axis=0)


def dense_backward(grad_out, cached_input, params, weight=None):
    """Backward of :func:`dense_forward`.

    Accumulates weight and bias gradients into ``params`` and returns the
    gradient with respect to the input.
    """
    if cached_input is None:
        raise StateError("dense_backward called without a forward cache")
    W = params["weight"].value if weight is None else weight
    gx, gW, gb = dense_grads(grad_out, cached_input, W)
    params["weight"].grad += gW
    params["bias"].grad += gb
    return gx


# ---------------------------------------------------------------------------
# conv2d (cross-correlation, NCHW)
# ---------------------------------------------------------------------------

def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    B, C, H, W = x.shape
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} does not fit input {H}x{W} with padding {padding}"
        )
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    return cols, Ho, Wo


def conv2d_forward(x, params, stride=1, padding=0, weight=None, name="conv2d"):
    """Returns ``(output, cache)``; output is ``B x O x Ho x Wo``."""
    K = params["weight"].value if weight is None else weight
    if x.ndim != 4 or x.shape[1] != K.shape[1]:
        raise DimensionError(f"{name}: input shape {x.shape} incompatible with kernel {K.shape}")
    O, C, kh, kw = K.shape
    cols, Ho, Wo = _im2col(x, kh, kw, stride, padding)
    out = cols @ K.reshape(O, -1).T + params["bias"].value
    out = out.reshape(x.shape[0], Ho, Wo, O).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, stride, padding)
    return np.ascontiguousarray(out), cache


def conv2d_grads(grad_out, cache, K):
    in_shape, cols, stride, padding = cache
    B, C, H, W = in_shape
    O, _, kh, kw = K.shape
    Ho, Wo = grad_out.shape[2:]
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, O)
    gK = (g.T @ cols).reshape(K.shape)
    gb = g.sum(axis=0)
    dcols = (g @ K.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
    dx = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dx), gK, gb


def conv2d_backward(grad_out, cache, params, weight=None):
    if cache is None:
        raise StateError("conv2d_backward called without a forward cache")
    K = params["weight"].value if weight is None else weight
    dx, gK, gb = conv2d_grads(grad_out, cache, K)
    params["weight"].grad += gK
    params["bias"].grad += gb
    return dx


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer for one precision."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels, dtype=np.float32, **kw):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), **kw)

    @property
    def channels(self):
        return self.running_mean.shape[0]

    def copy(self):
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(),
                              self.momentum, self.eps, self.training)


def _bn_axes(x):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise DimensionError(f"batchnorm: expected 2-d or 4-d input, got shape {x.shape}")


def batchnorm_forward(x, state: BatchNormState, affine, update_stats=True):
    """Normalize per channel, then scale and shift.

    Train mode uses batch statistics (biased variance) and, if
    ``update_stats``, folds them into the running averages.  Eval mode uses
    the running statistics only.
    """
    axes, bshape = _bn_axes(x)
    if x.shape[1] != state.channels:
        raise DimensionError(
            f"batchnorm: {x.shape[1]} channels, state has {state.channels}"
        )
    gamma = affine["scale"].value.reshape(bshape)
    beta = affine["shift"].value.reshape(bshape)
    if state.training:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            n = x.size // x.shape[1]
            unbiased = var * (n / (n - 1)) if n > 1 else var
            m = state.momentum
            state.running_mean[...] = (1 - m) * state.running_mean + m * mean
            state.running_var[...] = (1 - m) * state.running_var + m * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma * xhat + beta
    return out, (xhat, inv_std, state.training)


def batchnorm_grads(grad_out, cache, affine):
    xhat, inv_std, training = cache
    axes, bshape = _bn_axes(grad_out)
    gamma = affine["scale"].value.reshape(bshape)
    dgamma = (grad_out * xhat).sum(axis=axes)
    dbeta = grad_out.sum(axis=axes)
    dxhat = grad_out * gamma
    if training:
        n = grad_out.size // grad_out.shape[1]
        dx = (inv_std.reshape(bshape) / n) * (
            n * dxhat
            - dxhat.sum(axis=axes).reshape(bshape)
            - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
        )
    else:
        dx = dxhat * inv_std.reshape(bshape)
    return dx, dgamma, dbeta


def batchnorm_backward(grad_out, cache, affine):
    if cache is None:
        raise StateError("batchnorm_backward called without a forward cache")
    dx, dgamma, dbeta = batchnorm_grads(grad_out, cache, affine)
    affine["scale"].grad += dgamma
    affine["shift"].grad += dbeta
    return dx


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def clip01_forward(x):
    """Clip to [0, 1], the domain the activation quantizer expects."""
    mask = (x > 0) & (x < 1)
    return np.clip(x, 0, 1), mask


def activation_forward(kind, x):
    if kind == "clip":
        return clip01_forward(x)
    if kind == "relu":
        return relu_forward(x)
    if kind == "none":
        return x, None
    raise InputError(f"unknown activation {kind!r}")


def activation_backward(kind, grad_out, mask):
    return grad_out if kind == "none" else grad_out * mask


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    return labels


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``softmax(logits)`` against integer labels.

    Returns ``(loss, grad_logits)``.
    """
    B, K = logits.shape
    labels = check_labels(labels, K)
    logp = log_softmax(logits)
    rows = np.arange(B)
    loss = -float(logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= B
    return loss, grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    milestones: Sequence[int] = (50, 75, 90)
    decay: float = 0.1
    step: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise InputError(f"learning rate must be non-negative, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputError("Adam betas must lie in [0, 1)")
        self.milestones = tuple(int(m) for m in self.milestones)

    def lr_at(self, epoch):
        """Learning rate in effect during zero-based ``epoch``."""
        hits = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.decay ** hits


def adam_step(params: Iterable[Parameter], config: AdamConfig, epoch=0):
    """One bias-corrected Adam update, in place, using each ``.grad``."""
    params = list(params)
    if not params:
        return params
    config.step += 1
    t = config.step
    b1, b2 = config.beta1, config.beta2
    lr = config.lr_at(epoch)
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p in params:
        g = p.grad
        p.m *= b1
        p.m += (1 - b1) * g
        p.v *= b2
        p.v += (1 - b2) * (g * g)
        p.value -= (lr * (p.m / c1) / (np.sqrt(p.v / c2) + config.eps)).astype(p.value.dtype)
    return params


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def gradcheck(objective: Callable[[], float], params: Sequence[Parameter],
              h=FD_STEP, max_entries=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``objective()`` must return the scalar value and accumulate its
    gradient into each parameter's ``.grad``.  Grads are zeroed before the
    analytic call.  With ``max_entries`` set, only that many randomly
    chosen coordinates per parameter are probed.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    objective()
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        idx = np.arange(p.value.size)
        if max_entries is not None and idx.size > max_entries:
            idx = rng.choice(idx, size=max_entries, replace=False)
        flat = p.value.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = objective()
            flat[i] = orig - h
            fm = objective()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(float(a.reshape(-1)[i]), numeric))
    for p in params:
        p.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# layer objects
# ---------------------------------------------------------------------------

class Dense:
    kind = "dense"

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32, name="dense"):
        rng = np.random.default_rng() if rng is None else rng
        bound = 1.0 / math.sqrt(n_in)
        self.name = name
        self.params = {
            "weight": Parameter(_uniform(rng, bound, (n_in, n_out), dtype)),
            "bias": Parameter(_uniform(rng, bound, (n_out,), dtype)),
        }

    @property
    def out_channels(self):
        return self.params["weight"].shape[1]

    def forward(self, x, weight=None):
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        return dense_forward(x, self.params, weight, self.name), x

    def grads(self, grad_out, cache, weight=None):
        W = self.params["weight"].value if weight is None else weight
        gx, gW, gb = dense_grads(grad_out, cache, W)
        return gx, {"weight": gW, "bias": gb}


class Conv2d:
    kind = "conv"

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, rng=None,
                 dtype=np.float32, name="conv"):
        rng = np.random.default_rng() if rng is None else rng
        bound = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.name = name
        self.stride = stride
        self.padding = padding
        self.params = {
            "weight": Parameter(_uniform(rng, bound, (out_ch, in_ch, kernel, kernel), dtype)),
            "bias": Parameter(_uniform(rng, bound, (out_ch,), dtype)),
        }

    @property
    def out_channels(self):
        return self.params["weight"].shape[0]

    def forward(self, x, weight=None):
        return conv2d_forward(x, self.params, self.stride, self.padding, weight, self.name)

    def grads(self, grad_out, cache, weight=None):
        K = self.params["weight"].value if weight is None else weight
        gx, gK, gb = conv2d_grads(grad_out, cache, K)
        return gx, {"weight": gK, "bias": gb}


def affine_params(channels, dtype=np.float32):
    return {
        "scale": Parameter(np.ones(channels, dtype)),
        "shift": Parameter(np.zeros(channels, dtype)),
    }
