"""Binary checkpoint format.

Layout (little-endian throughout)::

    b"PDQAT1"                       magic
    u32 version
    u32 n, n bytes                  config echo, UTF-8 JSON
    u32 rank, rank x u32            model input shape
    u32 n_layers, then per layer:
        u16 n, kind       u16 n, activation
        u8 batchnorm      u8 quantized       i32 bits
        u32 stride        u32 padding
        u32 rank, rank x u32        weight shape
    u32 n_arrays, then per array:
        u16 n, name (UTF-8)
        u32 rank, rank x u32 dims
        float32 payload

Model arrays are named as in :meth:`ShadowModel.state_arrays`; the dual
state, when present, lives under ``duals.*``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import FormatError, UnsupportedVersionError
from .primal_dual import DualState
from .quantize import QuantSpec
from .shadow import LayerSpec, ShadowModel

MAGIC = b"PDQAT1"
VERSION = 1


@dataclass
class LayerDescriptor:
    kind: str
    activation: str
    batchnorm: bool
    quantized: bool
    bits: int
    stride: int
    padding: int
    weight_shape: tuple


@dataclass
class Checkpoint:
    version: int
    config: dict
    input_shape: tuple
    layers: List[LayerDescriptor]
    arrays: Dict[str, np.ndarray]
    model: ShadowModel = None
    duals: Optional[DualState] = None


def _describe(model: ShadowModel):
    out = []
    for b in model.blocks:
        lay = b.layer
        out.append(LayerDescriptor(
            b.kind, b.activation, b.has_bn, b.quantized, int(b.bits),
            int(getattr(lay, "stride", 0)), int(getattr(lay, "padding", 0)),
            tuple(lay.params["weight"].shape)))
    return out


def _str(s):
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _shape(dims):
    return struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)


def encode(model: ShadowModel, duals: Optional[DualState] = None, config=None) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg, _shape(model.input_shape)]
    layers = _describe(model)
    parts.append(struct.pack("<I", len(layers)))
    for d in layers:
        parts += [_str(d.kind), _str(d.activation),
                  struct.pack("<BBiII", d.batchnorm, d.quantized, d.bits, d.stride, d.padding),
                  _shape(d.weight_shape)]
    arrays = dict(model.state_arrays())
    if duals is not None:
        arrays["duals.lambdas"] = duals.lambdas
        arrays["duals.lambda_out"] = np.array([duals.lambda_out])
        arrays["duals.lr"] = np.array([duals.lr])
        arrays["duals.trajectory"] = duals.trajectory_array()
    parts.append(struct.pack("<I", len(arrays)))
    for name, a in arrays.items():
        a = np.asarray(a)
        parts += [_str(name), _shape(a.shape), a.astype("<f4").tobytes()]
    return b"".join(parts)


def save_checkpoint(path, model, duals=None, config=None):
    Path(path).write_bytes(encode(model, duals, config))
    return path


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated checkpoint", offset=self.pos)
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self):
        return self.unpack("<I")[0]

    def string(self):
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.path}: invalid UTF-8 string", offset=self.pos) from None

    def shape(self):
        r = self.u32()
        if r > 8:
            raise FormatError(f"{self.path}: implausible array rank {r}", offset=self.pos - 4)
        return tuple(self.unpack(f"<{r}I"))


def decode(buf: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(buf, path)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(
            f"{path}: checkpoint version {version} is not supported (expected {VERSION})",
            offset=len(MAGIC))
    n = r.u32()
    try:
        config = json.loads(r.take(n).decode("utf-8"))
    except ValueError:
        raise FormatError(f"{path}: config echo is not valid JSON", offset=r.pos) from None
    input_shape = r.shape()
    layers = []
    for _ in range(r.u32()):
        kind = r.string()
        act = r.string()
        bn, q, bits, stride, pad = r.unpack("<BBiII")
        layers.append(LayerDescriptor(kind, act, bool(bn), bool(q), bits, stride, pad,
                                      r.shape()))
    arrays = {}
    for _ in range(r.u32()):
        name = r.string()
        dims = r.shape()
        count = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes", offset=r.pos)
    ck = Checkpoint(version, config, input_shape, layers, arrays)
    ck.model = _rebuild(ck, path)
    if "duals.lambdas" in arrays:
        ck.duals = DualState(arrays["duals.lambdas"].astype(np.float64),
                             float(arrays["duals.lambda_out"][0]),
                             float(arrays["duals.lr"][0]),
                             [row.astype(np.float64) for row in arrays["duals.trajectory"]])
    return ck


def _rebuild(ck: Checkpoint, path):
    specs = []
    for d in ck.layers:
        if d.kind == "dense":
            size = d.weight_shape[1]
        elif d.kind == "conv":
            size = d.weight_shape[0]
        else:
            raise FormatError(f"{path}: unknown layer kind {d.kind!r}")
        specs.append(LayerSpec(d.kind, size, d.weight_shape[-1] if d.kind == "conv" else 3,
                               d.stride or 1, d.padding, d.batchnorm, d.activation))
    quant = QuantSpec([d.bits for d in ck.layers], [d.quantized for d in ck.layers])
    model = ShadowModel.build(ck.input_shape, specs, quant, dtype=np.float32)
    try:
        model.load_arrays({k: v for k, v in ck.arrays.items() if not k.startswith("duals.")})
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    return model


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes(), str(path))
