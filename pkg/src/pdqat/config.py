"""TOML run configuration with strict key checking.

Example::

    output_dir = "runs/blobs"

    [model]
    batchnorm = true
    layers = [{kind = "dense", size = 16}, {kind = "dense", size = 16},
              {kind = "dense", size = 2}]

    [quant]
    bits = [0, 2, 0]          # 0 = high precision

    [train]
    epochs = 50
    lr = 0.001
    dual_lr = 0.01

    [constraints]
    eps_layer = "auto"        # 1 / (2^k - 1) per layer
    eps_out = 0.2

    [data]
    kind = "blobs"
    n_per_class = 1000
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import nn
from .data import Dataset, gen_synthetic, load_csv, load_idx
from .errors import ConfigError, PDQATError
from .primal_dual import TrainRunConfig
from .shadow import LayerSpec

OUTPUT_ENV = "PDQAT_OUTPUT_DIR"

SECTIONS = {"output_dir", "model", "quant", "train", "constraints", "data"}
MODEL_KEYS = {"layers", "batchnorm", "activation"}
LAYER_KEYS = {f.name for f in fields(LayerSpec)}
QUANT_KEYS = {"bits", "default_bits"}
TRAIN_KEYS = {"epochs", "batch_size", "lr", "dual_lr", "seed", "early_stop", "val_fraction",
              "patience", "milestones", "lr_decay", "beta1", "beta2", "adam_eps", "dtype",
              "lambda_layer_init", "lambda_out_init", "dual_update"}
CONSTRAINT_KEYS = {"eps_layer", "eps_out", "mse_norm", "log_floor", "layer_constraints",
                   "slack_subsample"}


@dataclass
class DataConfig:
    kind: str = "blobs"
    n_per_class: int = 1000
    n_test_per_class: int = 250
    classes: int = 2
    noise: float = 0.5
    dim: int = 2
    seed: int = 0
    normalize: bool = True
    path: Optional[str] = None
    test_path: Optional[str] = None
    label_column: str = "label"
    images: Optional[str] = None
    labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None


DATA_KEYS = {f.name for f in fields(DataConfig)}


@dataclass
class RunConfig:
    train: TrainRunConfig
    data: DataConfig
    output_dir: str
    raw: dict

    def with_output_dir(self, path):
        return RunConfig(self.train, self.data, str(path), self.raw)


def _strict(section, allowed, where):
    if not isinstance(section, dict):
        raise ConfigError(f"[{where}] must be a table")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    return section


def parse_config(raw: dict, base_dir=".") -> RunConfig:
    """Validate a parsed TOML document; any unknown key is an error."""
    _strict(raw, SECTIONS, "top level")
    model = _strict(raw.get("model", {}), MODEL_KEYS, "model")
    if "layers" not in model or not model["layers"]:
        raise ConfigError("[model] needs a non-empty 'layers' list")
    layers = []
    for i, spec in enumerate(model["layers"]):
        _strict(spec, LAYER_KEYS, f"model.layers[{i}]")
        layers.append(LayerSpec(**spec))
    quant = _strict(raw.get("quant", {}), QUANT_KEYS, "quant")
    train = _strict(raw.get("train", {}), TRAIN_KEYS, "train")
    cons = _strict(raw.get("constraints", {}), CONSTRAINT_KEYS, "constraints")
    data = _strict(raw.get("data", {}), DATA_KEYS, "data")

    default_bits = int(quant.get("default_bits", 2))
    if "bits" in quant:
        bits = [int(b) for b in quant["bits"]]
        if len(bits) != len(layers):
            raise ConfigError(f"[quant] bits has {len(bits)} entries for {len(layers)} layers")
    else:
        bits = [default_bits] * len(layers)
        bits[0] = bits[-1] = 0

    eps_layer = cons.get("eps_layer", "auto")
    if eps_layer == "auto":
        eps_layer = None
    elif isinstance(eps_layer, str):
        raise ConfigError("eps_layer must be 'auto', a number or a list of numbers")

    adam_kw = {"lr": train.get("lr", 1e-3), "decay": train.get("lr_decay", 0.1),
               "milestones": train.get("milestones", (50, 75, 90))}
    for k, dst in (("beta1", "beta1"), ("beta2", "beta2"), ("adam_eps", "eps")):
        if k in train:
            adam_kw[dst] = train[k]
    try:
        trc = TrainRunConfig(
            layers=layers, bits=bits,
            epochs=int(train.get("epochs", 50)),
            batch_size=int(train.get("batch_size", 64)),
            adam=nn.AdamConfig(**adam_kw),
            dual_lr=float(train.get("dual_lr", 0.01)),
            eps_layer=eps_layer,
            eps_out=float(cons.get("eps_out", 0.2)),
            mse_norm=cons.get("mse_norm", "per_element"),
            log_floor=float(cons.get("log_floor", 1e-12)),
            layer_constraints=bool(cons.get("layer_constraints", True)),
            dual_update=bool(train.get("dual_update", True)),
            lambda_layer_init=float(train.get("lambda_layer_init", 0.0)),
            lambda_out_init=float(train.get("lambda_out_init", 1.0)),
            seed=int(train.get("seed", 0)),
            early_stop=bool(train.get("early_stop", True)),
            val_fraction=float(train.get("val_fraction", 0.1)),
            patience=int(train.get("patience", 10)),
            slack_subsample=cons.get("slack_subsample"),
            batchnorm=bool(model.get("batchnorm", True)),
            activation=model.get("activation", "clip"),
            default_bits=default_bits,
            dtype=train.get("dtype", "float32"),
        )
        trc.constraint_set()
        trc.quant_spec
    except PDQATError as e:
        raise ConfigError(str(e)) from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid value: {e}") from None

    dc = DataConfig(**data)
    for key in ("path", "test_path", "images", "labels", "test_images", "test_labels"):
        v = getattr(dc, key)
        if v is not None and not os.path.isabs(v):
            setattr(dc, key, str(Path(base_dir) / v))
    out = os.environ.get(OUTPUT_ENV) or raw.get("output_dir", "runs/default")
    if not os.path.isabs(out) and not os.environ.get(OUTPUT_ENV):
        out = str(Path(base_dir) / out)
    return RunConfig(trc, dc, out, raw)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return parse_config(raw, path.parent)


def load_data(dc: DataConfig):
    """``(train, test)`` datasets; test may be None for file sources."""
    if dc.kind in ("blobs", "spirals"):
        kw = dict(classes=dc.classes, noise=dc.noise, dim=dc.dim)
        train = gen_synthetic(dc.kind, dc.n_per_class, seed=dc.seed, **kw)
        test = gen_synthetic(dc.kind, dc.n_test_per_class, seed=dc.seed + 10_000, **kw)
    elif dc.kind == "csv":
        if dc.path is None:
            raise ConfigError("[data] kind = 'csv' needs 'path'")
        train = load_csv(dc.path, dc.label_column)
        test = (load_csv(dc.test_path, dc.label_column, train.label_names)
                if dc.test_path else None)
    elif dc.kind == "idx":
        if dc.images is None or dc.labels is None:
            raise ConfigError("[data] kind = 'idx' needs 'images' and 'labels'")
        train = load_idx(dc.images, dc.labels)
        test = None
        if dc.test_images:
            test = load_idx(dc.test_images, dc.test_labels, train.num_classes)
    else:
        raise ConfigError(f"unknown data kind {dc.kind!r}")
    if test is not None and test.num_classes < train.num_classes:
        test.num_classes = train.num_classes
    if dc.normalize:
        mean, scale = train.fit_normalization()
        if test is not None:
            test.apply_normalization(mean, scale)
    return train, test


def config_echo(rc: RunConfig):
    """JSON-serializable record of a run (stored in checkpoints)."""
    t = asdict(rc.train)
    t["adam"]["milestones"] = list(t["adam"]["milestones"])
    return {"train": t, "data": asdict(rc.data), "output_dir": rc.output_dir}


def train_config_from_echo(echo: dict) -> TrainRunConfig:
    t = dict(echo["train"])
    t["adam"] = nn.AdamConfig(**{k: v for k, v in t["adam"].items() if k != "step"})
    t["layers"] = [LayerSpec(**s) for s in t["layers"]]
    return TrainRunConfig(**t)


def data_config_from_echo(echo: dict) -> DataConfig:
    return DataConfig(**echo["data"])
