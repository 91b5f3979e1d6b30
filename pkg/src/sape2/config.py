"""Flat `key = value` run configuration with defaults for every field.

No nesting; `#` starts a comment; unknown keys and bad values are hard
errors that name the offending line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

from .vit import VitConfig


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


@dataclass
class RunConfig:
    # model
    image_size: int = 32
    patch_size: int = 4
    hidden_dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_ratio: int = 4
    num_classes: int = 10
    pe: str = "none"
    sape_mode: str = "key"
    pooling: str = "cls"
    bias_sign: str = "+"
    bias_after_scale: bool = False
    # training
    epochs: int = 400
    batch_size: int = 128
    eval_batch_size: int = 256
    optimizer: str = "adam"
    lr: float = 3e-4
    seed: int = 0
    precision: str = "float32"
    augment: bool = False
    shuffle: bool = True
    save_every: int = 0
    # data and outputs
    dataset: str = "synthetic"
    data_dir: str = ""
    train_count: int = 4000
    eval_count: int = 1000
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ValueError(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.bias_sign not in ("+", "-"):
            raise ValueError(f"bias_sign must be '+' or '-', got {self.bias_sign!r}")
        if self.dataset not in ("synthetic", "cifar10", "cifar100"):
            raise ValueError(f"dataset must be synthetic, cifar10 or cifar100, "
                             f"got {self.dataset!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def resolved_data_dir(self) -> str:
        return self.data_dir or os.environ.get("SAPE2_DATA_DIR", ".")

    def vit_config(self) -> VitConfig:
        return VitConfig(
            image_size=self.image_size, patch_size=self.patch_size,
            hidden_dim=self.hidden_dim, depth=self.depth, heads=self.heads,
            mlp_ratio=self.mlp_ratio, num_classes=self.num_classes,
            pe_strategy=self.pe, sape_mode=self.sape_mode, pooling=self.pooling,
            bias_sign=1.0 if self.bias_sign == "+" else -1.0,
            bias_after_scale=self.bias_after_scale,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    if kind == "bool":
        return _parse_bool(raw)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source} line {ln}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"{source} line {ln}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ValueError(f"{source} line {ln}: bad value for {key!r}: {exc}") from None
    try:
        return RunConfig(**values)
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from None


def parse_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=path)


def config_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """New config with the given fields replaced (None values skipped)."""
    current = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}
    current.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**current)
