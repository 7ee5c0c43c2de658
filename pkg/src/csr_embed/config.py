"""Run configuration and its flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path


@dataclass(frozen=True)
class TrainConfig:
    k: int = 8
    h: int = 256
    k_aux: int = 512
    beta: float = 1 / 32
    gamma: float = 1.0
    lr: float = 4e-5
    epochs: int = 10
    batch_size: int = 16
    adam_eps: float = 6.25e-10
    weight_decay: float = 1e-4
    dead_window: int = 256
    seed: int = 0
    supervised: bool = False
    k_multi_enabled: bool = True
    # L2-normalise codes before the contrastive dot products (off = raw latents)
    ncl_normalize: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.h < 1:
            raise ValueError("h must be >= 1")
        if self.k > self.h:
            raise ValueError("k must not exceed h")
        if self.k_aux < 0:
            raise ValueError("k_aux must be >= 0")
        if self.lr <= 0 or self.adam_eps <= 0:
            raise ValueError("lr and adam_eps must be > 0")
        if self.beta < 0 or self.gamma < 0 or self.weight_decay < 0:
            raise ValueError("beta, gamma and weight_decay must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or (self.gamma > 0 and self.batch_size < 2):
            raise ValueError("batch_size must be >= 2 when gamma > 0")
        if self.dead_window < 0:
            raise ValueError("dead_window must be >= 0")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw)
    # accept fractions such as 1/32 for the loss weights
    return float(Fraction(raw)) if "/" in raw else float(raw)


def parse_config(text: str) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    pytypes = {"int": int, "float": float, "bool": bool}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(raw, pytypes[types[key]])
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else repr(v)}")
    return "\n".join(lines) + "\n"
