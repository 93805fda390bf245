"""Run configuration.

Every field carries an ``origin``: ``"paper"`` when the value is the one the
method was published with, ``"desk"`` when it was chosen or scaled down for
CPU-sized runs. The resolved config is written next to every artifact with
those origins attached.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ContractError


def paper(default):
    kw = {"default_factory": lambda: list(default)} if isinstance(default, list) else {"default": default}
    return field(metadata={"origin": "paper"}, **kw)


def desk(default):
    kw = {"default_factory": lambda: list(default)} if isinstance(default, list) else {"default": default}
    return field(metadata={"origin": "desk"}, **kw)


@dataclass
class DataConfig:
    n_classes: int = desk(4)
    n_per_class: int = desk(200)
    image_size: int = desk(64)        # S; published runs use 256
    train_fraction: float = desk(0.8)
    seed: int = desk(0)


@dataclass
class AugmentConfig:
    max_fade_frac: float = desk(0.5)
    max_mask_frac: float = desk(0.125)
    image_base_size: int = desk(72)   # resize target before the random crop to image_size
    jitter_low: float = desk(0.6)
    jitter_high: float = desk(1.4)
    p_gray: float = desk(0.2)


@dataclass
class EncoderConfig:
    widths: list = desk([16, 32, 64, 128])   # last width is the feature dim (published: 512)
    blocks_per_stage: int = desk(2)
    stem_stride: int = desk(2)
    proj_dim: int = desk(32)                  # published: 128

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


@dataclass
class CMCRLConfig:
    tau: float = desk(0.1)
    batch_size: int = desk(32)                # pairs per batch (2N rows); published: 1024
    epochs: int = desk(30)                    # published: 1000
    lr: float = paper(0.05)
    momentum: float = paper(0.9)
    weight_decay: float = paper(1e-4)
    milestones: list = desk([15, 21, 24])     # published 500/700/800 of 1000, same fractions
    lr_decay: float = paper(0.1)
    grad_clip: float = desk(1.0)              # global grad-norm cap; 0 disables
    standardize_features: bool = desk(True)
    seed: int = desk(0)


@dataclass
class ProbeConfig:
    steps: int = desk(500)
    lr: float = desk(0.01)
    weight_decay: float = desk(0.0)


@dataclass
class GANConfig:
    z_dim: int = desk(64)
    g_channels: int = desk(16)
    d_channels: int = desk(16)
    attention_resolution: int = desk(16)
    batch_size: int = desk(16)                # published: 32
    iterations: int = desk(3000)
    lr_g: float = paper(1e-4)
    lr_d: float = paper(4e-4)
    beta1: float = paper(0.5)
    beta2: float = paper(0.999)
    n_power_iter: int = desk(1)
    sample_every: int = desk(500)
    log_every: int = desk(50)
    seed: int = desk(0)


@dataclass
class EvalConfig:
    n_generated: int = desk(400)
    seed: int = desk(0)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cmcrl: CMCRLConfig = field(default_factory=CMCRLConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    gan: GANConfig = field(default_factory=GANConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    threads: int = desk(0)                    # 0 = all available cores

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    def origins(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                out.update({f"{f.name}.{g.name}": g.metadata["origin"] for g in dataclasses.fields(v)})
            else:
                out[f.name] = f.metadata["origin"]
        return out

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
        d = self.to_dict()
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ContractError(f"override {item!r} is not of the form key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            *path, last = key.split(".")
            node = d
            for p in path:
                if not isinstance(node.get(p), dict):
                    raise ContractError(f"unknown config key {key!r}")
                node = node[p]
            if last not in node:
                raise ContractError(f"unknown config key {key!r}")
            node[last] = value
        return RunConfig.from_dict(d)

    def emit(self) -> dict:
        return {"config": self.to_dict(), "origins": self.origins()}


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ContractError(f"config section {where or '<root>'} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ContractError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in d.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING \
            else known[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    data = json.loads(path.read_text())
    return RunConfig.from_dict(data.get("config", data) if "origins" in data else data)
