"""Run configuration with JSON round-tripping; every field has a default."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .demo import ModelConfig, SamConfig
from .losses import LossWeights


@dataclass
class OptimConfig:
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    warmup_epochs: int = 15
    epochs: int = 50
    batch_size: int = 8
    betas: tuple[float, float] = (0.9, 0.999)
    max_steps_per_epoch: int | None = None
    # reserved: layer-wise decay is not applied (no pretrained encoder)
    layer_decay: float | None = None

    def effective_warmup(self) -> int:
        """Warmup epochs, capped at a quarter of the run so short runs still decay."""
        return min(self.warmup_epochs, self.epochs // 4)


@dataclass
class FlowConfig:
    provider: str = "blockmatch"
    block: int = 8
    radius: int = 8


@dataclass
class DataConfig:
    sigma: float = 6.0
    flip: bool = True
    overlap_pairs: bool = True


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sam: SamConfig = field(default_factory=SamConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    clamp_counts: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(cls, d: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if is_dataclass(current) and isinstance(value, dict):
            kwargs[name] = _build(type(current), value)
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)
