"""Dataclass configs shared by the library, the scripts and the CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class ModelConfig:
    n_regions: int = 8
    embed_dim: int = 64
    attn_layers: int = 2
    position_encoding: bool = True
    # "standard" uses alpha(f_j) inside the attention sum, "as_printed" uses alpha(f_i)
    attention_mode: str = "standard"
    logit_scaling: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_regions < 1 or self.embed_dim < 1 or self.attn_layers < 0:
            raise ValueError(f"invalid model dimensions: {self}")
        if self.attention_mode not in ("standard", "as_printed"):
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 4
    learning_rate: float = 1e-3
    recon_weight: float = 0.1
    seed: int = 0
    negatives_per_shape: int = 128
    # redraw each target as a fresh rigid motion of its source every epoch
    repose: bool = False
    repose_max_angle_deg: float = 45.0
    repose_max_translation: float = 0.5
    # per-epoch exponential average of the weights; 0 returns the last iterate
    weight_average: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError(f"invalid training config: {self}")
        if self.recon_weight < 0 or self.negatives_per_shape < 2 or not 0.0 <= self.weight_average < 1.0:
            raise ValueError(f"invalid training config: {self}")


@dataclass(frozen=True)
class NoiseConfig:
    di_keep_ratio: float = 0.75
    pd_sigma: float = 0.1
    pd_clip: float = 0.05
    do_fraction: float = 0.1
    do_sigma: float = 0.5


@dataclass(frozen=True)
class DataConfig:
    n_points: int = 256
    n_train: int = 200
    n_eval: int = 64
    kinds: tuple[str, ...] = ("box",)
    max_angle_deg: float = 45.0
    max_translation: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    # desk defaults: fresh target poses every epoch, averaged weights returned
    train: TrainConfig = field(default_factory=lambda: TrainConfig(repose=True, weight_average=0.9))
    data: DataConfig = field(default_factory=DataConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["kinds"] = list(self.data.kinds)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        sections = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "noise": NoiseConfig}
        unknown = set(d) - set(sections)
        if unknown:
            raise KeyError(f"unknown config section(s): {sorted(unknown)}")
        built = {}
        for name, klass in sections.items():
            raw = dict(d.get(name, {}))
            known = {f.name for f in fields(klass)}
            bad = set(raw) - known
            if bad:
                raise KeyError(f"unknown key(s) in [{name}]: {sorted(bad)}")
            if name == "data" and "kinds" in raw:
                raw["kinds"] = tuple(raw["kinds"])
            built[name] = klass(**raw)
        return cls(**built)

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_seed(self, seed: int) -> RunConfig:
        return replace(
            self,
            model=replace(self.model, seed=seed),
            train=replace(self.train, seed=seed),
            data=replace(self.data, seed=seed),
        )
