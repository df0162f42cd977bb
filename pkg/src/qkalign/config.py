"""Dataclass configuration tree and its JSON round-trip.

A RunConfig is serialized verbatim into every output directory; loading it
back and rerunning reproduces results bit-for-bit on one platform.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError

PE_KINDS = ("fixed", "learnable")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 8
    layers: int = 6
    scenes: int = 8
    grid_t: tuple = (7, 7)
    grid_r: tuple = (14, 14)
    mlp_hidden: int = 128
    pe_kind: str = "fixed"
    encoder_self_attention: bool = True
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "grid_t", tuple(self.grid_t))
        object.__setattr__(self, "grid_r", tuple(self.grid_r))
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4 != 0:
            raise ConfigError(f"dim {self.dim} must be divisible by 4 for the 2D encoding")
        if self.pe_kind not in PE_KINDS:
            raise ConfigError(f"pe_kind must be one of {PE_KINDS}, got {self.pe_kind!r}")
        if self.scenes < 1 or self.layers < 1 or self.mlp_hidden < 1:
            raise ConfigError("scenes, layers and mlp_hidden must be positive")
        for grid in (self.grid_t, self.grid_r):
            if len(grid) != 2 or grid[0] < 1 or grid[1] < 1:
                raise ConfigError(f"grid must be two positive ints, got {grid}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def n_tokens_t(self) -> int:
        return self.grid_t[0] * self.grid_t[1]

    @property
    def n_tokens_r(self) -> int:
        return self.grid_r[0] * self.grid_r[1]


@dataclass(frozen=True)
class DataConfig:
    scenes: int = 8
    landmarks: int = 64
    feature_dim: int = 64
    grid_t: tuple = (7, 7)
    grid_r: tuple = (14, 14)
    extent_min: float = 1.0
    extent_max: float = 4.0
    fov_deg: float = 90.0
    z_near: float = 0.1
    # per-scene train sizes (cycled to the scene count) echo the size
    # asymmetry of real multi-scene sets; an int means uniform sizes
    train_per_scene: tuple = (96, 32, 64, 24, 80, 40, 72, 48)
    test_per_scene: int = 16

    def __post_init__(self):
        object.__setattr__(self, "grid_t", tuple(self.grid_t))
        object.__setattr__(self, "grid_r", tuple(self.grid_r))
        if isinstance(self.train_per_scene, int):
            object.__setattr__(self, "train_per_scene", (self.train_per_scene,))
        else:
            object.__setattr__(self, "train_per_scene", tuple(self.train_per_scene))
        if self.scenes < 1 or self.landmarks < 1:
            raise ConfigError("scenes and landmarks must be positive")
        if not (0 < self.extent_min <= self.extent_max):
            raise ConfigError(
                f"extent range invalid: [{self.extent_min}, {self.extent_max}]"
            )
        if not (0 < self.fov_deg < 180):
            raise ConfigError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        if any(s < 1 for s in self.train_per_scene) or self.test_per_scene < 1:
            raise ConfigError("split sizes must be positive")

    def train_sizes(self) -> tuple:
        """Per-scene train sizes, cycling the configured list over scenes."""
        base = self.train_per_scene
        return tuple(base[i % len(base)] for i in range(self.scenes))


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    decay_epochs: tuple = (10, 20)
    decay_factor: float = 0.1
    batch_size: int = 8
    epochs: int = 30

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(self.decay_epochs))
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr, batch_size and epochs must be positive")


@dataclass(frozen=True)
class LossConfig:
    lambda_aux: float = 0.1
    s_t_init: float = 0.0
    s_r_init: float = -3.0

    def __post_init__(self):
        if self.lambda_aux < 0:
            raise ConfigError(f"lambda_aux must be >= 0, got {self.lambda_aux}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    qka_enabled: bool = True
    seed: int = 0
    # recall threshold pairs (position units, degrees), indoor-style pairs
    # rescaled to synthetic scene units
    recall_thresholds: tuple = ((0.25, 10.0), (0.25, 20.0), (0.5, 10.0), (0.5, 20.0))
    diag_samples: int = 8

    def __post_init__(self):
        object.__setattr__(
            self,
            "recall_thresholds",
            tuple(tuple(pair) for pair in self.recall_thresholds),
        )
        if self.model.scenes != self.data.scenes:
            raise ConfigError(
                f"model.scenes={self.model.scenes} != data.scenes={self.data.scenes}"
            )
        if self.model.grid_t != self.data.grid_t or self.model.grid_r != self.data.grid_r:
            raise ConfigError("model and data token grids must match")
        if self.model.dim != self.data.feature_dim:
            raise ConfigError(
                f"model.dim={self.model.dim} != data.feature_dim={self.data.feature_dim}"
            )
        for pair in self.recall_thresholds:
            if len(pair) != 2 or pair[0] <= 0 or pair[1] <= 0:
                raise ConfigError(f"bad recall threshold pair {pair}")


def to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)

    def untuple(x):
        if isinstance(x, tuple):
            return [untuple(v) for v in x]
        if isinstance(x, list):
            return [untuple(v) for v in x]
        if isinstance(x, dict):
            return {k: untuple(v) for k, v in x.items()}
        return x

    return untuple(d)


def _build(cls, d: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def run_config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    try:
        parts = {}
        for name, cls in (
            ("model", ModelConfig),
            ("data", DataConfig),
            ("optim", OptimConfig),
            ("loss", LossConfig),
        ):
            if name in d:
                parts[name] = _build(cls, d.pop(name))
        return _build(RunConfig, {**d, **parts})
    except TypeError as e:
        raise ConfigError(str(e)) from e


def model_config_from_dict(d: dict) -> ModelConfig:
    return _build(ModelConfig, dict(d))


def data_config_from_dict(d: dict) -> DataConfig:
    return _build(DataConfig, dict(d))


def save_run_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return run_config_from_dict(raw)
