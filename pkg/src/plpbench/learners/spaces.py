"""Hyperparameter spaces and training configuration for the four learners."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, replace

from ..seeding import rng_for


class ConfigError(ValueError):
    pass


DROPOUTS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


@dataclass(frozen=True)
class LogisticSearchSpec:
    starting_variance: float = 0.01
    variance_lower: float = 0.01
    variance_upper: float = 20.0
    cv_folds: int = 5
    max_evaluations: int = 10
    tolerance: float = 1e-6
    max_sweeps: int = 1000

    def __post_init__(self):
        if not (0 < self.variance_lower <= self.starting_variance <= self.variance_upper):
            raise ConfigError("need 0 < variance_lower <= starting_variance <= variance_upper")
        if self.cv_folds < 2 or self.max_evaluations < 1:
            raise ConfigError("cv_folds >= 2 and max_evaluations >= 1 required")


@dataclass(frozen=True)
class GbtGrid:
    n_trees: tuple = (100, 300)
    max_depth: tuple = (4, 6, 8)
    learning_rate: tuple = (0.05, 0.1, 0.3)
    holdout_fraction: float = 0.25
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    max_bins: int = 256

    def __post_init__(self):
        if not (self.n_trees and self.max_depth and self.learning_rate):
            raise ConfigError("GBT grid must be non-empty")

    def points(self) -> list[dict]:
        return [
            {"n_trees": t, "max_depth": d, "learning_rate": lr}
            for d, lr, t in itertools.product(self.max_depth, self.learning_rate, self.n_trees)
        ]

    def contains(self, cfg: dict) -> bool:
        return cfg["n_trees"] in self.n_trees and cfg["max_depth"] in self.max_depth and cfg["learning_rate"] in self.learning_rate


@dataclass(frozen=True)
class DiscreteSpace:
    """Product of finite value sets; subclasses list their dimensions."""

    def dimensions(self) -> dict[str, tuple]:
        return {k: tuple(v) for k, v in asdict(self).items() if isinstance(v, (tuple, list))}

    def contains(self, cfg: dict) -> bool:
        dims = self.dimensions()
        return all(k in cfg and cfg[k] in vals for k, vals in dims.items())

    def is_valid(self, cfg: dict) -> bool:
        return True


@dataclass(frozen=True)
class ResNetSpace(DiscreteSpace):
    embedding_size: tuple = (64, 128, 256, 512)
    n_layers: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    layer_width: tuple = (64, 128, 256, 512, 1024)
    hidden_factor: tuple = (1, 2, 3, 4)
    dropout_first: tuple = DROPOUTS
    dropout_last: tuple = DROPOUTS


@dataclass(frozen=True)
class TransformerSpace(DiscreteSpace):
    n_blocks: tuple = (2, 3, 4)
    embedding_dim: tuple = (64, 128, 256, 512)
    n_heads: tuple = (2, 4, 8)
    attention_dropout: tuple = DROPOUTS
    ffn_dropout: tuple = DROPOUTS
    residual_dropout: tuple = DROPOUTS
    ffn_ratio: float = 0.75
    max_tokens: int = 256

    def is_valid(self, cfg: dict) -> bool:
        return cfg["embedding_dim"] % cfg["n_heads"] == 0

    def ffn_hidden(self, embedding_dim: int) -> int:
        return int(round(self.ffn_ratio * embedding_dim))


def sample_hyperparameters(space: DiscreteSpace, n: int, seed: int) -> list[dict]:
    """``n`` independent uniform draws over the product space (duplicates allowed).

    Invalid combinations (e.g. embedding_dim not divisible by n_heads) are
    rejected and redrawn.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    dims = space.dimensions()
    rng = rng_for(seed, "hyperparameter-samples")
    out = []
    while len(out) < n:
        cfg = {k: vals[int(rng.integers(len(vals)))] for k, vals in dims.items()}
        if space.is_valid(cfg):
            out.append(cfg)
    return out


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    n_hyperparameter_samples: int = 100
    max_epochs: int = 50
    batch_size: int = 512
    learning_rate: float = 3e-4
    lr_schedule: str = "constant"
    patience: int = 5
    validation_fraction: float = 0.2
    eval_batch_size: int = 2048

    def __post_init__(self):
        if self.n_hyperparameter_samples < 1:
            raise ConfigError("n_hyperparameter_samples must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")

    def with_overrides(self, **kw) -> "TrainConfig":
        unknown = set(kw) - set(self.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


DESK_SAMPLES = 8
