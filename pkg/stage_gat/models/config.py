"""STAGE model and training configuration, presets and ablation switches."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from stage_gat.core.errors import ConfigMismatchError

GEOMETRY_FEATURES = 4


class StageConfig(BaseModel):
    """Hyperparameters of one STAGE model and its training run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    # architecture
    n_heads: int = Field(4, ge=1)
    n_layers: int = Field(2, ge=1)
    actor_dim: int = Field(1024, ge=1, description="raw actor feature width")
    object_dim: int = Field(2048, ge=1, description="raw object feature width")
    n_classes: int = Field(80, ge=1)
    window: int = Field(3, ge=1, description="consecutive clips per window (b)")
    rf_direct: int = Field(3, ge=1, description="clips directly connected in the adjacency")
    keep: float = Field(0.5, gt=0.0, le=1.0, description="dropout keep probability")
    leaky_slope: float = Field(0.2, gt=0.0, lt=1.0)
    ln_eps: float = Field(1e-5, gt=0.0)
    adj_cap: float = Field(1e6, gt=0.0, description="cap for inverse feature distances")
    loss_mode: Literal["multi_label", "single_label"] = "multi_label"

    # ablation toggles
    proximity_on: bool = True
    temporal_on: bool = True
    aa_on: bool = True
    ao_on: bool = True
    oa_on: bool = True
    oo_on: bool = True
    attention: Literal["stage", "transformer"] = "stage"
    adjacency: Literal["box", "feature"] = "box"

    # optimisation
    lr: float = Field(6.25e-5, gt=0.0)
    decay_patience: int = Field(10, ge=1)
    stop_patience: int = Field(15, ge=1)
    max_epochs: int = Field(100, ge=1)
    minibatch_windows: int = Field(6, ge=1)
    train_stride: int | None = Field(None, ge=1)
    eval_stride: int | None = Field(None, ge=1)
    train_iou: float = Field(0.5, gt=0.0, lt=1.0)
    train_with_detections: bool = True
    eval_score_threshold: float = Field(0.7, ge=0.0, le=1.0)
    min_class_examples: int = Field(0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_shapes(self) -> StageConfig:
        if self.rf_direct % 2 == 0:
            raise ValueError(f"rf_direct must be odd, got {self.rf_direct}")
        if self.d_f < self.n_heads:
            raise ValueError(f"d_f={self.d_f} is smaller than n_heads={self.n_heads}")
        return self

    @property
    def d_f(self) -> int:
        """Common entity width: the smaller extended raw width."""
        return min(self.actor_dim, self.object_dim) + GEOMETRY_FEATURES

    @property
    def d_h(self) -> int:
        return self.d_f // self.n_heads

    @property
    def projected_kind(self) -> Literal["actor", "object"]:
        """Kind whose extended features go through the input projection; ties project objects."""
        return "actor" if self.actor_dim > self.object_dim else "object"

    @property
    def projected_in(self) -> int:
        return max(self.actor_dim, self.object_dim) + GEOMETRY_FEATURES

    @property
    def effective_rf(self) -> int:
        return self.rf_direct if self.temporal_on else 1

    @property
    def resolved_train_stride(self) -> int:
        return self.train_stride or self.window

    @property
    def resolved_eval_stride(self) -> int:
        return self.eval_stride or 1

    def with_ablation(self, name: str) -> StageConfig:
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return self.model_copy(update=ABLATIONS[name])

    def with_overrides(self, **overrides: Any) -> StageConfig:
        """Copy with the non-None overrides applied and re-validated."""
        data = self.model_dump()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return StageConfig(**data)

    def check_data(self, actor_dim: int | None, object_dim: int | None, n_classes: int) -> None:
        """Raise when a dataset's widths or label range disagree with this config."""
        if actor_dim is not None and actor_dim != self.actor_dim:
            raise ConfigMismatchError(f"actor width {actor_dim} != configured {self.actor_dim}")
        if object_dim is not None and object_dim != self.object_dim:
            raise ConfigMismatchError(f"object width {object_dim} != configured {self.object_dim}")
        if n_classes > self.n_classes:
            raise ConfigMismatchError(
                f"dataset uses {n_classes} classes, config has {self.n_classes}"
            )


# "full" is the unablated model.
ABLATIONS: dict[str, dict[str, Any]] = {
    "full": {},
    "no-proximity": {"proximity_on": False},
    "no-temporal": {"temporal_on": False},
    "no-actor-actor": {"aa_on": False},
    "no-object-object": {"oo_on": False},
    "transformer": {"attention": "transformer"},
    "feature-distance": {"adjacency": "feature"},
}

PRESETS: dict[str, dict[str, Any]] = {
    "stage-i3d": {
        "n_heads": 4,
        "n_layers": 2,
        "actor_dim": 1024,
        "object_dim": 2048,
        "n_classes": 80,
        "lr": 6.25e-5,
        "train_iou": 0.5,
        "eval_score_threshold": 0.7,
    },
    "stage-r101": {
        "n_heads": 2,
        "n_layers": 2,
        "actor_dim": 2048,
        "object_dim": 2048,
        "n_classes": 80,
        "lr": 1e-5,
        "train_iou": 0.9,
        "eval_score_threshold": 0.8,
    },
    "stage-slowfast": {
        "n_heads": 2,
        "n_layers": 2,
        "actor_dim": 2304,
        "object_dim": 2048,
        "n_classes": 80,
        "lr": 1e-5,
        "train_iou": 0.9,
        "eval_score_threshold": 0.8,
    },
    "tiny": {
        "n_heads": 2,
        "n_layers": 2,
        "actor_dim": 12,
        "object_dim": 16,
        "n_classes": 4,
        "keep": 0.9,
        "lr": 3e-3,
        "decay_patience": 6,
        "stop_patience": 12,
        "max_epochs": 60,
        "eval_score_threshold": 0.0,
    },
}


def preset_config(name: str, **overrides: Any) -> StageConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return StageConfig(**PRESETS[name]).with_overrides(**overrides)


def load_stage_config(path: str | Path | None = None, preset: str | None = None) -> StageConfig:
    """Build a config from an optional preset, then an optional YAML file on top."""
    if preset and preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    data: dict[str, Any] = dict(PRESETS[preset]) if preset else {}
    if path is not None:
        with Path(path).open("r", encoding="utf-8") as handle:
            data.update(yaml.safe_load(handle) or {})
    return StageConfig(**data)
