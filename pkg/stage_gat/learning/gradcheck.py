"""Analytic versus central-difference gradients of the full STAGE loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import structlog

from stage_gat.core import numcore as nc
from stage_gat.core.graph import WindowGraph, build_window
from stage_gat.core.model import StageModel
from stage_gat.models.config import StageConfig
from stage_gat.models.records import BoxGeometry, ClipRecord, EntityDetection

logger = structlog.get_logger("stage_gat.gradcheck")

PASS_THRESHOLD = 1e-4


@dataclass(frozen=True)
class GradcheckReport:
    max_relative_error: float
    worst_parameter: str
    n_parameters: int
    threshold: float = PASS_THRESHOLD

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.threshold


def random_config(rng: np.random.Generator, **overrides) -> StageConfig:
    """Small deterministic-dropout config with box adjacency."""
    settings = {
        "n_heads": int(rng.integers(1, 3)),
        "n_layers": int(rng.integers(1, 3)),
        "actor_dim": int(rng.integers(2, 7)),
        "object_dim": int(rng.integers(2, 7)),
        "n_classes": int(rng.integers(2, 4)),
        "window": 3,
        "keep": 1.0,
        "adjacency": "box",
        "seed": int(rng.integers(0, 2**31 - 1)),
    }
    settings.update(overrides)
    return StageConfig(**settings)


def _random_box(rng: np.random.Generator) -> BoxGeometry:
    x1, y1 = rng.uniform(0.0, 0.6, size=2)
    w, h = rng.uniform(0.1, 0.4, size=2)
    return BoxGeometry(x1=float(x1), y1=float(y1), x2=float(x1 + w), y2=float(y1 + h))


def random_clips(
    rng: np.random.Generator, config: StageConfig, n_clips: int = 3, max_entities: int = 4
) -> list[ClipRecord]:
    """Consecutive clips of one video; every clip has at least one actor."""
    clips = []
    for timestamp in range(n_clips):
        count = int(rng.integers(1, max_entities + 1))
        entities = []
        for index in range(count):
            actor = index == 0 or bool(rng.random() < 0.5)
            width = config.actor_dim if actor else config.object_dim
            labels = None
            if actor:
                labels = [c for c in range(config.n_classes) if rng.random() < 0.4]
                if config.loss_mode == "single_label":
                    labels = labels[:1]
            entities.append(
                EntityDetection(
                    kind="actor" if actor else "object",
                    box=_random_box(rng),
                    feature=[float(v) for v in rng.normal(0.0, 1.0, size=width)],
                    labels=labels,
                )
            )
        clips.append(ClipRecord(video_id="gradcheck", timestamp=timestamp, entities=entities))
    return clips


def gradient_check(
    config: StageConfig, window: WindowGraph, step: float = 1e-5
) -> GradcheckReport:
    """Compare backward() with central differences for every parameter of a fresh model."""
    model = StageModel(config)
    tape = nc.Tape()
    value = model.loss(window, False, None, tape=tape)
    analytic = nc.backward(tape, value, model.params.matrices())

    def objective(values) -> float:
        candidate = StageModel(config, model.params.load_values(values))
        return candidate.loss(window, False, None).item()

    numeric = nc.finite_diff_grad(objective, model.params.values(), step)
    worst_name, worst = "", 0.0
    for name, grad in analytic.items():
        error = nc.relative_error(grad, numeric[name])
        if error > worst:
            worst_name, worst = name, error
    report = GradcheckReport(worst, worst_name, model.params.count())
    logger.debug(
        "gradient check",
        max_relative_error=worst,
        worst_parameter=worst_name,
        parameters=report.n_parameters,
    )
    return report


def run_gradcheck(
    seed: int, n_clips: int = 3, max_entities: int = 4, **overrides
) -> GradcheckReport:
    """Gradient check of a random small config and window drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    config = random_config(rng, **overrides)
    window = build_window(random_clips(rng, config, n_clips, max_entities), config)
    return gradient_check(config, window)
