"""Shared fixtures: small configs and clip factories."""

from __future__ import annotations

import numpy as np
import pytest

from stage_gat.models.config import StageConfig
from stage_gat.models.records import BoxGeometry, ClipRecord, EntityDetection


def box(x1: float, y1: float, x2: float, y2: float) -> BoxGeometry:
    return BoxGeometry(x1=x1, y1=y1, x2=x2, y2=y2)


def centred_box(xc: float, yc: float, half: float = 0.05) -> BoxGeometry:
    return box(xc - half, yc - half, xc + half, yc + half)


@pytest.fixture
def small_config() -> StageConfig:
    """Two heads, one layer, d_f = 8, deterministic dropout."""
    return StageConfig(
        n_heads=2,
        n_layers=1,
        actor_dim=4,
        object_dim=6,
        n_classes=3,
        keep=1.0,
        seed=3,
    )


@pytest.fixture
def make_clip():
    """Factory for clips with random features of the given widths."""

    def factory(
        timestamp: int,
        actors: list[BoxGeometry],
        objects: list[BoxGeometry] = (),
        *,
        video_id: str = "vid",
        actor_dim: int = 4,
        object_dim: int = 6,
        labels: list[list[int]] | None = None,
        seed: int = 0,
    ) -> ClipRecord:
        rng = np.random.default_rng([seed, timestamp])
        entities = [
            EntityDetection(
                kind="actor",
                box=b,
                feature=[float(v) for v in rng.normal(size=actor_dim)],
                labels=(labels[i] if labels is not None else []),
            )
            for i, b in enumerate(actors)
        ]
        entities += [
            EntityDetection(
                kind="object", box=b, feature=[float(v) for v in rng.normal(size=object_dim)]
            )
            for b in objects
        ]
        return ClipRecord(video_id=video_id, timestamp=timestamp, entities=entities)

    return factory
