"""Detection-feature record schemas shared by data I/O, graph building and evaluation."""

from __future__ import annotations

from typing import Literal

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    field_serializer,
    field_validator,
    model_validator,
)

FEATURE_DIGITS = 9

EntityKind = Literal["actor", "object"]


class BoxGeometry(BaseModel):
    """Axis-aligned box in normalized [0, 1] image coordinates."""

    model_config = ConfigDict(frozen=True)

    x1: float = Field(..., ge=0.0, le=1.0)
    y1: float = Field(..., ge=0.0, le=1.0)
    x2: float = Field(..., ge=0.0, le=1.0)
    y2: float = Field(..., ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_order(self) -> BoxGeometry:
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"box must satisfy x1<x2 and y1<y2, got {self.corners()}")
        return self

    @classmethod
    def from_corners(cls, corners) -> BoxGeometry:
        x1, y1, x2, y2 = (float(c) for c in corners)
        return cls(x1=x1, y1=y1, x2=x2, y2=y2)

    @property
    def xc(self) -> float:
        return (self.x1 + self.x2) / 2.0

    @property
    def yc(self) -> float:
        return (self.y1 + self.y2) / 2.0

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    def corners(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def geometry_features(self) -> list[float]:
        """[h, w, xc, yc] appended to raw features."""
        return [self.h, self.w, self.xc, self.yc]


class EntityDetection(BaseModel):
    """One actor or object detection.

    Actors carrying a ``labels`` list are ground truth; actors without one are
    detector outputs whose labels are assigned by IoU at training time.
    """

    kind: EntityKind
    box: BoxGeometry
    score: float = Field(1.0, ge=0.0, le=1.0)
    feature: list[float]
    labels: list[int] | None = None

    @field_validator("box", mode="before")
    @classmethod
    def _parse_box(cls, value):
        if isinstance(value, list | tuple):
            if len(value) != 4:
                raise ValueError(f"box needs 4 coordinates, got {len(value)}")
            return BoxGeometry.from_corners(value)
        return value

    @field_validator("feature")
    @classmethod
    def _finite_feature(cls, value: list[float]) -> list[float]:
        if not value:
            raise ValueError("feature vector is empty")
        if not np.isfinite(value).all():
            raise ValueError("feature vector contains non-finite values")
        return value

    @model_validator(mode="after")
    def _labels_only_on_actors(self) -> EntityDetection:
        if self.kind == "object" and self.labels is not None:
            raise ValueError("labels are only allowed on actors")
        if self.labels is not None and any(label < 0 for label in self.labels):
            raise ValueError(f"negative class id in labels {self.labels}")
        return self

    @field_serializer("box")
    def _dump_box(self, box: BoxGeometry) -> list[float]:
        return box.corners()

    @field_serializer("feature")
    def _dump_feature(self, feature: list[float]) -> list[float]:
        return [float(f"{v:.{FEATURE_DIGITS}g}") for v in feature]

    @property
    def is_ground_truth(self) -> bool:
        return self.kind == "actor" and self.labels is not None


class ClipRecord(BaseModel):
    """All detections for one keyframe timestamp of a video."""

    video_id: str = Field(..., min_length=1)
    timestamp: int
    entities: list[EntityDetection] = Field(default_factory=list)

    @property
    def key(self) -> tuple[str, int]:
        return (self.video_id, self.timestamp)

    @property
    def actors(self) -> list[EntityDetection]:
        return [e for e in self.entities if e.kind == "actor"]

    @property
    def objects(self) -> list[EntityDetection]:
        return [e for e in self.entities if e.kind == "object"]

    @property
    def ground_truth_actors(self) -> list[EntityDetection]:
        return [e for e in self.entities if e.is_ground_truth]

    @property
    def detected_actors(self) -> list[EntityDetection]:
        return [e for e in self.entities if e.kind == "actor" and e.labels is None]

    def to_line(self) -> str:
        return self.model_dump_json(exclude_none=True)
