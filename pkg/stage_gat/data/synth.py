"""Synthetic spatio-temporal interaction datasets with re-checkable labelling rules.

Actors follow smooth random walks and keep their index inside a video, so
actor ``i`` of clip ``t`` is the same track as actor ``i`` of clip ``t - 1``.
Objects of a kind used by a temporal rule are transient: they are resampled
in every clip, so whether such a rule fires cannot be read off a single clip.
Features embed the entity kind plus Gaussian noise and never the label.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import structlog
import yaml
from pydantic import BaseModel, Field, model_validator

from stage_gat.data.dataset import write_clips
from stage_gat.learning.evaluation import ActorPrediction
from stage_gat.models.records import BoxGeometry, ClipRecord, EntityDetection

logger = structlog.get_logger("stage_gat.synth")

RuleKind = Literal["spatial-proximity", "temporal-adjacent-object", "actor-actor"]
ClipKey = tuple[str, int]


class SynthRule(BaseModel):
    """Actor class ``class_id`` fires when its geometric condition holds."""

    class_id: int = Field(..., ge=0)
    kind: RuleKind
    object_kind: int | None = Field(None, ge=0)
    radius: float = Field(0.25, gt=0.0, le=1.0)
    offset: int = Field(1, ge=1, description="clip distance checked by temporal rules")

    @model_validator(mode="after")
    def _needs_object(self) -> SynthRule:
        if self.kind != "actor-actor" and self.object_kind is None:
            raise ValueError(f"{self.kind} rule for class {self.class_id} needs object_kind")
        return self


class SynthSpec(BaseModel):
    n_videos: int = Field(8, ge=1)
    clips_per_video: int = Field(10, ge=1)
    actors_per_clip: tuple[int, int] = (1, 3)
    objects_per_clip: tuple[int, int] = (1, 3)
    transient_per_clip: tuple[int, int] = (0, 2)
    n_object_kinds: int = Field(3, ge=1)
    actor_dim: int = Field(12, ge=1)
    object_dim: int = Field(16, ge=1)
    noise: float = Field(0.1, ge=0.0)
    step: float = Field(0.05, ge=0.0, description="random-walk step deviation")
    box_size: float = Field(0.15, gt=0.0, lt=0.5)
    val_fraction: float = Field(0.25, ge=0.0, lt=1.0)
    emit_detections: bool = False
    rules: list[SynthRule] = Field(default_factory=list)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> SynthSpec:
        for name in ("actors_per_clip", "objects_per_clip", "transient_per_clip"):
            low, high = getattr(self, name)
            if low < 0 or high < low:
                raise ValueError(f"{name} must be a range 0 <= low <= high, got {(low, high)}")
        for rule in self.rules:
            if rule.object_kind is not None and rule.object_kind >= self.n_object_kinds:
                raise ValueError(
                    f"rule for class {rule.class_id} references object kind {rule.object_kind}, "
                    f"only {self.n_object_kinds} kinds exist"
                )
        return self

    @property
    def n_classes(self) -> int:
        return max((rule.class_id + 1 for rule in self.rules), default=1)

    @property
    def transient_kinds(self) -> set[int]:
        return {
            rule.object_kind  # type: ignore[misc]
            for rule in self.rules
            if rule.kind == "temporal-adjacent-object"
        }


def load_synth_spec(path: str | Path) -> SynthSpec:
    with Path(path).open("r", encoding="utf-8") as handle:
        return SynthSpec(**(yaml.safe_load(handle) or {}))


@dataclass
class SynthReport:
    n_train_clips: int
    n_val_clips: int
    n_actors: int
    n_objects: int
    positives: dict[int, int]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_train_clips": self.n_train_clips,
            "n_val_clips": self.n_val_clips,
            "n_actors": self.n_actors,
            "n_objects": self.n_objects,
            "positives": {str(k): v for k, v in sorted(self.positives.items())},
            "positive_rate": {
                str(k): (v / self.n_actors if self.n_actors else 0.0)
                for k, v in sorted(self.positives.items())
            },
            "warnings": self.warnings,
        }


@dataclass
class SynthResult:
    spec: SynthSpec
    train: list[ClipRecord]
    val: list[ClipRecord]
    object_kinds: dict[ClipKey, list[int]]
    report: SynthReport

    @property
    def clips(self) -> list[ClipRecord]:
        return self.train + self.val


# ---------------------------------------------------------------------------
# rule evaluation
# ---------------------------------------------------------------------------


def _centre(box: BoxGeometry) -> np.ndarray:
    return np.array([box.xc, box.yc])


def _near(a: BoxGeometry, b: BoxGeometry, radius: float) -> bool:
    return float(np.linalg.norm(_centre(a) - _centre(b))) <= radius


def _object_near(
    clip: ClipRecord | None, kinds: Sequence[int], actor: BoxGeometry, rule: SynthRule
) -> bool:
    if clip is None:
        return False
    return any(
        kind == rule.object_kind and _near(actor, obj.box, rule.radius)
        for obj, kind in zip(clip.objects, kinds, strict=True)
    )


def evaluate_rules(
    clips: Sequence[ClipRecord],
    object_kinds: Mapping[ClipKey, Sequence[int]],
    rules: Sequence[SynthRule],
) -> dict[ClipKey, list[list[int]]]:
    """Recompute every ground-truth actor's labels from box geometry and object kinds."""
    by_key = {clip.key: clip for clip in clips}
    labels: dict[ClipKey, list[list[int]]] = {}
    for clip in clips:
        actors = clip.ground_truth_actors
        kinds = object_kinds[clip.key]
        per_actor: list[list[int]] = []
        for index, actor in enumerate(actors):
            fired: set[int] = set()
            for rule in rules:
                if rule.kind == "spatial-proximity":
                    hit = _object_near(clip, kinds, actor.box, rule)
                elif rule.kind == "actor-actor":
                    hit = any(
                        _near(actor.box, other.box, rule.radius)
                        for j, other in enumerate(actors)
                        if j != index
                    )
                else:
                    hit = False
                    for delta in (-rule.offset, rule.offset):
                        key = (clip.video_id, clip.timestamp + delta)
                        neighbour = by_key.get(key)
                        if neighbour is None or index >= len(neighbour.ground_truth_actors):
                            continue
                        track = neighbour.ground_truth_actors[index]
                        if _object_near(neighbour, object_kinds[key], track.box, rule):
                            hit = True
                            break
                if hit:
                    fired.add(rule.class_id)
            per_actor.append(sorted(fired))
        labels[clip.key] = per_actor
    return labels


def label_mismatches(result: SynthResult, clips: Sequence[ClipRecord] | None = None) -> list[str]:
    """Actors whose stored labels disagree with the reference rule evaluation."""
    clips = result.clips if clips is None else list(clips)
    expected = evaluate_rules(clips, result.object_kinds, result.spec.rules)
    problems = []
    for clip in clips:
        stored = [sorted(a.labels or []) for a in clip.ground_truth_actors]
        if stored != expected[clip.key]:
            problems.append(f"{clip.video_id}@{clip.timestamp}: {stored} != {expected[clip.key]}")
    return problems


def single_clip_scores(
    result: SynthResult, clips: Sequence[ClipRecord], rule: SynthRule
) -> list[ActorPrediction]:
    """Score each actor for ``rule.class_id`` from the geometry of its own clip only.

    The score is 1 when an object of the rule's kind (or another actor) lies
    within the radius in the same clip. For spatial and actor-actor rules this
    is the rule itself; for temporal rules it is the best a single clip offers.
    """
    single = rule.model_copy(
        update={"kind": "actor-actor" if rule.kind == "actor-actor" else "spatial-proximity"}
    )
    width = result.spec.n_classes
    evidence = evaluate_rules(clips, result.object_kinds, [single])
    predictions = []
    for clip in clips:
        for actor, labels in zip(clip.ground_truth_actors, evidence[clip.key], strict=True):
            scores = [0.0] * width
            scores[rule.class_id] = 1.0 if labels else 0.0
            predictions.append(
                ActorPrediction(clip.video_id, clip.timestamp, actor.box, tuple(scores))
            )
    return predictions


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


class _Walker:
    """Box track doing a clipped Gaussian random walk."""

    def __init__(self, rng: np.random.Generator, size: float, step: float):
        self.half = size * rng.uniform(0.8, 1.2) / 2.0
        self.step = step
        self.position = rng.uniform(self.half, 1.0 - self.half, size=2)

    def advance(self, rng: np.random.Generator) -> None:
        moved = self.position + rng.normal(0.0, self.step, size=2)
        self.position = np.clip(moved, self.half, 1.0 - self.half)

    def box(self) -> BoxGeometry:
        return _box_at(self.position, self.half)


def _box_at(centre: np.ndarray, half: float) -> BoxGeometry:
    x, y = (float(v) for v in centre)
    return BoxGeometry(
        x1=max(0.0, x - half), y1=max(0.0, y - half), x2=min(1.0, x + half), y2=min(1.0, y + half)
    )


def _feature(rng: np.random.Generator, embedding: np.ndarray, noise: float) -> list[float]:
    values = embedding + rng.normal(0.0, noise, size=embedding.shape) if noise else embedding
    return [float(v) for v in values]


def _count(rng: np.random.Generator, bounds: tuple[int, int]) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def _detection(
    rng: np.random.Generator, actor: EntityDetection, noise: float
) -> EntityDetection:
    half_w, half_h = actor.box.w / 2.0, actor.box.h / 2.0
    centre = _centre(actor.box) + rng.normal(0.0, 0.1 * min(half_w, half_h), size=2)
    centre = np.clip(centre, [half_w, half_h], [1.0 - half_w, 1.0 - half_h])
    return EntityDetection(
        kind="actor",
        box=_box_at(centre, min(half_w, half_h)),
        score=float(rng.uniform(0.6, 1.0)),
        feature=_feature(rng, np.asarray(actor.feature), noise),
    )


def _video(
    rng: np.random.Generator,
    spec: SynthSpec,
    video_id: str,
    actor_embedding: np.ndarray,
    object_embeddings: np.ndarray,
) -> tuple[list[ClipRecord], dict[ClipKey, list[int]]]:
    transient = sorted(spec.transient_kinds)
    persistent = [k for k in range(spec.n_object_kinds) if k not in spec.transient_kinds]
    n_actors = _count(rng, spec.actors_per_clip)
    actors = [_Walker(rng, spec.box_size, spec.step) for _ in range(n_actors)]
    objects = [
        (int(rng.choice(persistent)), _Walker(rng, spec.box_size, spec.step))
        for _ in range(_count(rng, spec.objects_per_clip) if persistent else 0)
    ]

    clips: list[ClipRecord] = []
    kinds: dict[ClipKey, list[int]] = {}
    for timestamp in range(spec.clips_per_video):
        if timestamp:
            for walker in actors + [w for _, w in objects]:
                walker.advance(rng)
        placed = [(kind, walker.box()) for kind, walker in objects]
        for kind in transient:
            for _ in range(_count(rng, spec.transient_per_clip)):
                placed.append((kind, _Walker(rng, spec.box_size, 0.0).box()))

        entities = [
            EntityDetection(
                kind="actor",
                box=walker.box(),
                feature=_feature(rng, actor_embedding, spec.noise),
                labels=[],
            )
            for walker in actors
        ]
        entities += [
            EntityDetection(
                kind="object", box=box, feature=_feature(rng, object_embeddings[kind], spec.noise)
            )
            for kind, box in placed
        ]
        clip = ClipRecord(video_id=video_id, timestamp=timestamp, entities=entities)
        clips.append(clip)
        kinds[clip.key] = [kind for kind, _ in placed]
    return clips, kinds


def _apply_labels(
    clips: list[ClipRecord], kinds: Mapping[ClipKey, list[int]], rules: Sequence[SynthRule]
) -> list[ClipRecord]:
    labels = evaluate_rules(clips, kinds, rules)
    labelled = []
    for clip in clips:
        actors = [
            actor.model_copy(update={"labels": lab})
            for actor, lab in zip(clip.ground_truth_actors, labels[clip.key], strict=True)
        ]
        labelled.append(clip.model_copy(update={"entities": actors + clip.objects}))
    return labelled


def synth_generate(spec: SynthSpec) -> SynthResult:
    """Generate train/val splits, object kinds and a generation report from ``spec``.

    Deterministic given ``spec.seed``. Videos are split between train and val
    whole; a class whose rule never fires is reported as a warning.
    """
    rng = np.random.default_rng(spec.seed)
    actor_embedding = rng.normal(0.0, 1.0, size=spec.actor_dim)
    object_embeddings = rng.normal(0.0, 1.0, size=(spec.n_object_kinds, spec.object_dim))

    videos: list[list[ClipRecord]] = []
    kinds: dict[ClipKey, list[int]] = {}
    for index in range(spec.n_videos):
        clips, video_kinds = _video(
            rng, spec, f"synth{index:03d}", actor_embedding, object_embeddings
        )
        videos.append(_apply_labels(clips, video_kinds, spec.rules))
        kinds.update(video_kinds)

    if spec.emit_detections:
        videos = [
            [
                clip.model_copy(
                    update={
                        "entities": clip.entities
                        + [_detection(rng, a, spec.noise) for a in clip.ground_truth_actors]
                    }
                )
                for clip in video
            ]
            for video in videos
        ]

    n_val = math.floor(spec.n_videos * spec.val_fraction)
    if spec.val_fraction > 0 and spec.n_videos > 1:
        n_val = max(1, n_val)
    n_train = spec.n_videos - n_val
    train = [clip for video in videos[:n_train] for clip in video]
    val = [clip for video in videos[n_train:] for clip in video]

    positives: Counter[int] = Counter()
    n_actors = n_objects = 0
    for clip in train + val:
        n_objects += len(clip.objects)
        for actor in clip.ground_truth_actors:
            n_actors += 1
            positives.update(actor.labels or [])
    warnings = []
    for rule in spec.rules:
        if positives[rule.class_id] == 0:
            warnings.append(f"rule for class {rule.class_id} ({rule.kind}) produced no positives")
    report = SynthReport(
        n_train_clips=len(train),
        n_val_clips=len(val),
        n_actors=n_actors,
        n_objects=n_objects,
        positives={rule.class_id: positives[rule.class_id] for rule in spec.rules},
        warnings=warnings,
    )
    for message in warnings:
        logger.warning("synthetic rule never fired", detail=message)
    logger.info(
        "synthetic data generated",
        train_clips=report.n_train_clips,
        val_clips=report.n_val_clips,
        positives=report.positives,
    )
    return SynthResult(spec, train, val, kinds, report)


def write_synth(result: SynthResult, out_dir: str | Path) -> dict[str, Path]:
    """Write train.jsonl, val.jsonl and report.json; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": write_clips(out / "train.jsonl", result.train),
        "val": write_clips(out / "val.jsonl", result.val),
    }
    report_path = out / "report.json"
    report_path.write_text(
        json.dumps(result.report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    paths["report"] = report_path
    return paths
