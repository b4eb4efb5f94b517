"""Keyframe-level frame-mAP: IoU, per-class average precision and class-group means."""

from __future__ import annotations

import csv
import json
import os
from collections import defaultdict
from collections.abc import Hashable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import structlog

from stage_gat.models.records import BoxGeometry, ClipRecord

logger = structlog.get_logger("stage_gat.evaluation")


def iou(a: BoxGeometry, b: BoxGeometry) -> float:
    """Intersection over union of two axis-aligned boxes."""
    return float(iou_matrix(np.array([a.corners()]), np.array([b.corners()]))[0, 0])


def iou_matrix(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Pairwise IoU between rows of two [x1, y1, x2, y2] arrays."""
    a = np.asarray(first, dtype=np.float64).reshape(-1, 4)[:, None, :]
    b = np.asarray(second, dtype=np.float64).reshape(-1, 4)[None, :, :]
    width = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    height = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = width * height
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass(frozen=True)
class Detection:
    box: BoxGeometry
    score: float
    key: Hashable = None


@dataclass(frozen=True)
class GroundTruthBox:
    box: BoxGeometry
    key: Hashable = None


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruthBox], thresh: float = 0.5
) -> np.ndarray:
    """Greedy matching in descending score order; returns TP flags in that order.

    A detection is a true positive when the unmatched ground truth of the same
    key with the highest IoU reaches ``thresh``. Equal scores keep input order.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    by_key: dict[Hashable, list[int]] = defaultdict(list)
    for index, gt in enumerate(gts):
        by_key[gt.key].append(index)
    gt_boxes = np.array([gt.box.corners() for gt in gts]).reshape(-1, 4)

    matched = np.zeros(len(gts), dtype=bool)
    flags = np.zeros(len(dets), dtype=bool)
    for rank, index in enumerate(order):
        candidates = [g for g in by_key.get(dets[index].key, []) if not matched[g]]
        if not candidates:
            continue
        overlaps = iou_matrix(np.array([dets[index].box.corners()]), gt_boxes[candidates])[0]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= thresh:
            matched[candidates[best]] = True
            flags[rank] = True
    return flags


def precision_recall_ap(tp_flags: np.ndarray, n_gt: int) -> float:
    """All-point AP: area under the precision envelope of the PR step curve."""
    if n_gt == 0 or tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = np.concatenate([[0.0], tp / n_gt])
    precision = np.concatenate([[0.0], tp / (tp + fp)])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1]) + 1
    return float(((recall[steps] - recall[steps - 1]) * envelope[steps]).sum())


def average_precision(
    dets: Sequence[Detection], gts: Sequence[GroundTruthBox], thresh: float = 0.5
) -> float | None:
    """AP of one class; None when the class has neither ground truth nor detections."""
    if not gts:
        return None if not dets else 0.0
    return precision_recall_ap(match_detections(dets, gts, thresh), len(gts))


@dataclass(frozen=True)
class ActorPrediction:
    video_id: str
    timestamp: int
    box: BoxGeometry
    scores: tuple[float, ...]


@dataclass(frozen=True)
class ActorTruth:
    video_id: str
    timestamp: int
    box: BoxGeometry
    labels: tuple[int, ...]


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    mean_ap: float
    eligible: list[int]
    n_gt: dict[int, int]
    n_det: dict[int, int]
    group_means: dict[str, float] = field(default_factory=dict)
    class_names: dict[int, str] = field(default_factory=dict)

    def name_of(self, class_id: int) -> str:
        return self.class_names.get(class_id, f"class_{class_id}")

    def to_dict(self) -> dict:
        return {
            "mean_ap": self.mean_ap,
            "eligible_classes": self.eligible,
            "group_means": self.group_means,
            "per_class": [
                {
                    "class_id": c,
                    "class_name": self.name_of(c),
                    "n_gt": self.n_gt.get(c, 0),
                    "n_det": self.n_det.get(c, 0),
                    "ap": self.per_class_ap[c],
                }
                for c in sorted(self.per_class_ap)
            ],
        }

    def summary(self) -> str:
        groups = "".join(f" {name}={value:.4f}" for name, value in sorted(self.group_means.items()))
        return f"frame-mAP@0.5={self.mean_ap:.4f} over {len(self.eligible)} classes{groups}"

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["class_id", "class_name", "n_gt", "AP"])
            for class_id in sorted(self.per_class_ap):
                writer.writerow(
                    [
                        class_id,
                        self.name_of(class_id),
                        self.n_gt.get(class_id, 0),
                        f"{self.per_class_ap[class_id]:.6f}",
                    ]
                )
        return path

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, threads)
    return max(1, int(os.environ.get("STAGE_THREADS", "1")))


def frame_map(
    predictions: Sequence[ActorPrediction],
    ground_truth: Sequence[ActorTruth],
    thresh: float = 0.5,
    min_class_examples: int = 0,
    *,
    n_classes: int | None = None,
    groups: Mapping[int, str] | None = None,
    class_names: Mapping[int, str] | None = None,
    threads: int | None = None,
) -> EvalReport:
    """Pool (box, class) detections over keyframes and average AP over eligible classes.

    A class is eligible when it has at least max(1, min_class_examples) ground
    truth boxes.
    """
    if not ground_truth:
        raise ValueError("ground truth is empty")

    width = n_classes
    if width is None:
        width = max(
            [len(p.scores) for p in predictions]
            + [max(t.labels) + 1 for t in ground_truth if t.labels]
            + [0]
        )
    dets: dict[int, list[Detection]] = defaultdict(list)
    gts: dict[int, list[GroundTruthBox]] = defaultdict(list)
    for pred in predictions:
        key = (pred.video_id, pred.timestamp)
        for class_id, score in enumerate(pred.scores):
            dets[class_id].append(Detection(pred.box, float(score), key))
    for truth in ground_truth:
        for class_id in truth.labels:
            gts[class_id].append(GroundTruthBox(truth.box, (truth.video_id, truth.timestamp)))

    classes = [c for c in range(width) if dets.get(c) or gts.get(c)]
    with ThreadPoolExecutor(max_workers=_threads(threads)) as pool:
        results = list(pool.map(lambda c: average_precision(dets[c], gts[c], thresh), classes))

    per_class = {c: ap for c, ap in zip(classes, results, strict=True) if ap is not None}
    floor = max(1, min_class_examples)
    eligible = [c for c in classes if len(gts.get(c, [])) >= floor]
    mean_ap = float(np.mean([per_class[c] for c in eligible])) if eligible else 0.0

    group_means: dict[str, float] = {}
    if groups:
        members: dict[str, list[float]] = defaultdict(list)
        for class_id in eligible:
            if class_id in groups:
                members[groups[class_id]].append(per_class[class_id])
        group_means = {name: float(np.mean(values)) for name, values in members.items()}

    report = EvalReport(
        per_class_ap=per_class,
        mean_ap=mean_ap,
        eligible=eligible,
        n_gt={c: len(gts.get(c, [])) for c in classes},
        n_det={c: len(dets.get(c, [])) for c in classes},
        group_means=group_means,
        class_names=dict(class_names or {}),
    )
    logger.debug("frame_map computed", mean_ap=mean_ap, eligible=len(eligible))
    return report


def ground_truth_from_clips(clips: Sequence[ClipRecord]) -> list[ActorTruth]:
    return [
        ActorTruth(clip.video_id, clip.timestamp, actor.box, tuple(actor.labels or ()))
        for clip in clips
        for actor in clip.ground_truth_actors
    ]


def _read_mapping(path: str | Path, value_column: str) -> dict[int, str]:
    with Path(path).open("r", newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or "class_id" not in reader.fieldnames:
            raise ValueError(f"{path}: expected a header with class_id,{value_column}")
        if value_column not in reader.fieldnames:
            raise ValueError(f"{path}: missing column {value_column!r}")
        return {int(row["class_id"]): row[value_column].strip() for row in reader}


def load_groups(path: str | Path) -> dict[int, str]:
    """Class-to-group map from a CSV with columns class_id,group."""
    return _read_mapping(path, "group")


def load_class_names(path: str | Path) -> dict[int, str]:
    """Class names from a CSV with columns class_id,class_name."""
    return _read_mapping(path, "class_name")
