"""Windowed batching, label assignment, Adam with plateau decay, and the training loop."""

from __future__ import annotations

import csv
from collections import defaultdict
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import structlog

from stage_gat.core import numcore as nc
from stage_gat.core.errors import DivergenceError, NonFiniteError
from stage_gat.core.graph import WindowGraph, build_window, merge_windows
from stage_gat.core.model import ParameterSet, StageModel, save_checkpoint
from stage_gat.core.numcore import Gradients, Tape
from stage_gat.learning.evaluation import (
    ActorPrediction,
    EvalReport,
    frame_map,
    ground_truth_from_clips,
    iou_matrix,
)
from stage_gat.models.config import StageConfig
from stage_gat.models.records import BoxGeometry, ClipRecord

logger = structlog.get_logger("stage_gat.trainer")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LR_FACTOR = 0.1


# ---------------------------------------------------------------------------
# windows and views
# ---------------------------------------------------------------------------


def _segments(clips: Sequence[ClipRecord]) -> list[list[int]]:
    """Indices of clips grouped by video and split wherever timestamps jump."""
    by_video: dict[str, list[int]] = defaultdict(list)
    for index, clip in enumerate(clips):
        by_video[clip.video_id].append(index)

    segments: list[list[int]] = []
    for video_id, indices in by_video.items():
        indices.sort(key=lambda i: clips[i].timestamp)
        if not any(clips[i].entities for i in indices):
            logger.warning("skipping video without entities", video_id=video_id)
            continue
        current = [indices[0]]
        for index in indices[1:]:
            if clips[index].timestamp != clips[current[-1]].timestamp + 1:
                segments.append(current)
                current = []
            current.append(index)
        segments.append(current)
    return segments


def make_windows(
    clips: Sequence[ClipRecord], window: int, stride: int | None = None
) -> list[tuple[int, ...]]:
    """Sliding windows of ``window`` consecutive clips, as indices into ``clips``.

    Windows never span two videos or a timestamp gap; a shorter tail forms its
    own window.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    stride = stride or window
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    windows: list[tuple[int, ...]] = []
    for segment in _segments(clips):
        for start in range(0, len(segment), stride):
            windows.append(tuple(segment[start : start + window]))
            if start + window >= len(segment):
                break
    return windows


def assign_labels(
    pred_boxes: Sequence[BoxGeometry],
    gt_boxes: Sequence[BoxGeometry],
    gt_labels: Sequence[Sequence[int]],
    iou_thresh: float = 0.5,
) -> list[list[int]]:
    """Labels of the max-IoU ground-truth box when that IoU reaches ``iou_thresh``."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    if len(gt_boxes) != len(gt_labels):
        raise ValueError("gt_boxes and gt_labels differ in length")
    if not pred_boxes:
        return []
    if not gt_boxes:
        return [[] for _ in pred_boxes]

    overlaps = iou_matrix(
        np.array([b.corners() for b in pred_boxes]), np.array([b.corners() for b in gt_boxes])
    )
    best = overlaps.argmax(axis=1)
    return [
        list(gt_labels[g]) if overlaps[row, g] >= iou_thresh else []
        for row, g in enumerate(best)
    ]


def has_detections(clips: Sequence[ClipRecord]) -> bool:
    return any(clip.detected_actors for clip in clips)


def training_view(clip: ClipRecord, config: StageConfig) -> ClipRecord:
    """Ground-truth actors plus, optionally, detections labelled by IoU with them."""
    truth = clip.ground_truth_actors
    actors = list(truth)
    detections = clip.detected_actors
    if config.train_with_detections and detections:
        labels = assign_labels(
            [d.box for d in detections],
            [t.box for t in truth],
            [t.labels or [] for t in truth],
            config.train_iou,
        )
        actors += [
            d.model_copy(update={"labels": lab})
            for d, lab in zip(detections, labels, strict=True)
        ]
    return clip.model_copy(update={"entities": actors + clip.objects})


def evaluation_view(clip: ClipRecord, config: StageConfig, use_detections: bool) -> ClipRecord:
    """Actors to score: confident detections, or ground-truth boxes when there are none."""
    if use_detections:
        actors = [d for d in clip.detected_actors if d.score >= config.eval_score_threshold]
    else:
        actors = [a.model_copy(update={"labels": None}) for a in clip.ground_truth_actors]
    return clip.model_copy(update={"entities": actors + clip.objects})


def build_windows(
    views: Sequence[ClipRecord], config: StageConfig, stride: int
) -> list[tuple[tuple[int, ...], WindowGraph]]:
    return [
        (indices, build_window([views[i] for i in indices], config))
        for indices in make_windows(views, config.window, stride)
    ]


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    """Parameters, Adam moments, schedule counters and the training rng."""

    params: ParameterSet
    lr: float
    rng: np.random.Generator
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    best: float = float("-inf")
    since_decay: int = 0
    since_stop: int = 0

    @classmethod
    def start(cls, params: ParameterSet, lr: float, rng: np.random.Generator) -> TrainState:
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        zeros = {name: np.zeros_like(value) for name, value in params.values().items()}
        return cls(
            params=params,
            lr=lr,
            rng=rng,
            m=zeros,
            v={name: z.copy() for name, z in zeros.items()},
        )

    def observe(self, metric: float, decay_patience: int, stop_patience: int) -> bool:
        """Update plateau counters with a validation metric; True when training should stop.

        The learning rate drops by ``LR_FACTOR`` every ``decay_patience`` epochs
        without improvement.
        """
        if metric > self.best:
            self.best = metric
            self.since_decay = 0
            self.since_stop = 0
            return False
        self.since_decay += 1
        self.since_stop += 1
        if self.since_decay >= decay_patience:
            self.lr *= LR_FACTOR
            self.since_decay = 0
            logger.info("learning rate decayed", lr=self.lr)
        return self.since_stop >= stop_patience


def adam_step(state: TrainState, grads: Gradients) -> TrainState:
    """One bias-corrected Adam update applied in place to ``state.params``."""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"non-finite gradient in parameter block {name!r}")

    state.step += 1
    correction1 = 1.0 - ADAM_BETA1**state.step
    correction2 = 1.0 - ADAM_BETA2**state.step
    for name, matrix in state.params.named().items():
        grad = grads[name]
        m = state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * grad
        v = state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * grad**2
        matrix.value -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + ADAM_EPS)
    return state


# ---------------------------------------------------------------------------
# prediction and validation
# ---------------------------------------------------------------------------


def predict(
    model: StageModel, clips: Sequence[ClipRecord], stride: int | None = None
) -> list[ActorPrediction]:
    """Per-actor class scores for every clip, keyed by (video, timestamp).

    With overlapping windows a clip is scored from the window in which it sits
    closest to the centre.
    """
    config = model.config
    use_detections = has_detections(clips)
    views = [evaluation_view(clip, config, use_detections) for clip in clips]

    chosen: dict[int, tuple[float, list[ActorPrediction]]] = {}
    for indices, window in build_windows(views, config, stride or config.resolved_eval_stride):
        if window.n_actors == 0:
            continue
        scores = model.scores(window)
        per_clip: dict[tuple[str, int], list[ActorPrediction]] = defaultdict(list)
        for ref, row in zip(window.actor_refs, scores, strict=True):
            per_clip[(ref.video_id, ref.timestamp)].append(
                ActorPrediction(ref.video_id, ref.timestamp, ref.box, tuple(float(s) for s in row))
            )
        centre = (len(indices) - 1) / 2.0
        for position, index in enumerate(indices):
            distance = abs(position - centre)
            if index not in chosen or distance < chosen[index][0]:
                chosen[index] = (distance, per_clip.get(views[index].key, []))
    return [pred for index in sorted(chosen) for pred in chosen[index][1]]


def evaluate(
    model: StageModel,
    clips: Sequence[ClipRecord],
    *,
    min_class_examples: int | None = None,
    groups: Mapping[int, str] | None = None,
    class_names: Mapping[int, str] | None = None,
    threads: int | None = None,
) -> EvalReport:
    config = model.config
    floor = config.min_class_examples if min_class_examples is None else min_class_examples
    return frame_map(
        predict(model, clips),
        ground_truth_from_clips(clips),
        0.5,
        floor,
        n_classes=config.n_classes,
        groups=groups,
        class_names=class_names,
        threads=threads,
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_map: float
    lr: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    @property
    def best_map(self) -> float:
        if self.best_epoch is None:
            return float("nan")
        return self.records[self.best_epoch - 1].val_map

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["epoch", "train_loss", "val_map", "lr"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_map), repr(r.lr)])
        return path


def _minibatches(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[start : start + size] for start in range(0, len(order), size)]


def fit(
    config: StageConfig,
    train: Sequence[ClipRecord],
    val: Sequence[ClipRecord],
    *,
    checkpoint_dir: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[ParameterSet, TrainingHistory]:
    """Train a STAGE model and return the best-validation parameters with the history.

    Args:
        config: Model and optimisation settings; ``seed`` fixes initialisation,
            window shuffling and dropout.
        train: Training clips (ground-truth actors, optional detections, objects).
        val: Validation clips scored with frame-mAP after every epoch.
        checkpoint_dir: When given, ``best.npz``, ``last.npz`` and ``history.csv``
            are kept up to date there.
        on_epoch: Callback invoked with each epoch's record.

    Raises:
        ValueError: If either split is empty or no training window holds an actor.
        DivergenceError: If the loss or a gradient becomes non-finite.
    """
    if not train or not val:
        raise ValueError("fit needs non-empty train and val splits")

    shuffle_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = StageModel(config)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    state = TrainState.start(model.params, config.lr, np.random.default_rng(dropout_seq))

    views = [training_view(clip, config) for clip in train]
    graphs = [w for _, w in build_windows(views, config, config.resolved_train_stride)]
    graphs = [w for w in graphs if w.n_actors > 0]
    if not graphs:
        raise ValueError("no training window contains an actor")

    out_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    history = TrainingHistory()
    best_params = state.params.copy()
    last_checkpoint: str | None = None
    logger.info(
        "training started",
        windows=len(graphs),
        val_clips=len(val),
        params=state.params.count(),
        lr=state.lr,
    )

    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for batch in _minibatches(shuffle_rng.permutation(len(graphs)), config.minibatch_windows):
            merged = merge_windows([graphs[i] for i in batch])
            tape = Tape()
            try:
                value = model.loss(merged, True, state.rng, tape=tape)
                grads = nc.backward(tape, value, state.params.matrices())
                adam_step(state, grads)
            except NonFiniteError as exc:
                logger.error("training diverged", epoch=epoch, error=str(exc))
                raise DivergenceError(str(exc), epoch, last_checkpoint) from exc
            losses.append(value.item())

        report = evaluate(model, val)
        improved = report.mean_ap > state.best
        stop = state.observe(report.mean_ap, config.decay_patience, config.stop_patience)
        record = EpochRecord(epoch, float(np.mean(losses)), report.mean_ap, state.lr)
        history.append(record)
        if improved:
            history.best_epoch = epoch
            best_params = state.params.copy()

        logger.info(
            "epoch finished",
            epoch=epoch,
            train_loss=round(record.train_loss, 6),
            val_map=round(record.val_map, 6),
            lr=record.lr,
        )
        if out_dir is not None:
            if improved:
                save_checkpoint(
                    out_dir / "best.npz", config, best_params, epoch=epoch, val_map=record.val_map
                )
            last_checkpoint = str(
                save_checkpoint(
                    out_dir / "last.npz", config, state.params, epoch=epoch, val_map=record.val_map
                )
            )
            history.write_csv(out_dir / "history.csv")
        if on_epoch is not None:
            on_epoch(record)
        if stop:
            logger.info("early stopping", epoch=epoch, best_epoch=history.best_epoch)
            break

    return best_params, history
