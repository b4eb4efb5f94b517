"""Adjacency matrices, temporal and interaction masks, and window graph assembly."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import structlog

from stage_gat.core.errors import DatasetFormatError, DimensionError, TemporalGapError
from stage_gat.core.numcore import Matrix
from stage_gat.models.config import StageConfig
from stage_gat.models.records import BoxGeometry, ClipRecord, EntityDetection

logger = structlog.get_logger("stage_gat.graph")

DEFAULT_ADJ_CAP = 1e6


def box_centers(boxes: Sequence[BoxGeometry]) -> np.ndarray:
    return np.array([[b.xc, b.yc] for b in boxes], dtype=np.float64).reshape(len(boxes), 2)


def _proximity(centers: np.ndarray) -> np.ndarray:
    delta = centers[:, None, :] - centers[None, :, :]
    return np.exp(-np.sqrt((delta**2).sum(axis=-1)))


def proximity_adjacency(entities: Sequence[BoxGeometry]) -> Matrix:
    """A[i, j] = exp(-‖c_i - c_j‖₂) over box centers."""
    if not entities:
        raise ValueError("proximity_adjacency needs at least one entity")
    return Matrix(_proximity(box_centers(entities)))


def feature_distance_adjacency(H: Matrix | np.ndarray, cap: float = DEFAULT_ADJ_CAP) -> Matrix:
    """A[i, j] = 1 / ‖h_i - h_j‖₂, capped at ``cap``; the diagonal is the cap."""
    values = H.value if isinstance(H, Matrix) else np.asarray(H, dtype=np.float64)
    delta = values[:, None, :] - values[None, :, :]
    dist = np.sqrt((delta**2).sum(axis=-1))
    with np.errstate(divide="ignore"):
        inverse = np.where(dist > 0, 1.0 / np.where(dist > 0, dist, 1.0), np.inf)
    adjacency = np.minimum(inverse, cap)
    np.fill_diagonal(adjacency, cap)
    return Matrix(adjacency)


@dataclass
class ClipAdjacency:
    adjacency: Matrix
    tmask: np.ndarray
    offsets: np.ndarray


def check_consecutive(clips: Sequence[ClipRecord]) -> None:
    for previous, current in zip(clips, clips[1:], strict=False):
        if current.video_id != previous.video_id:
            raise ValueError(
                f"window spans videos {previous.video_id!r} and {current.video_id!r}"
            )
        if current.timestamp != previous.timestamp + 1:
            raise TemporalGapError(previous.timestamp, current.timestamp)


def multi_clip_adjacency(clips: Sequence[ClipRecord], rf_direct: int = 3) -> ClipAdjacency:
    """Block adjacency over all entities of consecutive clips.

    Blocks between clips at most (rf_direct - 1) / 2 apart hold box proximity;
    every other block is exactly zero and marked off in ``tmask``.
    """
    if rf_direct < 1 or rf_direct % 2 == 0:
        raise ValueError(f"rf_direct must be a positive odd number, got {rf_direct}")
    check_consecutive(clips)

    counts = [len(clip.entities) for clip in clips]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    clip_index = np.repeat(np.arange(len(clips)), counts)
    reach = (rf_direct - 1) // 2
    tmask = np.abs(clip_index[:, None] - clip_index[None, :]) <= reach

    boxes = [entity.box for clip in clips for entity in clip.entities]
    adjacency = np.where(tmask, _proximity(box_centers(boxes)), 0.0) if boxes else np.zeros((0, 0))
    return ClipAdjacency(Matrix(adjacency), tmask, offsets)


def interaction_mask(
    is_actor: Sequence[bool] | np.ndarray,
    aa: bool = True,
    ao: bool = True,
    oa: bool = True,
    oo: bool = True,
) -> Matrix:
    """{0,1} mask removing disabled actor/object interaction blocks; self-edges stay."""
    actor = np.asarray(is_actor, dtype=bool)
    row, col = actor[:, None], actor[None, :]
    allowed = (
        (row & col & aa)
        | (row & ~col & ao)
        | (~row & col & oa)
        | (~row & ~col & oo)
    )
    np.fill_diagonal(allowed, True)
    return Matrix(allowed.astype(np.float64))


@dataclass(frozen=True)
class ActorRef:
    """Where an actor row of a window came from; keys predictions for evaluation."""

    video_id: str
    timestamp: int
    box: BoxGeometry
    score: float


@dataclass
class WindowGraph:
    """Features, adjacency and masks of consecutive clips; the unit of forward/backward.

    Rows are ordered clip by clip, actors before objects inside a clip. Actor and
    object features are kept separately (extended with box geometry) because the
    input projection applies to one kind only; ``order`` scatters the stacked
    [actors; objects] rows back into window order.
    """

    clip_keys: list[tuple[str, int]]
    offsets: np.ndarray
    is_actor: np.ndarray
    boxes: np.ndarray
    actor_features: np.ndarray
    object_features: np.ndarray
    order: np.ndarray
    adjacency: Matrix
    tmask: np.ndarray
    imask: np.ndarray
    actor_labels: np.ndarray
    actor_refs: list[ActorRef] = field(default_factory=list)

    @property
    def n_entities(self) -> int:
        return int(self.is_actor.shape[0])

    @property
    def n_actors(self) -> int:
        return int(self.is_actor.sum())

    @property
    def n_objects(self) -> int:
        return self.n_entities - self.n_actors

    @property
    def actor_rows(self) -> np.ndarray:
        """Window rows of the actors, aligned with actor_features and actor_labels."""
        return np.argsort(self.order, kind="stable")[: self.actor_features.shape[0]]

    @property
    def mask(self) -> np.ndarray:
        """Combined attention mask: temporal reach and enabled interaction blocks."""
        return self.tmask & self.imask


def _extended(entity: EntityDetection) -> list[float]:
    return list(entity.feature) + entity.box.geometry_features()


def _ordered_entities(clip: ClipRecord) -> list[EntityDetection]:
    return clip.actors + clip.objects


def build_window(clips: Sequence[ClipRecord], config: StageConfig) -> WindowGraph:
    """Assemble the graph of a window from already-selected clip views.

    Every actor in ``clips`` becomes a node; actors without labels count as
    background rows.
    """
    if not clips:
        raise ValueError("a window needs at least one clip")
    view = [clip.model_copy(update={"entities": _ordered_entities(clip)}) for clip in clips]
    structure = multi_clip_adjacency(view, config.effective_rf)

    entities = [entity for clip in view for entity in clip.entities]
    refs: list[ActorRef] = []
    actor_rows: list[list[float]] = []
    object_rows: list[list[float]] = []
    order: list[int] = []
    labels: list[np.ndarray] = []
    for clip in view:
        for entity in clip.entities:
            extended = _extended(entity)
            if entity.kind == "actor":
                if len(entity.feature) != config.actor_dim:
                    raise DatasetFormatError(
                        f"actor feature width {len(entity.feature)} != {config.actor_dim} "
                        f"in clip {clip.video_id}@{clip.timestamp}"
                    )
                order.append(len(actor_rows))
                actor_rows.append(extended)
                refs.append(ActorRef(clip.video_id, clip.timestamp, entity.box, entity.score))
                labels.append(_multi_hot(entity.labels or [], config.n_classes))
            else:
                if len(entity.feature) != config.object_dim:
                    raise DatasetFormatError(
                        f"object feature width {len(entity.feature)} != {config.object_dim} "
                        f"in clip {clip.video_id}@{clip.timestamp}"
                    )
                order.append(-1 - len(object_rows))
                object_rows.append(extended)

    n_actors = len(actor_rows)
    scatter = np.array([i if i >= 0 else n_actors + (-1 - i) for i in order], dtype=np.int64)
    is_actor = np.array([e.kind == "actor" for e in entities], dtype=bool)
    actor_features = np.array(actor_rows, dtype=np.float64).reshape(n_actors, config.actor_dim + 4)
    object_features = np.array(object_rows, dtype=np.float64).reshape(
        len(object_rows), config.object_dim + 4
    )

    adjacency = structure.adjacency
    if config.adjacency == "feature":
        padded = _padded_features(actor_features, object_features, scatter)
        adjacency = Matrix(
            np.where(structure.tmask, feature_distance_adjacency(padded, config.adj_cap).value, 0.0)
        )
    elif not config.proximity_on:
        adjacency = Matrix(structure.tmask.astype(np.float64))

    imask = interaction_mask(is_actor, config.aa_on, config.ao_on, config.oa_on, config.oo_on)
    return WindowGraph(
        clip_keys=[clip.key for clip in view],
        offsets=structure.offsets,
        is_actor=is_actor,
        boxes=np.array([e.box.corners() for e in entities], dtype=np.float64).reshape(-1, 4),
        actor_features=actor_features,
        object_features=object_features,
        order=scatter,
        adjacency=adjacency,
        tmask=structure.tmask,
        imask=imask.value != 0,
        actor_labels=np.array(labels, dtype=np.float64).reshape(n_actors, config.n_classes),
        actor_refs=refs,
    )


def _multi_hot(labels: Sequence[int], n_classes: int) -> np.ndarray:
    row = np.zeros(n_classes)
    for label in labels:
        if label >= n_classes:
            raise DatasetFormatError(f"class id {label} out of range for {n_classes} classes")
        row[label] = 1.0
    return row


def _padded_features(actors: np.ndarray, objects: np.ndarray, order: np.ndarray) -> np.ndarray:
    width = max(actors.shape[1], objects.shape[1])
    stacked = np.zeros((actors.shape[0] + objects.shape[0], width))
    stacked[: actors.shape[0], : actors.shape[1]] = actors
    stacked[actors.shape[0] :, : objects.shape[1]] = objects
    return stacked[order]


def permute_window(window: WindowGraph, permutation: Sequence[int] | np.ndarray) -> WindowGraph:
    """Reorder window rows.

    Used to check permutation equivariance: the adjacency and both masks are
    permuted consistently with the features.
    """
    perm = np.asarray(permutation, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(window.n_entities)):
        raise DimensionError("permute_window", (window.n_entities,), perm.shape)
    adjacency = window.adjacency.value[np.ix_(perm, perm)]
    return WindowGraph(
        clip_keys=window.clip_keys,
        offsets=window.offsets,
        is_actor=window.is_actor[perm],
        boxes=window.boxes[perm],
        actor_features=window.actor_features,
        object_features=window.object_features,
        order=window.order[perm],
        adjacency=Matrix(adjacency),
        tmask=window.tmask[np.ix_(perm, perm)],
        imask=window.imask[np.ix_(perm, perm)],
        actor_labels=window.actor_labels,
        actor_refs=window.actor_refs,
    )


def merge_windows(windows: Sequence[WindowGraph]) -> WindowGraph:
    """Block-diagonal union of windows; no attention flows between them."""
    if not windows:
        raise ValueError("merge_windows needs at least one window")
    if len(windows) == 1:
        return windows[0]

    total_actors = sum(w.actor_features.shape[0] for w in windows)
    n = sum(w.n_entities for w in windows)
    adjacency = np.zeros((n, n))
    tmask = np.zeros((n, n), dtype=bool)
    imask = np.zeros((n, n), dtype=bool)
    orders: list[np.ndarray] = []
    offsets: list[np.ndarray] = [np.zeros(1, dtype=np.int64)]
    row = actor_base = object_base = 0
    for w in windows:
        span = slice(row, row + w.n_entities)
        adjacency[span, span] = w.adjacency.value
        tmask[span, span] = w.tmask
        imask[span, span] = w.imask
        n_actors = w.actor_features.shape[0]
        orders.append(
            np.where(
                w.order < n_actors,
                w.order + actor_base,
                w.order - n_actors + total_actors + object_base,
            )
        )
        offsets.append(w.offsets[1:] + row)
        row += w.n_entities
        actor_base += n_actors
        object_base += w.object_features.shape[0]

    logger.debug("windows merged", windows=len(windows), entities=row)
    return WindowGraph(
        clip_keys=[key for w in windows for key in w.clip_keys],
        offsets=np.concatenate(offsets),
        is_actor=np.concatenate([w.is_actor for w in windows]),
        boxes=np.vstack([w.boxes for w in windows]),
        actor_features=np.vstack([w.actor_features for w in windows]),
        object_features=np.vstack([w.object_features for w in windows]),
        order=np.concatenate(orders),
        adjacency=Matrix(adjacency),
        tmask=tmask,
        imask=imask,
        actor_labels=np.vstack([w.actor_labels for w in windows]),
        actor_refs=[ref for w in windows for ref in w.actor_refs],
    )
