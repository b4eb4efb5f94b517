"""STAGE model: input assembly, classifier, losses, parameter/FLOP accounting, checkpoints."""

from __future__ import annotations

import json
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import structlog

from stage_gat.core import numcore as nc
from stage_gat.core.attention import (
    AnyHeadParams,
    HeadParams,
    LayerParams,
    TransformerHeadParams,
    stage_forward,
)
from stage_gat.core.errors import ConfigMismatchError, DimensionError
from stage_gat.core.graph import WindowGraph
from stage_gat.core.numcore import Matrix, Tape
from stage_gat.models.config import StageConfig

logger = structlog.get_logger("stage_gat.model")

CHECKPOINT_VERSION = 1


@dataclass
class ParameterSet:
    """Every learnable matrix, in declaration order: input projection, layers, classifier."""

    proj_W: Matrix
    proj_b: Matrix
    layers: list[LayerParams]
    cls_W: Matrix
    cls_b: Matrix

    def matrices(self) -> list[Matrix]:
        inner = [m for layer in self.layers for m in layer.matrices()]
        return [self.proj_W, self.proj_b, *inner, self.cls_W, self.cls_b]

    def __iter__(self) -> Iterator[Matrix]:
        return iter(self.matrices())

    def named(self) -> dict[str, Matrix]:
        return {m.name: m for m in self.matrices()}  # type: ignore[misc]

    def values(self) -> dict[str, np.ndarray]:
        return {m.name: m.value.copy() for m in self.matrices()}  # type: ignore[misc]

    def count(self) -> int:
        return sum(m.value.size for m in self.matrices())

    def load_values(self, values: Mapping[str, np.ndarray]) -> ParameterSet:
        """Copy of this set with every matrix replaced by ``values[name]``."""
        for matrix in self.matrices():
            if matrix.name not in values:
                raise ConfigMismatchError(f"missing parameter {matrix.name!r}")
            if np.shape(values[matrix.name]) != matrix.shape:
                raise ConfigMismatchError(
                    f"parameter {matrix.name!r} has shape {np.shape(values[matrix.name])}, "
                    f"expected {matrix.shape}"
                )
        return _map_matrices(self, lambda m: Matrix.parameter(values[m.name], m.name))

    def copy(self) -> ParameterSet:
        return _map_matrices(self, lambda m: Matrix.parameter(m.value.copy(), m.name))


def _map_matrices(params: ParameterSet, fn) -> ParameterSet:
    def head(h: AnyHeadParams) -> AnyHeadParams:
        if isinstance(h, HeadParams):
            return HeadParams(fn(h.Wh), fn(h.bh), fn(h.a), fn(h.ba))
        return TransformerHeadParams(fn(h.Wq), fn(h.bq), fn(h.Wk), fn(h.bk), fn(h.Wv), fn(h.bv))

    layers = [
        LayerParams(
            [head(h) for h in layer.heads],
            fn(layer.Wo),
            fn(layer.bo),
            fn(layer.ln_gain),
            fn(layer.ln_bias),
        )
        for layer in params.layers
    ]
    return ParameterSet(
        fn(params.proj_W), fn(params.proj_b), layers, fn(params.cls_W), fn(params.cls_b)
    )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Matrix:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Matrix.parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), name)


def _zeros(cols: int, name: str) -> Matrix:
    return Matrix.parameter(np.zeros((1, cols)), name)


def init_parameters(config: StageConfig, rng: np.random.Generator) -> ParameterSet:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    d_f, d_h = config.d_f, config.d_h
    layers = []
    for l_index in range(config.n_layers):
        prefix = f"gal{l_index + 1}"
        heads: list[AnyHeadParams] = []
        for h_index in range(config.n_heads):
            hp = f"{prefix}.head{h_index}"
            if config.attention == "transformer":
                heads.append(
                    TransformerHeadParams(
                        _glorot(rng, d_f, d_h, f"{hp}.Wq"), _zeros(d_h, f"{hp}.bq"),
                        _glorot(rng, d_f, d_h, f"{hp}.Wk"), _zeros(d_h, f"{hp}.bk"),
                        _glorot(rng, d_f, d_h, f"{hp}.Wv"), _zeros(d_h, f"{hp}.bv"),
                    )
                )
            else:
                scorer = _glorot(rng, 2 * d_h, 1, f"{hp}.a")
                heads.append(
                    HeadParams(
                        _glorot(rng, d_f, d_h, f"{hp}.Wh"),
                        _zeros(d_h, f"{hp}.bh"),
                        Matrix.parameter(scorer.value.T, scorer.name),  # type: ignore[arg-type]
                        _zeros(1, f"{hp}.ba"),
                    )
                )
        layers.append(
            LayerParams(
                heads,
                _glorot(rng, config.n_heads * d_h, d_f, f"{prefix}.Wo"),
                _zeros(d_f, f"{prefix}.bo"),
                Matrix.parameter(np.ones((1, d_f)), f"{prefix}.ln_gain"),
                _zeros(d_f, f"{prefix}.ln_bias"),
            )
        )
    return ParameterSet(
        _glorot(rng, config.projected_in, d_f, "input.W"),
        _zeros(d_f, "input.b"),
        layers,
        _glorot(rng, d_f, config.n_classes, "classifier.W"),
        _zeros(config.n_classes, "classifier.b"),
    )


def assemble_entity_features(
    window: WindowGraph, params: ParameterSet, config: StageConfig, *, tape: Tape | None = None
) -> Matrix:
    """Window-ordered d_f inputs: the wider kind is projected, the other passes unchanged."""
    actors = Matrix(window.actor_features)
    objects = Matrix(window.object_features)
    if config.projected_kind == "object":
        objects = nc.linear(objects, params.proj_W, params.proj_b, tape=tape)
    else:
        actors = nc.linear(actors, params.proj_W, params.proj_b, tape=tape)
    if actors.cols != objects.cols:
        raise DimensionError("assemble_entity_features", actors.shape, objects.shape)
    return nc.take_rows(nc.stack_rows([actors, objects], tape=tape), window.order, tape=tape)


def classify_actors(
    H: Matrix, window: WindowGraph, params: ParameterSet, *, tape: Tape | None = None
) -> Matrix:
    """Per-class logits for the actor rows only; object rows produce none."""
    actors = nc.take_rows(H, window.actor_rows, tape=tape)
    return nc.linear(actors, params.cls_W, params.cls_b, tape=tape)


def loss(logits: Matrix, labels: np.ndarray, mode: str, *, tape: Tape | None = None) -> Matrix:
    """Mean over actor rows of sigmoid (multi-label) or softmax (single-label) cross-entropy.

    Single-label mode accepts class indices or multi-hot rows; multi-hot rows
    without a label are background and contribute nothing.
    """
    labels = np.asarray(labels)
    if mode == "multi_label":
        return nc.sigmoid_cross_entropy(logits, labels, tape=tape)
    if mode != "single_label":
        raise ValueError(f"unknown loss mode {mode!r}")
    if labels.ndim == 1:
        return nc.softmax_cross_entropy(logits, labels, tape=tape)
    counts = labels.sum(axis=1)
    if (counts > 1).any():
        row = int(np.flatnonzero(counts > 1)[0])
        raise ValueError(f"actor row {row} carries {int(counts[row])} labels in single-label mode")
    rows = np.flatnonzero(counts == 1)
    if rows.size == logits.rows:
        return nc.softmax_cross_entropy(logits, labels.argmax(axis=1), tape=tape)
    selected = nc.take_rows(logits, rows, tape=tape)
    return nc.softmax_cross_entropy(selected, labels[rows].argmax(axis=1), tape=tape)


class StageModel:
    """Configured STAGE network bound to a parameter set."""

    def __init__(self, config: StageConfig, params: ParameterSet | None = None):
        self.config = config
        self.params = params or init_parameters(config, np.random.default_rng(config.seed))

    def embed(
        self,
        window: WindowGraph,
        training: bool = False,
        rng: np.random.Generator | None = None,
        *,
        tape: Tape | None = None,
    ) -> Matrix:
        cfg = self.config
        X = assemble_entity_features(window, self.params, cfg, tape=tape)
        return stage_forward(
            X, window, self.params.layers, training, rng,
            slope=cfg.leaky_slope, keep=cfg.keep, eps=cfg.ln_eps, tape=tape,
        )

    def forward(
        self,
        window: WindowGraph,
        training: bool = False,
        rng: np.random.Generator | None = None,
        *,
        tape: Tape | None = None,
    ) -> Matrix:
        """Actor logits for a window (A_t x n_classes)."""
        if window.n_entities == 0:
            return Matrix(np.zeros((0, self.config.n_classes)))
        H = self.embed(window, training, rng, tape=tape)
        return classify_actors(H, window, self.params, tape=tape)

    def loss(self, window: WindowGraph, training: bool, rng, *, tape: Tape | None = None) -> Matrix:
        logits = self.forward(window, training, rng, tape=tape)
        return loss(logits, window.actor_labels, self.config.loss_mode, tape=tape)

    def scores(self, window: WindowGraph) -> np.ndarray:
        """Inference-mode class probabilities per actor row."""
        logits = self.forward(window, training=False).value
        if self.config.loss_mode == "multi_label":
            return 0.5 * (1.0 + np.tanh(0.5 * logits))
        if logits.size == 0:
            return logits
        exps = np.exp(logits - logits.max(axis=1, keepdims=True))
        return exps / exps.sum(axis=1, keepdims=True)


def count_params(config: StageConfig) -> int:
    """Exact number of learnable scalars of a model built from ``config``."""
    d_f, d_h, n_h = config.d_f, config.d_h, config.n_heads
    projection = config.projected_in * d_f + d_f
    if config.attention == "transformer":
        head = 3 * (d_f * d_h + d_h)
    else:
        head = d_f * d_h + d_h + 2 * d_h + 1
    layer = n_h * head + (n_h * d_h * d_f + d_f) + 2 * d_f
    classifier = d_f * config.n_classes + config.n_classes
    return projection + config.n_layers * layer + classifier


@dataclass(frozen=True)
class FlopReport:
    """Multiply-accumulate counts per term for one clip."""

    projection: int
    fc11: int
    fc12: int
    weighted_sum: int
    fc13: int
    classifier: int

    @property
    def macs(self) -> int:
        return (
            self.projection + self.fc11 + self.fc12 + self.weighted_sum + self.fc13
            + self.classifier
        )

    def flops(self, flops_per_mac: int = 2) -> int:
        return flops_per_mac * self.macs


def flop_breakdown(config: StageConfig, n_actors: int, n_objects: int) -> FlopReport:
    """Dominant matmul terms only; activations, softmax and norms are not counted."""
    if n_actors < 0 or n_objects < 0:
        raise ValueError("entity counts must be non-negative")
    d_f, d_h, n_h, n_l = config.d_f, config.d_h, config.n_heads, config.n_layers
    n = n_actors + n_objects
    projected = n_objects if config.projected_kind == "object" else n_actors
    if config.attention == "transformer":
        fc11 = 3 * n * d_f * d_h
        fc12 = n * n * d_h
    else:
        fc11 = n * d_f * d_h
        fc12 = n * n * 2 * d_h
    return FlopReport(
        projection=projected * config.projected_in * d_f,
        fc11=n_l * n_h * fc11,
        fc12=n_l * n_h * fc12,
        weighted_sum=n_l * n_h * n * n * d_h,
        fc13=n_l * n * n_h * d_h * d_f,
        classifier=n_actors * d_f * config.n_classes,
    )


def count_flops(
    config: StageConfig, n_actors: int, n_objects: int, flops_per_mac: int = 2
) -> int:
    """Inference cost of one clip in FLOPs; one multiply-accumulate is two operations."""
    return flop_breakdown(config, n_actors, n_objects).flops(flops_per_mac)


def save_checkpoint(
    path: str | Path, config: StageConfig, params: ParameterSet, **metadata
) -> Path:
    """Write an ``.npz`` archive; layout in docs/CHECKPOINT_FORMAT.md."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    matrices = params.matrices()
    arrays = {f"param_{i:05d}": m.value for i, m in enumerate(matrices)}
    with path.open("wb") as handle:
        np.savez(
            handle,
            format_version=np.array(CHECKPOINT_VERSION),
            config=np.array(config.model_dump_json()),
            metadata=np.array(json.dumps(metadata, sort_keys=True)),
            names=np.array([m.name for m in matrices]),
            **arrays,
        )
    logger.info("checkpoint saved", path=str(path), parameters=params.count())
    return path


def load_checkpoint(path: str | Path) -> tuple[StageConfig, ParameterSet, dict]:
    with np.load(Path(path), allow_pickle=False) as archive:
        version = int(archive["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigMismatchError(f"unsupported checkpoint version {version}")
        config = StageConfig.model_validate_json(str(archive["config"]))
        metadata = json.loads(str(archive["metadata"]))
        names = [str(n) for n in archive["names"]]
        values = {name: archive[f"param_{i:05d}"] for i, name in enumerate(names)}

    template = init_parameters(config, np.random.default_rng(0))
    expected = [m.name for m in template.matrices()]
    if names != expected:
        raise ConfigMismatchError("checkpoint parameter layout does not match its config")
    return config, template.load_values(values), metadata
