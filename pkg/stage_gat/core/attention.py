"""Graph-attention heads, layers and stacks, plus the dot-product attention variant."""

from __future__ import annotations

import math
from collections.abc import Sequence
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from stage_gat.core import numcore as nc
from stage_gat.core.errors import DimensionError
from stage_gat.core.graph import WindowGraph
from stage_gat.core.numcore import Matrix, Tape


@dataclass
class HeadParams:
    """Feature projection h = X·Wh + bh and pair scorer a·(h_i ∥ h_j) + ba."""

    Wh: Matrix
    bh: Matrix
    a: Matrix
    ba: Matrix

    @property
    def width(self) -> int:
        return self.Wh.cols

    def matrices(self) -> list[Matrix]:
        return [self.Wh, self.bh, self.a, self.ba]


@dataclass
class TransformerHeadParams:
    """Query, key and value projections of a dot-product attention head."""

    Wq: Matrix
    bq: Matrix
    Wk: Matrix
    bk: Matrix
    Wv: Matrix
    bv: Matrix

    @property
    def width(self) -> int:
        return self.Wv.cols

    def matrices(self) -> list[Matrix]:
        return [self.Wq, self.bq, self.Wk, self.bk, self.Wv, self.bv]


AnyHeadParams = HeadParams | TransformerHeadParams


@dataclass
class LayerParams:
    heads: list[AnyHeadParams]
    Wo: Matrix
    bo: Matrix
    ln_gain: Matrix
    ln_bias: Matrix

    def matrices(self) -> list[Matrix]:
        out = [m for head in self.heads for m in head.matrices()]
        return out + [self.Wo, self.bo, self.ln_gain, self.ln_bias]


def transformer_attention(
    X: Matrix, p: TransformerHeadParams, mask, *, tape: Tape | None = None
) -> Matrix:
    """softmax(Q·Kᵀ / sqrt(d_k)) · V over the unmasked entries of each row."""
    q = nc.linear(X, p.Wq, p.bq, tape=tape)
    k = nc.linear(X, p.Wk, p.bk, tape=tape)
    v = nc.linear(X, p.Wv, p.bv, tape=tape)
    logits = nc.scale(nc.matmul_transposed(q, k, tape=tape), 1.0 / math.sqrt(q.cols), tape=tape)
    weights = nc.row_softmax(logits, mask, tape=tape)
    return nc.matmul(weights, v, tape=tape)


def head_forward(
    X: Matrix,
    A: Matrix,
    mask,
    p: AnyHeadParams,
    training: bool,
    rng: np.random.Generator | None,
    *,
    slope: float = 0.2,
    keep: float = 0.5,
    tape: Tape | None = None,
) -> Matrix:
    """One attention head: proximity-conditioned masked attention, ELU, dropout."""
    if isinstance(p, TransformerHeadParams):
        mixed = transformer_attention(X, p, mask, tape=tape)
    else:
        if A.shape != (X.rows, X.rows):
            raise DimensionError("head_forward", X.shape, A.shape)
        h = nc.linear(X, p.Wh, p.bh, tape=tape)
        scores = nc.leaky_relu(nc.pair_scores(h, p.a, p.ba, tape=tape), slope, tape=tape)
        conditioned = nc.hadamard(A, scores, tape=tape)
        weights = nc.row_softmax(conditioned, mask, tape=tape)
        mixed = nc.matmul(weights, h, tape=tape)
    return nc.dropout(nc.elu(mixed, tape=tape), keep, training, rng, tape=tape)


def _scoped(tape: Tape | None, name: str):
    return tape.scope(name) if tape is not None else nullcontext()


def layer_forward(
    X: Matrix,
    A: Matrix,
    mask,
    p: LayerParams,
    training: bool,
    rng: np.random.Generator | None,
    *,
    slope: float = 0.2,
    keep: float = 0.5,
    eps: float = nc.LN_EPS,
    tape: Tape | None = None,
) -> Matrix:
    """layer_norm(X + concat(heads)·Wo + bo)."""
    outputs = []
    for index, head in enumerate(p.heads):
        with _scoped(tape, f"head{index}"):
            outputs.append(
                head_forward(X, A, mask, head, training, rng, slope=slope, keep=keep, tape=tape)
            )
    merged = nc.concat_cols(outputs, tape=tape) if len(outputs) > 1 else outputs[0]
    branch = nc.linear(merged, p.Wo, p.bo, tape=tape)
    if branch.shape != X.shape:
        raise DimensionError("layer_forward residual", X.shape, branch.shape)
    return nc.layer_norm(nc.add(X, branch, tape=tape), p.ln_gain, p.ln_bias, eps, tape=tape)


def stage_forward(
    X: Matrix,
    window: WindowGraph,
    layers: Sequence[LayerParams],
    training: bool,
    rng: np.random.Generator | None,
    *,
    slope: float = 0.2,
    keep: float = 0.5,
    eps: float = nc.LN_EPS,
    tape: Tape | None = None,
) -> Matrix:
    """Stacked layers sharing the window's adjacency and mask."""
    if not layers:
        raise ValueError("stage_forward needs at least one layer")
    mask = window.mask
    out = X
    for index, layer in enumerate(layers):
        with _scoped(tape, f"gal{index + 1}"):
            out = layer_forward(
                out,
                window.adjacency,
                mask,
                layer,
                training,
                rng,
                slope=slope,
                keep=keep,
                eps=eps,
                tape=tape,
            )
    return out


def receptive_field(n_layers: int, rf_direct: int = 3) -> int:
    """Clips that can influence a clip's output after ``n_layers`` layers."""
    if n_layers < 1:
        raise ValueError(f"n_layers must be >= 1, got {n_layers}")
    return rf_direct + (rf_direct - 1) * (n_layers - 1)
