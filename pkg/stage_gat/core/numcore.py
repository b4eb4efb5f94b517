"""Dense float64 matrix kernel with tape-based reverse-mode differentiation.

Only the operations the STAGE module needs are provided. Every op takes an
optional ``tape``; when one is given and an input requires a gradient, the op
is recorded together with a closure mapping the output gradient to input
gradients. ``backward`` replays the tape in reverse recording order, which is
a valid topological order because ops are recorded as they execute.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import structlog

from stage_gat.core.errors import (
    DegenerateRowError,
    DimensionError,
    EmptyTapeError,
    NonFiniteError,
)

logger = structlog.get_logger("stage_gat.numcore")

LN_EPS = 1e-5

Gradients = dict[str, np.ndarray]
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Matrix:
    """Row-major 2-D float64 matrix; named matrices are trainable parameters."""

    __slots__ = ("value", "name", "requires_grad")

    def __init__(self, value, name: str | None = None, requires_grad: bool = False):
        array = np.asarray(value, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim > 2:
            raise DimensionError("matrix", array.shape)
        self.value = array
        self.name = name
        self.requires_grad = requires_grad

    @classmethod
    def parameter(cls, value, name: str) -> Matrix:
        return cls(np.array(value, dtype=np.float64), name=name, requires_grad=True)

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.shape != (1, 1):
            raise DimensionError("item", self.shape, (1, 1))
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Matrix{label}({self.rows}x{self.cols})"


@dataclass
class TapeNode:
    op: str
    scope: str
    inputs: tuple[Matrix, ...]
    output: Matrix
    backward: BackwardFn


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self._scopes: list[str] = []

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def current_scope(self) -> str:
        return "/".join(self._scopes)

    @contextmanager
    def scope(self, name: str) -> Iterator[Tape]:
        """Label ops recorded inside the block, e.g. ``gal1/head0``."""
        self._scopes.append(name)
        try:
            yield self
        finally:
            self._scopes.pop()

    def record(
        self, op: str, inputs: tuple[Matrix, ...], output: Matrix, backward: BackwardFn
    ) -> Matrix:
        output.requires_grad = True
        self.nodes.append(TapeNode(op, self.current_scope, inputs, output, backward))
        return output

    def find(self, op: str | None = None, scope: str | None = None) -> list[TapeNode]:
        return [
            node
            for node in self.nodes
            if (op is None or node.op == op) and (scope is None or node.scope == scope)
        ]


def _as_mask(mask, shape: tuple[int, int], op: str) -> np.ndarray:
    values = mask.value if isinstance(mask, Matrix) else np.asarray(mask)
    if values.shape != shape:
        raise DimensionError(op, shape, values.shape)
    return values != 0


def _emit(
    op: str,
    tape: Tape | None,
    inputs: tuple[Matrix, ...],
    value: np.ndarray,
    backward: BackwardFn,
) -> Matrix:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Matrix(value)
    if tape is not None and any(m.requires_grad for m in inputs):
        tape.record(op, inputs, out, backward)
    return out


def linear(x: Matrix, W: Matrix, b: Matrix | None = None, *, tape: Tape | None = None) -> Matrix:
    """out = x·W + b with b broadcast over rows."""
    if x.cols != W.rows:
        raise DimensionError("linear", x.shape, W.shape)
    if b is not None and b.shape != (1, W.cols):
        raise DimensionError("linear bias", W.shape, b.shape)

    xv, wv = x.value, W.value
    value = xv @ wv
    if b is not None:
        value = value + b.value

    if b is None:
        return _emit("linear", tape, (x, W), value, lambda g: (g @ wv.T, xv.T @ g))
    return _emit(
        "linear",
        tape,
        (x, W, b),
        value,
        lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0, keepdims=True)),
    )


def matmul(a: Matrix, b: Matrix, *, tape: Tape | None = None) -> Matrix:
    if a.cols != b.rows:
        raise DimensionError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit("matmul", tape, (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def matmul_transposed(a: Matrix, b: Matrix, *, tape: Tape | None = None) -> Matrix:
    """a·bᵀ, used for query/key logits."""
    if a.cols != b.cols:
        raise DimensionError("matmul_transposed", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit("matmul_transposed", tape, (a, b), av @ bv.T, lambda g: (g @ bv, g.T @ av))


def add(a: Matrix, b: Matrix, *, tape: Tape | None = None) -> Matrix:
    if a.shape != b.shape:
        raise DimensionError("add", a.shape, b.shape)
    return _emit("add", tape, (a, b), a.value + b.value, lambda g: (g, g))


def scale(x: Matrix, factor: float, *, tape: Tape | None = None) -> Matrix:
    return _emit("scale", tape, (x,), x.value * factor, lambda g: (g * factor,))


def hadamard(a: Matrix, b: Matrix, *, tape: Tape | None = None) -> Matrix:
    if a.shape != b.shape:
        raise DimensionError("hadamard", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit("hadamard", tape, (a, b), av * bv, lambda g: (g * bv, g * av))


def total(x: Matrix, *, tape: Tape | None = None) -> Matrix:
    """Sum of all entries as a 1x1 matrix."""
    shape = x.shape
    return _emit(
        "total", tape, (x,), np.array([[x.value.sum()]]), lambda g: (np.full(shape, g[0, 0]),)
    )


def leaky_relu(x: Matrix, slope: float = 0.2, *, tape: Tape | None = None) -> Matrix:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    xv = x.value
    derivative = np.where(xv > 0, 1.0, slope)
    return _emit("leaky_relu", tape, (x,), np.maximum(xv, slope * xv), lambda g: (g * derivative,))


def elu(x: Matrix, *, tape: Tape | None = None) -> Matrix:
    xv = x.value
    negative = np.minimum(xv, 0.0)
    value = np.where(xv > 0, xv, np.expm1(negative))
    derivative = np.where(xv > 0, 1.0, np.exp(negative))
    return _emit("elu", tape, (x,), value, lambda g: (g * derivative,))


def row_softmax(D: Matrix, mask, *, tape: Tape | None = None) -> Matrix:
    """Softmax over the unmasked entries of each row; masked entries are exactly 0."""
    keep = _as_mask(mask, D.shape, "row_softmax")
    empty = np.flatnonzero(~keep.any(axis=1))
    if empty.size:
        raise DegenerateRowError(int(empty[0]))

    logits = np.where(keep, D.value, -np.inf)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.where(keep, np.exp(shifted), 0.0)
    weights = exps / exps.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray):
        inner = (g * weights).sum(axis=1, keepdims=True)
        return (weights * (g - inner),)

    return _emit("row_softmax", tape, (D,), weights, backward)


def layer_norm(
    x: Matrix, gain: Matrix, bias: Matrix, eps: float = LN_EPS, *, tape: Tape | None = None
) -> Matrix:
    d = x.cols
    if d < 2:
        raise DimensionError("layer_norm", x.shape)
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise DimensionError("layer_norm", x.shape, gain.shape, bias.shape)

    xv = x.value
    centered = xv - xv.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std
    gv = gain.value

    def backward(g: np.ndarray):
        dxhat = g * gv
        dx = (inv_std / d) * (
            d * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _emit("layer_norm", tape, (x, gain, bias), xhat * gv + bias.value, backward)


def dropout(
    x: Matrix,
    keep: float,
    training: bool,
    rng: np.random.Generator | None,
    *,
    tape: Tape | None = None,
) -> Matrix:
    """Inverted dropout: kept entries are scaled by 1/keep at train time."""
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"dropout keep probability must lie in (0, 1], got {keep}")
    if not training or keep == 1.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    factor = (rng.random(x.shape) < keep) / keep
    return _emit("dropout", tape, (x,), x.value * factor, lambda g: (g * factor,))


def concat_cols(parts: Sequence[Matrix], *, tape: Tape | None = None) -> Matrix:
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError("concat_cols", *(p.shape for p in parts))
    bounds = np.cumsum([p.cols for p in parts])[:-1]
    return _emit(
        "concat_cols",
        tape,
        tuple(parts),
        np.hstack([p.value for p in parts]),
        lambda g: tuple(np.hsplit(g, bounds)),
    )


def stack_rows(parts: Sequence[Matrix], *, tape: Tape | None = None) -> Matrix:
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise DimensionError("stack_rows", *(p.shape for p in parts))
    bounds = np.cumsum([p.rows for p in parts])[:-1]
    return _emit(
        "stack_rows",
        tape,
        tuple(parts),
        np.vstack([p.value for p in parts]),
        lambda g: tuple(np.vsplit(g, bounds)),
    )


def take_rows(x: Matrix, index: Sequence[int] | np.ndarray, *, tape: Tape | None = None) -> Matrix:
    idx = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def backward(g: np.ndarray):
        grad = np.zeros(shape)
        np.add.at(grad, idx, g)
        return (grad,)

    return _emit("take_rows", tape, (x,), x.value[idx].reshape(len(idx), shape[1]), backward)


def pair_scores(h: Matrix, a: Matrix, bias: Matrix, *, tape: Tape | None = None) -> Matrix:
    """out[i, j] = a·(h_i ∥ h_j) + bias for every ordered pair.

    Evaluated as a split affine map, a[:d]·h_i + a[d:]·h_j, which equals the
    fully-connected scorer on the concatenation without materialising N²·2d.
    """
    d = h.cols
    if a.shape != (1, 2 * d) or bias.shape != (1, 1):
        raise DimensionError("pair_scores", h.shape, a.shape, bias.shape)
    hv = h.value
    left, right = a.value[0, :d], a.value[0, d:]
    value = (hv @ left)[:, None] + (hv @ right)[None, :] + bias.value[0, 0]

    def backward(g: np.ndarray):
        row_sums, col_sums = g.sum(axis=1), g.sum(axis=0)
        dh = np.outer(row_sums, left) + np.outer(col_sums, right)
        da = np.concatenate([hv.T @ row_sums, hv.T @ col_sums])[None, :]
        return dh, da, np.array([[g.sum()]])

    return _emit("pair_scores", tape, (h, a, bias), value, backward)


def sigmoid_cross_entropy(
    logits: Matrix, targets: np.ndarray, *, tape: Tape | None = None
) -> Matrix:
    """Mean over rows of the mean per-class binary cross-entropy with logits."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise DimensionError("sigmoid_cross_entropy", logits.shape, targets.shape)
    if logits.rows == 0:
        return Matrix(np.zeros((1, 1)))
    z = logits.value
    losses = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    probs = 0.5 * (1.0 + np.tanh(0.5 * z))
    count = z.size
    return _emit(
        "sigmoid_cross_entropy",
        tape,
        (logits,),
        np.array([[losses.mean()]]),
        lambda g: (g[0, 0] * (probs - targets) / count,),
    )


def softmax_cross_entropy(
    logits: Matrix, targets: Sequence[int] | np.ndarray, *, tape: Tape | None = None
) -> Matrix:
    """Mean over rows of -log softmax(logits)[target]."""
    idx = np.asarray(targets, dtype=np.int64).reshape(-1)
    if idx.shape[0] != logits.rows:
        raise DimensionError("softmax_cross_entropy", logits.shape, idx.shape)
    if logits.rows == 0:
        return Matrix(np.zeros((1, 1)))
    n_classes = logits.cols
    if idx.min() < 0 or idx.max() >= n_classes:
        bad = int(idx[(idx < 0) | (idx >= n_classes)][0])
        raise ValueError(f"label index {bad} out of range for {n_classes} classes")

    z = logits.value
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(idx))
    onehot = np.zeros_like(z)
    onehot[rows, idx] = 1.0
    n = len(idx)
    return _emit(
        "softmax_cross_entropy",
        tape,
        (logits,),
        np.array([[-log_probs[rows, idx].mean()]]),
        lambda g: (g[0, 0] * (np.exp(log_probs) - onehot) / n,),
    )


def backward(tape: Tape, loss: Matrix, params: Iterable[Matrix]) -> Gradients:
    """dLoss/dθ for every parameter; parameters the loss never touched get zeros."""
    if not tape.nodes:
        raise EmptyTapeError("backward called on an empty tape")
    if loss.shape != (1, 1):
        raise DimensionError("backward", loss.shape, (1, 1))

    pending: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        upstream = pending.pop(id(node.output), None)
        if upstream is None:
            continue
        for source, grad in zip(node.inputs, node.backward(upstream), strict=True):
            if grad is None or not source.requires_grad:
                continue
            key = id(source)
            pending[key] = pending[key] + grad if key in pending else grad

    grads: Gradients = {}
    for param in params:
        if param.name is None:
            raise ValueError("backward needs named parameters")
        if param.name in grads:
            raise ValueError(f"duplicate parameter name {param.name!r}")
        grads[param.name] = pending.get(id(param), np.zeros(param.shape))
    logger.debug("backward", ops=len(tape.nodes), parameters=len(grads))
    return grads


def finite_diff_grad(
    f: Callable[[Mapping[str, np.ndarray]], float],
    theta: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> Gradients:
    """Central differences (f(θ+step·e) − f(θ−step·e)) / (2·step) per coordinate."""
    if step <= 0:
        raise ValueError(f"finite difference step must be positive, got {step}")
    base = {name: np.array(value, dtype=np.float64) for name, value in theta.items()}

    def evaluate(values: Mapping[str, np.ndarray]) -> float:
        result = float(f(values))
        if not np.isfinite(result):
            raise NonFiniteError(f"objective returned {result}")
        return result

    grads: Gradients = {}
    for name, value in base.items():
        grad = np.zeros_like(value)
        flat = value.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + step
            upper = evaluate(base)
            flat[k] = original - step
            lower = evaluate(base)
            flat[k] = original
            grad.reshape(-1)[k] = (upper - lower) / (2.0 * step)
        grads[name] = grad
    return grads


def relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6, atol: float = 1e-8
) -> float:
    """Largest entrywise |a − n| / max(|a|, |n|, floor).

    Differences within ``atol`` count as zero; central differences of an exactly
    zero gradient carry rounding noise around 1e-11.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    gap = np.abs(a - n)
    gap = np.where(gap <= atol, 0.0, gap)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((gap / denom).max())
