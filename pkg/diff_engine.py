"""
Minimal reverse-mode differentiation over float64 numpy arrays.

A Tape is a Wengert list: every primitive appends its output node, and
`backward` walks the list in reverse, handing each node's adjoint to the
primitive's backward rule. The primitive set is exactly what the graph
engines and the deformation losses need; there is no broadcasting beyond it.

Leaves that arrive as long double keep that precision through every
primitive; `grad_check` relies on it for its finite differences.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
import hashlib
import logging
from pathlib import Path
import struct
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix

from errors import (
    ArgumentError,
    ContractError,
    FormatError,
    IsolatedVertexError,
    NeighborIndexError,
    ShapeError,
)

logger = logging.getLogger(__name__)

PARAM_MAGIC = b"WCPNET01"
GRAD_CHECK_EPS = 1e-5
RELATIVE_ERROR_FLOOR = 1e-8

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def as_working(values: object) -> np.ndarray:
    """float64 view of `values`, unless they already carry long double."""
    array = np.asarray(values)
    if array.dtype == np.longdouble:
        return array
    return array.astype(np.float64, copy=False)


class Tensor:
    """A node on a Tape: float64 (or long double) values, optional gradient slot, parent links."""

    __slots__ = ("values", "grad", "requires_grad", "parents", "backward_fn", "kind", "name")

    def __init__(
        self,
        values: np.ndarray,
        requires_grad: bool = False,
        parents: Sequence[Tensor] = (),
        backward_fn: Optional[BackwardFn] = None,
        kind: str = "leaf",
        name: str = "",
    ):
        self.values = as_working(values)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.kind = kind
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(kind={self.kind!r}, shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, values: np.ndarray, requires_grad: bool = False, name: str = "") -> Tensor:
        node = Tensor(np.array(as_working(values)), requires_grad=requires_grad, name=name)
        self.nodes.append(node)
        return node

    def constant(self, values: np.ndarray) -> Tensor:
        return self.leaf(values, requires_grad=False)

    def record(
        self, kind: str, values: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn
    ) -> Tensor:
        needs_grad = any(parent.requires_grad for parent in parents)
        node = Tensor(
            values,
            requires_grad=needs_grad,
            parents=parents,
            backward_fn=backward_fn if needs_grad else None,
            kind=kind,
        )
        self.nodes.append(node)
        return node


def _require_rank(x: Tensor, rank: int, kind: str) -> None:
    if x.values.ndim != rank:
        raise ShapeError(f"{kind}: expected a rank-{rank} input, got shape {x.shape}")


# --- primitives -------------------------------------------------------------


def affine(tape: Tape, x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ W + b with W of shape (in, out)."""
    _require_rank(x, 2, "affine")
    _require_rank(weight, 2, "affine")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: input width {x.shape[1]} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.values @ weight.values
    if bias is not None:
        out = out + bias.values

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grads = [g @ weight.values.T, x.values.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return tape.record("affine", out, parents, backward)


def relu(tape: Tape, x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    active = x.values > 0
    return tape.record("relu", np.where(active, x.values, 0.0), (x,), lambda g: (g * active,))


def concat(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation of two row-aligned tensors."""
    _require_rank(a, 2, "concat")
    _require_rank(b, 2, "concat")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat: leading dims differ ({a.shape[0]} vs {b.shape[0]})")
    split = a.shape[1]
    return tape.record(
        "concat",
        np.concatenate([a.values, b.values], axis=1),
        (a, b),
        lambda g: (g[:, :split], g[:, split:]),
    )


def neighbor_mean_matrix(offsets: np.ndarray, indices: np.ndarray, columns: int) -> csr_matrix:
    """Sparse M with (M x)_i = mean over the CSR neighbor list of row i."""
    offsets = np.asarray(offsets, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    if offsets.ndim != 1 or offsets.size < 1 or offsets[0] != 0 or offsets[-1] != indices.size:
        raise ShapeError("Neighbor offsets must start at 0 and end at the index count.")
    if indices.size and (indices.min() < 0 or indices.max() >= columns):
        bad = int(indices[(indices < 0) | (indices >= columns)][0])
        raise NeighborIndexError(f"Neighbor index {bad} outside 0..{columns - 1}")
    counts = np.diff(offsets)
    if np.any(counts <= 0):
        raise IsolatedVertexError(f"Vertex {int(np.flatnonzero(counts <= 0)[0])} has no neighbors")
    weights = np.repeat(1.0 / counts, counts)
    return csr_matrix((weights, indices, offsets), shape=(offsets.size - 1, columns))


def _row_means(mean: csr_matrix, x: np.ndarray) -> np.ndarray:
    if x.dtype == np.float64:
        return np.asarray(mean @ x)
    # long double stays off the sparse kernels
    rows = np.repeat(np.arange(mean.shape[0]), np.diff(mean.indptr))
    out = np.zeros((mean.shape[0], x.shape[1]), dtype=x.dtype)
    np.add.at(out, rows, x[mean.indices] * mean.data.astype(x.dtype)[:, None])
    return out


def gather_mean(
    tape: Tape,
    x: Tensor,
    offsets: np.ndarray,
    indices: np.ndarray,
    matrix: Optional[csr_matrix] = None,
) -> Tensor:
    """Row i of the output is the mean of x over the neighbors of i."""
    _require_rank(x, 2, "gather_mean")
    mean = matrix if matrix is not None else neighbor_mean_matrix(offsets, indices, x.shape[0])
    if mean.shape[1] != x.shape[0]:
        raise ShapeError(f"gather_mean: matrix expects {mean.shape[1]} rows, got {x.shape[0]}")
    return tape.record(
        "gather_mean", _row_means(mean, x.values), (x,), lambda g: (np.asarray(mean.T @ g),)
    )


def add(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return tape.record("add", a.values + b.values, (a, b), lambda g: (g, g))


def sub(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes differ {a.shape} vs {b.shape}")
    return tape.record("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def mul_scalar(tape: Tape, x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return tape.record("mul_scalar", x.values * factor, (x,), lambda g: (g * factor,))


def scale_shift(tape: Tape, x: Tensor, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """Fixed per-column affine map x * scale + shift (constants, not parameters)."""
    _require_rank(x, 2, "scale_shift")
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    if scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(f"scale_shift: constants must have shape ({x.shape[1]},)")
    return tape.record("scale_shift", x.values * scale + shift, (x,), lambda g: (g * scale,))


def center_rows(tape: Tape, x: Tensor) -> Tensor:
    """Subtract the column means."""
    _require_rank(x, 2, "center_rows")
    return tape.record(
        "center_rows",
        x.values - x.values.mean(axis=0),
        (x,),
        lambda g: (g - g.mean(axis=0),),
    )


def gather_rows(tape: Tape, x: Tensor, rows: np.ndarray) -> Tensor:
    _require_rank(x, 2, "gather_rows")
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= x.shape[0]):
        raise NeighborIndexError(f"gather_rows: index outside 0..{x.shape[0] - 1}")

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        out = np.zeros_like(x.values)
        np.add.at(out, rows, g)
        return (out,)

    return tape.record("gather_rows", x.values[rows], (x,), backward)


def mean_sq(tape: Tape, x: Tensor) -> Tensor:
    """(1/n) * sum of squared row norms: a scalar."""
    _require_rank(x, 2, "mean_sq")
    n = x.shape[0]
    if n == 0:
        raise ShapeError("mean_sq: empty input")
    return tape.record(
        "mean_sq",
        np.array(np.sum(x.values**2) / n),
        (x,),
        lambda g: (2.0 * float(g) * x.values / n,),
    )


def row_norm_sum(tape: Tape, x: Tensor) -> Tensor:
    """Sum of row Euclidean norms; zero-norm rows get a zero subgradient."""
    _require_rank(x, 2, "row_norm_sum")
    norms = np.linalg.norm(x.values, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = np.where(norms[:, None] > 0, x.values / safe[:, None], 0.0)
    return tape.record("row_norm_sum", np.array(norms.sum()), (x,), lambda g: (float(g) * unit,))


def total(tape: Tape, x: Tensor) -> Tensor:
    return tape.record("sum", np.array(x.values.sum()), (x,), lambda g: (np.full_like(x.values, float(g)),))


def pointwise_field(
    tape: Tape,
    x: Tensor,
    field: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
) -> Tensor:
    """Row-wise map y_i = field(x_i) with jacobian(x)[i, a, b] = dy_ia / dx_ib."""
    _require_rank(x, 2, "pointwise_field")
    out = as_working(field(x.values))
    if out.shape[0] != x.shape[0]:
        raise ShapeError("pointwise_field: field must keep one row per input row")
    jac = np.asarray(jacobian(x.values), dtype=np.float64)
    if jac.shape != (x.shape[0], out.shape[1], x.shape[1]):
        raise ShapeError(f"pointwise_field: jacobian shape {jac.shape} does not conform")
    return tape.record("pointwise_field", out, (x,), lambda g: (np.einsum("nab,na->nb", jac, g),))


OPS: dict[str, Callable[..., Tensor]] = {
    "affine": affine,
    "relu": relu,
    "concat": concat,
    "gather_mean": gather_mean,
    "add": add,
    "sub": sub,
    "mul_scalar": mul_scalar,
    "scale_shift": scale_shift,
    "center_rows": center_rows,
    "gather_rows": gather_rows,
    "mean_sq": mean_sq,
    "row_norm_sum": row_norm_sum,
    "sum": total,
    "pointwise_field": pointwise_field,
}


def forward_op(tape: Tape, kind: str, *inputs: Tensor, **params: object) -> Tensor:
    """Run primitive `kind` on `inputs` and record it on `tape`."""
    try:
        op = OPS[kind]
    except KeyError:
        raise ArgumentError(f"Unknown op kind '{kind}'. Known: {', '.join(sorted(OPS))}") from None
    return op(tape, *inputs, **params)


# --- parameters --------------------------------------------------------------


class ParamSet:
    """
    Ordered, immutable set of named float64 parameter arrays.

    `frozen` marks a set whose tensors must not accumulate gradients
    (the predictor during compensator training).
    """

    def __init__(self, tensors: Mapping[str, np.ndarray], frozen: bool = False):
        self._tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, values in tensors.items():
            array = np.array(values, dtype=np.float64)
            if not np.all(np.isfinite(array)):
                raise ArgumentError(f"Parameter '{name}' contains non-finite values.")
            array.setflags(write=False)
            self._tensors[name] = array
        self.frozen = frozen

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    @property
    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._tensors.items())

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self._tensors.values()))

    def flat(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([v.reshape(-1) for v in self._tensors.values()])

    def with_flat(self, vector: np.ndarray) -> ParamSet:
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.size != self.size:
            raise ShapeError(f"Flat vector has {vector.size} values, ParamSet needs {self.size}")
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        cursor = 0
        for name, values in self._tensors.items():
            out[name] = vector[cursor : cursor + values.size].reshape(values.shape)
            cursor += values.size
        return ParamSet(out, frozen=self.frozen)

    def updated(self, arrays: Mapping[str, np.ndarray]) -> ParamSet:
        merged = OrderedDict((name, arrays.get(name, values)) for name, values in self._tensors.items())
        return ParamSet(merged, frozen=self.frozen)

    def freeze(self) -> ParamSet:
        return ParamSet(self._tensors, frozen=True)

    def thaw(self) -> ParamSet:
        return ParamSet(self._tensors, frozen=False)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, values in self._tensors.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.asarray(values.shape, dtype="<u4").tobytes())
            digest.update(values.astype("<f8").tobytes())
        return digest.hexdigest()

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Register every parameter as a leaf on `tape`; frozen sets get no gradient."""
        return {
            name: tape.leaf(values, requires_grad=not self.frozen, name=name)
            for name, values in self._tensors.items()
        }

    def zeros_like(self) -> ParamSet:
        return ParamSet(OrderedDict((n, np.zeros_like(v)) for n, v in self._tensors.items()))

    def to_bytes(self) -> bytes:
        chunks = [PARAM_MAGIC, struct.pack("<I", len(self._tensors))]
        for name, values in self._tensors.items():
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<I", values.ndim))
            chunks.append(struct.pack(f"<{values.ndim}I", *values.shape))
            chunks.append(values.astype("<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> ParamSet:
        if blob[:8] != PARAM_MAGIC:
            raise FormatError("Parameter blob does not start with WCPNET01")
        try:
            cursor = 8
            (count,) = struct.unpack_from("<I", blob, cursor)
            cursor += 4
            tensors: OrderedDict[str, np.ndarray] = OrderedDict()
            for _ in range(count):
                (name_len,) = struct.unpack_from("<I", blob, cursor)
                cursor += 4
                name = blob[cursor : cursor + name_len].decode("utf-8")
                cursor += name_len
                (rank,) = struct.unpack_from("<I", blob, cursor)
                cursor += 4
                dims = struct.unpack_from(f"<{rank}I", blob, cursor)
                cursor += 4 * rank
                size = int(np.prod(dims)) if rank else 1
                values = np.frombuffer(blob, dtype="<f8", count=size, offset=cursor)
                cursor += 8 * size
                tensors[name] = values.reshape(dims).astype(np.float64)
        except (struct.error, ValueError, UnicodeDecodeError) as e:
            raise FormatError(f"Truncated or corrupt parameter blob: {e}") from e
        if cursor != len(blob):
            raise FormatError(f"Parameter blob has {len(blob) - cursor} trailing bytes")
        return cls(tensors)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> ParamSet:
        return cls.from_bytes(Path(path).read_bytes())


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# --- gradients ---------------------------------------------------------------


def backward(
    tape: Tape, loss: Tensor, bound: Optional[Mapping[str, Tensor]] = None
) -> Optional[dict[str, np.ndarray]]:
    """
    Propagate d(loss)/d(node) through the tape in reverse recording order.

    Returns parameter gradients keyed like `bound` (zeros for parameters the
    loss does not reach) when `bound` is given.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(node is loss for node in tape.nodes):
        raise ContractError("Loss tensor was not recorded on this tape.")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        for parent, grad in zip(node.parents, node.backward_fn(node.grad)):
            if grad is None or not parent.requires_grad:
                continue
            grad = np.asarray(grad, dtype=np.float64).reshape(parent.shape)
            parent.grad = grad if parent.grad is None else parent.grad + grad
    if bound is None:
        return None
    return {
        name: (tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.values))
        for name, tensor in bound.items()
    }


@dataclass(frozen=True)
class GradCheckResult:
    max_relative_error: float
    worst_parameter: str
    worst_index: int
    checked: int


def grad_check_detail(
    f: Callable[[Tape, Mapping[str, Tensor]], Tensor],
    params: ParamSet,
    eps: float = GRAD_CHECK_EPS,
) -> GradCheckResult:
    """
    Central-difference check of every parameter of `f` (a scalar computation).

    Analytic gradients come from a float64 tape. The perturbed evaluations
    run in long double so that rounding in `f` stays well below the
    difference quotient; where long double is float64 the check loses
    that margin.
    """
    if not eps > 0:
        raise ArgumentError(f"eps must be positive, got {eps}")
    live = params.thaw()
    tape = Tape()
    bound = live.bind(tape)
    grads = backward(tape, f(tape, bound), bound)
    assert grads is not None
    analytic = np.concatenate([grads[name].reshape(-1) for name in live.names])
    if live.size == 0:
        return GradCheckResult(0.0, "", -1, 0)

    layout = [(name, live[name].shape, live[name].size) for name in live.names]

    def evaluate(vector: np.ndarray) -> np.longdouble:
        shifted = Tape()
        leaves: dict[str, Tensor] = {}
        cursor = 0
        for name, shape, size in layout:
            leaves[name] = shifted.leaf(vector[cursor : cursor + size].reshape(shape), name=name)
            cursor += size
        return np.longdouble(f(shifted, leaves).values.reshape(-1)[0])

    base = live.flat().astype(np.longdouble)
    numeric = np.empty(base.size)
    for k in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[k] += eps
        minus[k] -= eps
        numeric[k] = float((evaluate(plus) - evaluate(minus)) / (plus[k] - minus[k]))

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), RELATIVE_ERROR_FLOOR)
    relative = np.abs(analytic - numeric) / scale
    worst = int(np.argmax(relative))
    owner, cursor = "", 0
    for name in live.names:
        if worst < cursor + live[name].size:
            owner = name
            break
        cursor += live[name].size
    logger.debug(f"Gradient check over {base.size} parameters: worst {relative[worst]:.3e} at {owner}")
    return GradCheckResult(float(relative[worst]), owner, worst - cursor, int(base.size))


def grad_check(
    f: Callable[[Tape, Mapping[str, Tensor]], Tensor],
    params: ParamSet,
    eps: float = GRAD_CHECK_EPS,
) -> float:
    """Maximum relative error |a - n| / max(|a|, |n|, 1e-8) over all parameters."""
    return grad_check_detail(f, params, eps).max_relative_error
