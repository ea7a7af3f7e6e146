"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what the embedding blocks,
attention, classifier blend and the two training losses need. Every op
records a vector-Jacobian product closure; ``Tensor.backward`` walks the
graph once in reverse topological order and accumulates gradients on every
node, so leaves used as parameters can read ``.grad`` afterwards.

No broadcasting beyond scalar-times-array, no views, no in-place graph ops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NORM_FLOOR = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate (e.g. a vector with ~zero norm)."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass
class RowUpdate:
    """Sparse gradient: add ``rows`` into the listed rows of the parent.

    Row-selection ops (embedding-table lookups, per-label parameter rows)
    return this from their vjp so backprop scatter-adds into one shared
    buffer instead of materializing a dense zero matrix per node.
    """

    indices: np.ndarray
    rows: np.ndarray


class Tensor:
    """A float64 ndarray plus the bookkeeping needed for backprop.

    ``grad`` is ``None`` until ``backward`` reaches the node. Leaves are
    created with ``Tensor(data)``; results of ops carry their parents and a
    vjp closure mapping the output gradient to per-parent gradients.
    """

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None,
    ):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjp = vjp

    @staticmethod
    def leaf(data) -> "Tensor":
        """Create a leaf tensor, rejecting non-finite entries."""
        arr = _as_f64(data)
        if not np.all(np.isfinite(arr)):
            raise ValueError("leaf tensor contains non-finite entries")
        return Tensor(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of this node w.r.t. every ancestor.

        ``seed`` defaults to 1 for scalar outputs. Traversal is iterative,
        so graphs with hundreds of thousands of nodes are fine.
        """
        if seed is None:
            if self.data.ndim != 0:
                raise DimensionError("backward() without seed requires a scalar output")
            seed = np.ones((), dtype=np.float64)
        order = _toposort(self)
        self.grad = _as_f64(seed)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None:
                    continue
                if isinstance(g, RowUpdate):
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    np.add.at(parent.grad, g.indices, g.rows)
                elif parent.grad is None:
                    parent.grad = g.copy() if g.base is not None or g is node.grad else g
                else:
                    parent.grad = parent.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    # Operator sugar for the handful of natural cases.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return Tensor(a.data - b.data, (a, b), lambda g: (g, -g))


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors as one node; avoids deep add chains."""
    terms = tuple(terms)
    if not terms:
        raise DimensionError("add_n: empty term list")
    shape = terms[0].shape
    for t in terms:
        if t.shape != shape:
            raise DimensionError("add_n: shape mismatch among terms")
    total = terms[0].data.copy()
    for t in terms[1:]:
        total += t.data
    return Tensor(total, terms, lambda g: tuple(g for _ in terms))


def affine(t: Tensor, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """Elementwise ``scale * t + shift`` with float constants."""
    s = float(scale)
    return Tensor(s * t.data + float(shift), (t,), lambda g: (s * g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may be a 0-d scalar tensor."""
    if a.shape == b.shape:
        return Tensor(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if a.ndim == 0:
        return Tensor(a.data * b.data, (a, b), lambda g: (np.sum(g * b.data), g * a.data))
    if b.ndim == 0:
        return Tensor(a.data * b.data, (a, b), lambda g: (g * b.data, np.sum(g * a.data)))
    raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D/2-D, 1-D/2-D, 2-D/1-D and 1-D/1-D operands."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        return Tensor(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))
    if a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        return Tensor(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, np.outer(a.data, g)))
    if a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        return Tensor(a.data @ b.data, (a, b), lambda g: (np.outer(g, b.data), a.data.T @ g))
    if a.ndim == 1 and b.ndim == 1:
        return dot(a, b)
    raise DimensionError(f"matmul: unsupported ranks {a.ndim}/{b.ndim}")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: need equal-length vectors, got {a.shape}/{b.shape}")
    return Tensor(a.data @ b.data, (a, b), lambda g: (g * b.data, g * a.data))


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise DimensionError("transpose: 2-D only")
    return Tensor(t.data.T, (t,), lambda g: (g.T,))


def tsum(t: Tensor) -> Tensor:
    """Sum of all entries, as a scalar."""
    return Tensor(np.sum(t.data), (t,), lambda g: (np.broadcast_to(g, t.shape).astype(np.float64),))


def sum_rows(t: Tensor) -> Tensor:
    """Column sums of a 2-D tensor: the ``1ᵀX`` aggregation."""
    if t.ndim != 2:
        raise DimensionError("sum_rows: 2-D only")
    return Tensor(
        np.sum(t.data, axis=0),
        (t,),
        lambda g: (np.broadcast_to(g, t.shape).astype(np.float64),),
    )


def mean_rows(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise DimensionError("mean_rows: 2-D only")
    m = t.shape[0]
    return Tensor(
        np.mean(t.data, axis=0),
        (t,),
        lambda g: (np.broadcast_to(g / m, t.shape).astype(np.float64),),
    )


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a 2-D tensor."""
    rows = tuple(rows)
    if not rows:
        raise DimensionError("stack_rows: empty row list")
    width = rows[0].shape
    for r in rows:
        if r.ndim != 1 or r.shape != width:
            raise DimensionError("stack_rows: rows must be equal-length vectors")
    data = np.stack([r.data for r in rows])
    return Tensor(data, rows, lambda g: tuple(g[i] for i in range(len(rows))))


def gather_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds (duplicates ok)."""
    if table.ndim != 2:
        raise DimensionError("gather_rows: 2-D table required")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError("gather_rows: need a non-empty 1-D index list")
    if np.any(idx < 0) or np.any(idx >= table.shape[0]):
        raise DimensionError("gather_rows: index out of range")
    return Tensor(table.data[idx], (table,), lambda g: (RowUpdate(idx, g),))


def row(t: Tensor, i: int) -> Tensor:
    """Single row of a 2-D tensor, as a 1-D tensor."""
    if t.ndim != 2:
        raise DimensionError("row: 2-D only")
    if not 0 <= i < t.shape[0]:
        raise DimensionError("row: index out of range")
    idx = np.array([i], dtype=np.intp)
    return Tensor(t.data[i].copy(), (t,), lambda g: (RowUpdate(idx, g[None, :]),))


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != t.data.size:
        raise DimensionError(f"reshape: cannot view {t.shape} as {shape}")
    return Tensor(t.data.reshape(shape), (t,), lambda g: (g.reshape(t.shape),))


def concat(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1:
        raise DimensionError("concat: 1-D only")
    na = a.shape[0]
    return Tensor(np.concatenate([a.data, b.data]), (a, b), lambda g: (g[:na], g[na:]))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    return Tensor(np.where(mask, t.data, 0.0), (t,), lambda g: (g * mask,))


def l2_normalize(v: Tensor) -> Tensor:
    """``v / ‖v‖₂`` for a 1-D vector; errors below the 1e-12 norm floor.

    A near-zero norm indicates an upstream bug (a zero embedding), so this
    raises rather than clamping.
    """
    if v.ndim != 1:
        raise DimensionError("l2_normalize: 1-D only")
    norm = float(np.linalg.norm(v.data))
    if norm <= NORM_FLOOR:
        raise DegenerateInputError(f"l2_normalize: norm {norm:.3e} below floor")
    out = v.data / norm

    def vjp(g: np.ndarray):
        return ((g - out * (g @ out)) / norm,)

    return Tensor(out, (v,), vjp)


def row_softmax(m: Tensor, scale: float = 1.0) -> Tensor:
    """Row-wise softmax of ``scale * m`` with max-subtraction for stability."""
    if m.ndim != 2:
        raise DimensionError("row_softmax: 2-D only")
    s = float(scale)
    z = s * m.data
    z = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=1, keepdims=True)

    def vjp(g: np.ndarray):
        inner = np.sum(g * out, axis=1, keepdims=True)
        return (s * out * (g - inner),)

    return Tensor(out, (m,), vjp)


def pool_segments(d_native: int, d_out: int) -> list[tuple[int, int]]:
    """Contiguous index segments used by :func:`adaptive_max_pool`."""
    return [(i * d_native // d_out, (i + 1) * d_native // d_out) for i in range(d_out)]


def adaptive_max_pool(v: Tensor, d_out: int) -> Tensor:
    """Project a vector to ``d_out`` dims by max over contiguous segments.

    Segment ``i`` spans ``[⌊i·n/d_out⌋, ⌊(i+1)·n/d_out⌋)``; the subgradient
    flows to the (first) argmax element of each segment.
    """
    if v.ndim != 1:
        raise DimensionError("adaptive_max_pool: 1-D only")
    n = v.shape[0]
    if d_out < 1 or d_out > n:
        raise DimensionError(f"adaptive_max_pool: d_out={d_out} invalid for length {n}")
    if n % d_out == 0:
        # Equal segments: one vectorized argmax over a reshaped view.
        width = n // d_out
        argmaxes = np.argmax(v.data.reshape(d_out, width), axis=1)
        argmaxes += np.arange(d_out, dtype=np.intp) * width
    else:
        starts = np.array([i * n // d_out for i in range(d_out)], dtype=np.intp)
        ends = np.array([(i + 1) * n // d_out for i in range(d_out)], dtype=np.intp)
        argmaxes = np.array(
            [s + int(np.argmax(v.data[s:e])) for s, e in zip(starts, ends)],
            dtype=np.intp,
        )

    def vjp(g: np.ndarray):
        out = np.zeros_like(v.data)
        np.add.at(out, argmaxes, g)
        return (out,)

    return Tensor(v.data[argmaxes], (v,), vjp)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    """Result of comparing reverse-mode gradients to finite differences."""

    max_rel_err: float
    passed: bool
    worst_param: str
    worst_index: tuple[int, ...]

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max rel err {self.max_rel_err:.3e} "
            f"at {self.worst_param}{list(self.worst_index)}"
        )


def check_gradient(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    rel_floor: float = 1e-3,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from ``params`` on every call and return a
    scalar. Relative error uses a ``rel_floor`` denominator floor so that
    near-zero gradient entries are judged on an absolute scale.
    """
    for p in params.values():
        p.zero_grad()
    out = f()
    if out.ndim != 0:
        raise DimensionError("check_gradient: f must return a scalar")
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    worst = 0.0
    worst_param = ""
    worst_index: tuple[int, ...] = ()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError(f"check_gradient: parameter {name!r} is not contiguous")
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = float(f().data)
            flat[j] = orig - h
            down = float(f().data)
            flat[j] = orig
            fd = (up - down) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[j])
            rel = abs(a - fd) / max(abs(a), abs(fd), rel_floor)
            if rel > worst:
                worst = rel
                worst_param = name
                worst_index = np.unravel_index(j, p.data.shape)
    return GradCheckReport(
        max_rel_err=worst,
        passed=worst <= tol,
        worst_param=worst_param,
        worst_index=tuple(int(i) for i in worst_index),
    )


def finite_differences(
    f: Callable[[], Tensor], param: Tensor, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. one parameter."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    if not np.shares_memory(flat, param.data):
        raise ValueError("finite_differences: parameter is not contiguous")
    gflat = out.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = float(f().data)
        flat[j] = orig - h
        down = float(f().data)
        flat[j] = orig
        gflat[j] = (up - down) / (2.0 * h)
    return out
