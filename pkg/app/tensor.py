"""Dense tensors with reverse-mode differentiation.

Values are held as float64 arrays, which doubles as the f64 accumulator the
persisted f32 data is promoted into. Every reduction runs in a fixed sequential
order, so a row's result never depends on how many rows were batched with it.
"""

import logging
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from app.errors import ContractError, DegenerateVectorError, ShapeError


logger = logging.getLogger(__name__)

EPS_NORM = 1e-12
_ROW_BLOCK = 4096

ElementwiseKind = Literal["add", "sub", "mul", "scale", "tanh", "relu"]
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def matmul_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """C[i, j] = sum_t A[i, t] * B[t, j], accumulated in ascending t."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    rows, inner = a.shape
    out = np.zeros((rows, b.shape[1]), dtype=np.float64)
    for start in range(0, rows, _ROW_BLOCK):
        stop = min(start + _ROW_BLOCK, rows)
        acc = out[start:stop]
        term = np.empty_like(acc)
        for t in range(inner):
            np.multiply.outer(a[start:stop, t], b[t], out=term)
            acc += term
    return out


def row_dot(matrix: np.ndarray, vector: np.ndarray) -> np.ndarray:
    """Dot product of every row with `vector`, f64 accumulation, ascending order."""
    vector = np.asarray(vector, dtype=np.float64)
    return matmul_kernel(matrix, vector.reshape(-1, 1))[:, 0]


def row_sq_norms(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    acc = np.zeros(matrix.shape[0], dtype=np.float64)
    for t in range(matrix.shape[1]):
        column = matrix[:, t]
        acc += column * column
    return acc


class Tensor:
    """A node of the computation graph. Leaves are created directly."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data: object,
        requires_grad: bool = False,
        *,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
        op: str = "leaf",
    ):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def as_tensor(value: "Tensor | np.ndarray | float") -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    needs_grad = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs_grad,
        _parents=parents if needs_grad else (),
        _backward=backward_fn if needs_grad else None,
        op=op,
    )


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
        "mul",
    )


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    mask = x.data > 0.0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def elementwise(kind: ElementwiseKind, *inputs: Tensor, factor: float | None = None) -> Tensor:
    if kind in {"add", "sub", "mul"}:
        if len(inputs) != 2:
            raise ContractError(f"{kind} takes two inputs, got {len(inputs)}")
        return {"add": add, "sub": sub, "mul": mul}[kind](*inputs)
    if len(inputs) != 1:
        raise ContractError(f"{kind} takes one input, got {len(inputs)}")
    if kind == "scale":
        if factor is None:
            raise ContractError("scale needs a factor")
        return scale(inputs[0], factor)
    if kind == "tanh":
        return tanh(inputs[0])
    if kind == "relu":
        return relu(inputs[0])
    raise ContractError(f"Unknown elementwise kind: {kind}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = matmul_kernel(a.data, b.data)
    return _result(
        out,
        (a, b),
        lambda g: (matmul_kernel(g, b.data.T), matmul_kernel(a.data.T, g)),
        "matmul",
    )


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _result(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,), "transpose")


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Adds a bias vector to every row of `x`."""
    if x.data.ndim != 2 or bias.data.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"bias_add: {x.shape} + {bias.shape}")
    return _result(
        x.data + bias.data,
        (x, bias),
        lambda g: (g, g.sum(axis=0)),
        "bias_add",
    )


def l2_normalize(v: Tensor) -> Tensor:
    """Unit-normalizes a vector, or every row of a matrix."""
    data = v.data
    rows = data.reshape(1, -1) if data.ndim == 1 else data
    if rows.ndim != 2:
        raise ShapeError(f"l2_normalize expects a vector or matrix, got {v.shape}")
    norms = np.sqrt(row_sq_norms(rows))
    if np.any(norms <= EPS_NORM):
        raise DegenerateVectorError(
            f"{int(np.sum(norms <= EPS_NORM))} vector(s) with norm <= {EPS_NORM:g}"
        )
    unit = rows / norms[:, None]

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        g_rows = g.reshape(unit.shape)
        along = np.sum(g_rows * unit, axis=1, keepdims=True)
        return (((g_rows - unit * along) / norms[:, None]).reshape(data.shape),)

    return _result(unit.reshape(data.shape), (v,), _backward, "l2_normalize")


def total(x: Tensor) -> Tensor:
    return _result(
        np.asarray(x.data.sum()),
        (x,),
        lambda g: (np.full(x.shape, float(g)),),
        "sum",
    )


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / max(x.data.size, 1))


def log_softmax_rows(x: Tensor) -> Tensor:
    """Row-wise log-softmax, stabilized by subtracting each row's max."""
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)
    return _result(
        out,
        (x,),
        lambda g: (g - probs * g.sum(axis=1, keepdims=True),),
        "log_softmax",
    )


def take_row(x: Tensor, index: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"take_row expects a matrix, got {x.shape}")

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return _result(x.data[index].copy(), (x,), _backward, "take_row")


def diagonal(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"diagonal expects a square matrix, got {x.shape}")
    return _result(np.diagonal(x.data).copy(), (x,), lambda g: (np.diag(g),), "diagonal")


def pairwise_margin(sims: Tensor, margin: float) -> Tensor:
    """out[i, j] = margin - sims[i, i] + sims[i, j] for j != i; 0 on the diagonal."""
    if sims.data.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise ShapeError(f"pairwise_margin expects a square matrix, got {sims.shape}")
    n = sims.shape[0]
    off = ~np.eye(n, dtype=bool)
    positive = np.diagonal(sims.data)[:, None]
    out = np.where(off, margin - positive + sims.data, 0.0)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        g_off = np.where(off, g, 0.0)
        grad = g_off.copy()
        grad[np.diag_indices(n)] -= g_off.sum(axis=1)
        return (grad,)

    return _result(out, (sims,), _backward, "pairwise_margin")


@dataclass
class Graph:
    """Nodes reachable from a root, in topological order (root last)."""

    nodes: list[Tensor]
    gradients: dict[Tensor, np.ndarray] = field(default_factory=dict)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
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
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(nodes=order)

    def backward(self) -> dict[Tensor, np.ndarray]:
        root = self.nodes[-1]
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        self.gradients = {root: np.ones_like(root.data)}
        for node in reversed(self.nodes):
            grad = self.gradients.get(node)
            if grad is None or node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=np.float64).reshape(parent.shape)
                if parent in self.gradients:
                    self.gradients[parent] = self.gradients[parent] + parent_grad
                else:
                    self.gradients[parent] = parent_grad
        return {
            node: grad
            for node, grad in self.gradients.items()
            if node.is_leaf and node.requires_grad
        }


def backward(root: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar `root`; leaves in `wrt` that are unreachable get zeros.

    Each leaf's `.grad` is overwritten with its gradient.
    """
    leaf_grads = Graph.trace(root).backward()
    if wrt is not None:
        for leaf in wrt:
            leaf_grads.setdefault(leaf, np.zeros_like(leaf.data))
    for leaf, grad in leaf_grads.items():
        leaf.grad = grad
    return leaf_grads


def grad_check(
    f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3, floor: float = 1e-8
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Each coordinate is scored as |analytic - central| / max(|analytic|, |central|, floor).
    """
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    analytic = backward(f(leaf), wrt=[leaf])[leaf]

    worst = 0.0
    for index in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[index] += h
        minus[index] -= h
        central = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2.0 * h)
        a = float(analytic[index])
        denom = max(abs(a), abs(central), floor)
        worst = max(worst, abs(a - central) / denom)
    return worst
