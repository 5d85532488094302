"""Dense vectors and a small reverse-mode differentiation engine.

Expressions are immutable trees (or DAGs) of vector-valued nodes.  A scalar
is a vector of length one.  Shapes never broadcast: every node checks its
argument dimensions when it is built.

    >>> x = Variable(2)
    >>> evaluate(SumSquares(x), [3.0, 4.0])
    25.0
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NumericOverflowError",
    "as_vector",
    "as_matrix",
    "Expr",
    "Variable",
    "Constant",
    "Affine",
    "Tanh",
    "Relu",
    "SumSquares",
    "Sum",
    "Select",
    "Max",
    "Add",
    "Scale",
    "Program",
    "Tape",
    "forward",
    "evaluate",
    "gradient",
    "value_and_gradient",
    "finite_difference_gradient",
]


class DimensionError(ValueError):
    """Raised when vector or matrix shapes do not line up."""


class NumericOverflowError(ArithmeticError):
    """Raised when a forward or backward pass produces NaN or Inf."""


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Copy ``x`` into a finite, non-empty, 1-D float64 array."""
    arr = np.array(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionError(f"{name} must have positive length")
    # one reduction catches NaN/Inf; only an overflowing sum needs the elementwise test
    if not math.isfinite(float(arr.sum())) and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Copy ``a`` into a finite 2-D float64 array with positive dimensions."""
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Expr:
    """Base class of expression nodes.

    Subclasses set ``dim`` and ``args`` in ``__init__`` and implement
    ``_forward`` (argument values -> value) and ``_backward`` (argument
    values, own value, own adjoint -> argument adjoints).
    """

    __slots__ = ("dim", "args")

    dim: int
    args: tuple["Expr", ...]

    def _forward(self, vals: Sequence[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def _backward(self, vals, out, adj) -> tuple[np.ndarray, ...]:
        raise NotImplementedError

    def __setattr__(self, key, value):
        if hasattr(self, key):
            raise AttributeError(f"{type(self).__name__} is immutable")
        object.__setattr__(self, key, value)

    def __add__(self, other: "Expr") -> "Add":
        return Add(self, other)

    def __sub__(self, other: "Expr") -> "Add":
        return Add(self, Scale(other, -1.0))

    def __mul__(self, factor: float) -> "Scale":
        return Scale(self, factor)

    __rmul__ = __mul__

    def __neg__(self) -> "Scale":
        return Scale(self, -1.0)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim})"


class Variable(Expr):
    """Graph input.  ``slot`` is the position of its value in the input list."""

    __slots__ = ("slot",)

    def __init__(self, dim: int, slot: int = 0):
        if dim <= 0:
            raise DimensionError("variable dimension must be positive")
        self.dim = int(dim)
        self.slot = int(slot)
        self.args = ()


class Constant(Expr):
    __slots__ = ("value",)

    def __init__(self, value):
        self.value = _frozen(as_vector(value, "constant"))
        self.dim = self.value.size
        self.args = ()

    def _forward(self, vals):
        return self.value

    def _backward(self, vals, out, adj):
        return ()


class Affine(Expr):
    """``weight @ arg + bias``."""

    __slots__ = ("weight", "bias")

    def __init__(self, weight, bias, arg: Expr):
        w = as_matrix(weight, "weight")
        b = as_vector(bias, "bias")
        if w.shape[1] != arg.dim:
            raise DimensionError(f"weight has {w.shape[1]} columns, argument has dim {arg.dim}")
        if b.size != w.shape[0]:
            raise DimensionError(f"bias has length {b.size}, weight has {w.shape[0]} rows")
        self.weight = _frozen(w)
        self.bias = _frozen(b)
        self.dim = w.shape[0]
        self.args = (arg,)

    def _forward(self, vals):
        return self.weight @ vals[0] + self.bias

    def _backward(self, vals, out, adj):
        return (self.weight.T @ adj,)


class Tanh(Expr):
    __slots__ = ()

    def __init__(self, arg: Expr):
        self.dim = arg.dim
        self.args = (arg,)

    def _forward(self, vals):
        return np.tanh(vals[0])

    def _backward(self, vals, out, adj):
        return (adj * (1.0 - out * out),)


class Relu(Expr):
    """``max(0, x)`` elementwise; the kink takes the zero branch's slope."""

    __slots__ = ()

    def __init__(self, arg: Expr):
        self.dim = arg.dim
        self.args = (arg,)

    def _forward(self, vals):
        return np.maximum(vals[0], 0.0)

    def _backward(self, vals, out, adj):
        return (np.where(vals[0] > 0.0, adj, 0.0),)


class SumSquares(Expr):
    __slots__ = ()

    def __init__(self, arg: Expr):
        self.dim = 1
        self.args = (arg,)

    def _forward(self, vals):
        v = vals[0]
        return np.array([v @ v])

    def _backward(self, vals, out, adj):
        return (2.0 * adj[0] * vals[0],)


class Sum(Expr):
    __slots__ = ()

    def __init__(self, arg: Expr):
        self.dim = 1
        self.args = (arg,)

    def _forward(self, vals):
        return np.array([vals[0].sum()])

    def _backward(self, vals, out, adj):
        return (np.full(self.args[0].dim, adj[0]),)


class Select(Expr):
    """Pick components ``indices`` (in the given order) out of ``arg``."""

    __slots__ = ("indices",)

    def __init__(self, arg: Expr, indices: Sequence[int]):
        idx = np.asarray(indices, dtype=np.intp)
        if idx.ndim != 1 or idx.size == 0:
            raise DimensionError("indices must be a non-empty 1-D sequence")
        if idx.min() < 0 or idx.max() >= arg.dim:
            raise DimensionError(f"indices out of range for dim {arg.dim}")
        if np.unique(idx).size != idx.size:
            raise DimensionError("indices must be distinct")
        self.indices = _frozen(idx)
        self.dim = idx.size
        self.args = (arg,)

    def _forward(self, vals):
        return vals[0][self.indices]

    def _backward(self, vals, out, adj):
        g = np.zeros(self.args[0].dim)
        g[self.indices] = adj
        return (g,)


class Max(Expr):
    """Largest component; ties route the gradient to the first maximiser."""

    __slots__ = ()

    def __init__(self, arg: Expr):
        self.dim = 1
        self.args = (arg,)

    def _forward(self, vals):
        return np.array([vals[0].max()])

    def _backward(self, vals, out, adj):
        g = np.zeros(self.args[0].dim)
        g[int(np.argmax(vals[0]))] = adj[0]
        return (g,)


class Add(Expr):
    __slots__ = ()

    def __init__(self, a: Expr, b: Expr):
        if a.dim != b.dim:
            raise DimensionError(f"cannot add dims {a.dim} and {b.dim}")
        self.dim = a.dim
        self.args = (a, b)

    def _forward(self, vals):
        return vals[0] + vals[1]

    def _backward(self, vals, out, adj):
        return (adj, adj)


class Scale(Expr):
    __slots__ = ("factor",)

    def __init__(self, arg: Expr, factor: float):
        factor = float(factor)
        if not np.isfinite(factor):
            raise ValueError("scale factor must be finite")
        self.factor = factor
        self.dim = arg.dim
        self.args = (arg,)

    def _forward(self, vals):
        return self.factor * vals[0]

    def _backward(self, vals, out, adj):
        return (self.factor * adj,)


def _topological(root: Expr) -> list[Expr]:
    order: list[Expr] = []
    seen: set[int] = set()
    stack: list[tuple[Expr, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for arg in reversed(node.args):
            if id(arg) not in seen:
                stack.append((arg, False))
    return order


class Program:
    """Flattened evaluation order of an expression, built once and reused.

    Node values live in a list indexed by position in ``nodes``; ``arg_index``
    gives, for each node, the positions of its arguments.
    """

    def __init__(self, expr: Expr):
        self.expr = expr
        self.nodes = _topological(expr)
        pos = {id(n): k for k, n in enumerate(self.nodes)}
        self.arg_index = [tuple(pos[id(a)] for a in n.args) for n in self.nodes]
        self.variables = {}
        for k, n in enumerate(self.nodes):
            if isinstance(n, Variable):
                self.variables.setdefault(n.slot, []).append(k)

    def value_and_gradient(self, *inputs, wrt: int = 0) -> tuple[float, np.ndarray]:
        tape = Tape(self, inputs)
        return float(tape.value[0]), tape.backward(wrt)


def _finite(v: np.ndarray) -> bool:
    # NaN and Inf survive summation, so one reduction checks the whole vector
    return math.isfinite(float(v.sum()))


# Inputs are checked to be finite, so any NaN or Inf has to come from an
# overflowing or invalid operation; numpy reports those at the source.
_TRAP = {"over": "raise", "invalid": "raise"}


class Tape:
    """One forward pass of an expression at fixed inputs, ready for backward passes.

    A tape belongs to the thread that built it; the expression (or compiled
    :class:`Program`) it was built from can be shared freely.
    """

    def __init__(self, expr: "Expr | Program", inputs: Sequence):
        prog = expr if isinstance(expr, Program) else Program(expr)
        self.program = prog
        self.expr = prog.expr
        values: list = [None] * len(prog.nodes)
        try:
            with np.errstate(**_TRAP):
                for k, (node, idx) in enumerate(zip(prog.nodes, prog.arg_index)):
                    if isinstance(node, Variable):
                        values[k] = self._input(node, inputs)
                    else:
                        values[k] = node._forward([values[j] for j in idx])
        except FloatingPointError as exc:
            raise NumericOverflowError(f"non-finite value in forward pass ({exc})") from exc
        self.values = values

    @staticmethod
    def _input(node: "Variable", inputs: Sequence) -> np.ndarray:
        if node.slot >= len(inputs):
            raise DimensionError(f"no input supplied for variable slot {node.slot}")
        v = as_vector(inputs[node.slot], f"input {node.slot}")
        if v.size != node.dim:
            raise DimensionError(f"input {node.slot} has length {v.size}, expected {node.dim}")
        return v

    @property
    def value(self) -> np.ndarray:
        return self.values[-1]

    def backward(self, slot: int = 0) -> np.ndarray:
        """Gradient of the (scalar) output with respect to input ``slot``."""
        prog = self.program
        if self.expr.dim != 1:
            raise DimensionError("backward needs a scalar-valued expression")
        if slot not in prog.variables:
            raise DimensionError(f"expression has no variable in slot {slot}")
        values = self.values
        adjoints: list = [None] * len(values)
        adjoints[-1] = np.ones(1)
        grad = None
        try:
            with np.errstate(**_TRAP):
                for k in range(len(values) - 1, -1, -1):
                    adj = adjoints[k]
                    if adj is None:
                        continue
                    node = prog.nodes[k]
                    idx = prog.arg_index[k]
                    if not idx:
                        if isinstance(node, Variable) and node.slot == slot:
                            grad = adj if grad is None else grad + adj
                        continue
                    grads = node._backward([values[j] for j in idx], values[k], adj)
                    for j, g in zip(idx, grads):
                        prev = adjoints[j]
                        adjoints[j] = g if prev is None else prev + g
        except FloatingPointError as exc:
            raise NumericOverflowError(f"non-finite value in backward pass ({exc})") from exc
        if grad is None:
            grad = np.zeros(prog.nodes[prog.variables[slot][0]].dim)
        grad = np.array(grad, dtype=np.float64)
        if not _finite(grad):
            raise NumericOverflowError("non-finite gradient")
        return grad


def forward(expr: Expr, *inputs) -> np.ndarray:
    """Value of ``expr`` (any dimension) at the given inputs."""
    return Tape(expr, inputs).value.copy()


def evaluate(expr: Expr, *inputs) -> float:
    """Value of a scalar expression."""
    if expr.dim != 1:
        raise DimensionError(f"evaluate needs a scalar expression, got dim {expr.dim}")
    return float(Tape(expr, inputs).value[0])


def gradient(expr: Expr, *inputs, wrt: int = 0) -> np.ndarray:
    return Tape(expr, inputs).backward(wrt)


def value_and_gradient(expr: "Expr | Program", *inputs, wrt: int = 0) -> tuple[float, np.ndarray]:
    tape = Tape(expr, inputs)
    if tape.expr.dim != 1:
        raise DimensionError("value_and_gradient needs a scalar expression")
    return float(tape.value[0]), tape.backward(wrt)


def finite_difference_gradient(expr: Expr, *inputs, step: float = 1e-5, wrt: int = 0) -> np.ndarray:
    """Central-difference estimate of ``gradient(expr, *inputs, wrt=wrt)``."""
    if not step > 0:
        raise ValueError("step must be positive")
    point = as_vector(inputs[wrt], "point")
    args = list(inputs)
    grad = np.empty(point.size)
    for j in range(point.size):
        up = point.copy()
        up[j] += step
        down = point.copy()
        down[j] -= step
        args[wrt] = up
        f_up = evaluate(expr, *args)
        args[wrt] = down
        f_down = evaluate(expr, *args)
        grad[j] = (f_up - f_down) / (2.0 * step)
    return grad
