"""Scalar reverse-mode differentiation.

A :class:`Tape` records every scalar operation as a node holding its value,
its parent nodes and the local partial derivatives with respect to those
parents. ``backward`` then sweeps the tape once in reverse order.

Operands may be :class:`Node` handles or plain numbers; plain numbers are
treated as constants and never appear on the tape.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

OPS = ("leaf", "add", "sub", "mul", "div", "neg", "relu", "sqrt", "sin", "ln", "max0", "dot")


class GraphError(ValueError):
    """Invalid operation while recording (division by zero, sqrt of a negative, ...)."""


class KinkCollision(RuntimeError):
    """A finite-difference stencil straddles a kink of a piecewise-linear function."""


class Node:
    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> float:
        return self.tape.values[self.index]

    def __repr__(self):
        return f"Node({self.index}, {self.tape.ops[self.index]}, value={self.value!r})"

    def __add__(self, other):
        return self.tape.record("add", self, other)

    def __radd__(self, other):
        return self.tape.record("add", other, self)

    def __sub__(self, other):
        return self.tape.record("sub", self, other)

    def __rsub__(self, other):
        return self.tape.record("sub", other, self)

    def __mul__(self, other):
        return self.tape.record("mul", self, other)

    def __rmul__(self, other):
        return self.tape.record("mul", other, self)

    def __truediv__(self, other):
        return self.tape.record("div", self, other)

    def __rtruediv__(self, other):
        return self.tape.record("div", other, self)

    def __neg__(self):
        return self.tape.record("neg", self)


def value_of(x) -> float:
    return x.value if isinstance(x, Node) else float(x)


class Gradients:
    """Adjoints from one backward pass, indexable by node."""

    def __init__(self, adjoints: list[float]):
        self._adj = adjoints

    def __getitem__(self, node: Node) -> float:
        return self._adj[node.index]

    def of(self, nodes) -> np.ndarray:
        return np.array([self._adj[n.index] for n in nodes], dtype=float)


class Tape:
    """Append-only record of scalar operations.

    Nodes are stored in creation order, so operands always precede results and
    a single reverse sweep suffices.
    """

    def __init__(self):
        self.values: list[float] = []
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.partials: list[tuple[float, ...]] = []
        self._consumed = False

    def __len__(self):
        return len(self.values)

    def _push(self, op, value, parents=(), partials=()):
        self.values.append(value)
        self.ops.append(op)
        self.parents.append(parents)
        self.partials.append(partials)
        return Node(self, len(self.values) - 1)

    def leaf(self, value: float) -> Node:
        return self._push("leaf", float(value))

    def leaves(self, values) -> list[Node]:
        return [self._push("leaf", float(v)) for v in np.ravel(values)]

    def _check(self, x):
        if isinstance(x, Node):
            if x.tape is not self:
                raise GraphError("operand belongs to a different tape")
            return x.value
        return float(x)

    def record(self, op: str, *operands) -> Node:
        """Append ``op`` applied to ``operands`` and return the result node.

        ``dot`` takes two equal-length sequences.
        """
        if op == "dot":
            return self._dot(*operands)
        vals = [self._check(o) for o in operands]
        if op == "add":
            a, b = vals
            value, local = a + b, (1.0, 1.0)
        elif op == "sub":
            a, b = vals
            value, local = a - b, (1.0, -1.0)
        elif op == "mul":
            a, b = vals
            value, local = a * b, (b, a)
        elif op == "div":
            a, b = vals
            if b == 0.0:
                raise GraphError("division by zero")
            value, local = a / b, (1.0 / b, -a / (b * b))
        elif op == "neg":
            (a,) = vals
            value, local = -a, (-1.0,)
        elif op in ("relu", "max0"):
            (a,) = vals
            # subgradient at exactly 0 is 0
            value, local = (a, (1.0,)) if a > 0.0 else (0.0, (0.0,))
        elif op == "sqrt":
            (a,) = vals
            if a < 0.0:
                raise GraphError(f"sqrt of negative value {a!r}")
            value = math.sqrt(a)
            # derivative at 0 taken as 0, same convention as relu
            local = (0.5 / value if value > 0.0 else 0.0,)
        elif op == "sin":
            (a,) = vals
            value, local = math.sin(a), (math.cos(a),)
        elif op == "ln":
            (a,) = vals
            if a <= 0.0:
                raise GraphError(f"ln of non-positive value {a!r}")
            value, local = math.log(a), (1.0 / a,)
        else:
            raise GraphError(f"unknown op {op!r}")
        parents, partials = [], []
        for o, d in zip(operands, local):
            if isinstance(o, Node):
                parents.append(o.index)
                partials.append(d)
        return self._push(op, value, tuple(parents), tuple(partials))

    def _dot(self, xs: Sequence, ys: Sequence) -> Node:
        if len(xs) != len(ys):
            raise GraphError(f"dot of sequences with lengths {len(xs)} and {len(ys)}")
        value = 0.0
        parents, partials = [], []
        for x, y in zip(xs, ys):
            xv, yv = self._check(x), self._check(y)
            value += xv * yv
            if isinstance(x, Node):
                parents.append(x.index)
                partials.append(yv)
            if isinstance(y, Node):
                parents.append(y.index)
                partials.append(xv)
        return self._push("dot", value, tuple(parents), tuple(partials))

    # shorthands used by the traced model and featurization code
    def relu(self, x):
        return self.record("relu", x)

    def max0(self, x):
        return self.record("max0", x)

    def sqrt(self, x):
        return self.record("sqrt", x)

    def sin(self, x):
        return self.record("sin", x)

    def ln(self, x):
        return self.record("ln", x)

    def dot(self, xs, ys):
        return self._dot(xs, ys)

    def sum(self, xs):
        return self._dot(xs, [1.0] * len(xs))

    def reset(self):
        """Allow another backward pass over the same recording."""
        self._consumed = False

    def backward(self, output: Node) -> Gradients:
        if self._consumed:
            raise GraphError("backward already called on this tape; call reset() first")
        if output.tape is not self:
            raise GraphError("output belongs to a different tape")
        self._consumed = True
        adj = [0.0] * len(self.values)
        adj[output.index] = 1.0
        parents, partials = self.parents, self.partials
        for i in range(output.index, -1, -1):
            g = adj[i]
            if g == 0.0:
                continue
            for p, d in zip(parents[i], partials[i]):
                adj[p] += g * d
        return Gradients(adj)


def backward(tape: Tape, output: Node) -> Gradients:
    return tape.backward(output)


def gradient(f: Callable, point) -> tuple[float, np.ndarray]:
    """Value and gradient of a traced function ``f(tape, inputs) -> Node`` at ``point``."""
    tape = Tape()
    xs = tape.leaves(point)
    out = f(tape, xs)
    grads = tape.backward(out)
    return out.value, grads.of(xs)


def _plain(f: Callable) -> Callable:
    def g(x):
        tape = Tape()
        return f(tape, tape.leaves(x)).value

    return g


def grad_check(f: Callable, point, step: float = 1e-5, *, numeric: Callable | None = None,
               vectorized: bool = False, kink_tol: float | None = 1e-3) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f(tape, inputs) -> Node`` supplies the analytic gradient. The finite
    differences use ``numeric(x) -> float`` when given (or, with
    ``vectorized=True``, ``numeric(X) -> array`` over rows of perturbed points),
    otherwise ``f`` re-evaluated on a fresh tape.

    Raises :class:`KinkCollision` when forward and backward one-sided
    differences of some coordinate disagree by more than ``kink_tol``
    (relative), i.e. the stencil crossed a kink; callers re-sample the point.
    """
    point = np.asarray(point, dtype=float).ravel()
    _, analytic = gradient(f, point)
    fn = numeric if numeric is not None else _plain(f)
    d = point.size
    if vectorized:
        base = fn(point[None, :])[0]
        chunk = max(1, 200_000 // max(d, 1))
        plus = np.empty(d)
        minus = np.empty(d)
        for start in range(0, d, chunk):
            idx = np.arange(start, min(d, start + chunk))
            P = np.repeat(point[None, :], 2 * idx.size, axis=0)
            P[np.arange(idx.size), idx] += step
            P[idx.size + np.arange(idx.size), idx] -= step
            vals = fn(P)
            plus[idx] = vals[: idx.size]
            minus[idx] = vals[idx.size:]
    else:
        base = fn(point)
        plus = np.empty(d)
        minus = np.empty(d)
        for i in range(d):
            x = point.copy()
            x[i] += step
            plus[i] = fn(x)
            x[i] -= 2 * step
            minus[i] = fn(x)
    central = (plus - minus) / (2 * step)
    if kink_tol is not None:
        fwd = (plus - base) / step
        bwd = (base - minus) / step
        gap = np.abs(fwd - bwd) / (np.abs(fwd) + np.abs(bwd) + 1e-12)
        # roundoff floor: differences below ~1e-9 absolute are noise, not kinks
        kinks = (gap > kink_tol) & (np.abs(fwd - bwd) > 1e-9)
        if np.any(kinks):
            raise KinkCollision(f"{int(kinks.sum())} coordinate(s) straddle a kink")
    err = np.abs(analytic - central) / (np.abs(analytic) + np.abs(central) + 1e-12)
    return float(err.max()) if d else 0.0
