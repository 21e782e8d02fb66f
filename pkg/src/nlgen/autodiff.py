"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The engine is define-by-run: operations evaluate eagerly and append nodes to
a per-sequence Graph, so sequence lengths may vary freely while trainable
parameters persist across graphs through a ParamSet. A graph built once can
be re-evaluated in place with forward(), which is what makes cheap central
finite-difference checking possible: perturb a parameter value, re-run
forward, read the loss.

Shapes are explicit. The only tolerated implicit shapes are matrix @ vector
products and a 0-d scalar broadcast in elementwise multiply (needed for
graph-valued attention weights scaling vectors); everything else must match
exactly or a ShapeError is raised naming both operands.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterator

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "NumericError",
    "ParamSet",
    "ShapeError",
    "grad_check",
    "sgd_step",
    "sigmoid_values",
    "softmax_values",
]

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the computation requires finiteness."""


def _as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def softmax_values(x: np.ndarray) -> np.ndarray:
    """Plain-array softmax using the same arithmetic as the graph op."""
    return _stable_softmax(np.asarray(x, dtype=np.float64))


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Plain-array sigmoid using the same arithmetic as the graph op."""
    return _stable_sigmoid(np.asarray(x, dtype=np.float64))


class Node:
    """One value in the computation graph: a float64 array plus its gradient.

    Leaf nodes are inputs or parameters; interior nodes carry closures that
    recompute their value from parent values (forward) and scatter their
    gradient into parent gradients (backward).
    """

    __slots__ = ("id", "op", "value", "grad", "parents", "name", "trainable", "_fwd", "_bwd")

    def __init__(self, op: str, value: np.ndarray, parents: tuple["Node", ...] = (),
                 name: str | None = None, trainable: bool = False):
        self.id = next(_node_ids)
        self.op = op
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents = parents
        self.name = name
        self.trainable = trainable
        self._fwd: Callable[[], np.ndarray] | None = None
        self._bwd: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def label(self) -> str:
        return f"{self.name or self.op}#{self.id}{list(self.shape)}"

    def __repr__(self) -> str:
        return f"Node({self.label()})"


class ParamSet:
    """Registry of named trainable leaves shared across per-sequence graphs."""

    def __init__(self):
        self._params: dict[str, Node] = {}

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        node = Node("parameter", _as_f64(value).copy(), name=name, trainable=True)
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[Node]:
        return iter(self._params.values())

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def grad_norm(self) -> float:
        total = 0.0
        for p in self._params.values():
            total += float(np.dot(p.grad.reshape(-1), p.grad.reshape(-1)))
        return float(np.sqrt(total))

    def clip_grad_norm(self, max_norm: float) -> float:
        """Scale all gradients so their global norm is at most max_norm."""
        norm = self.grad_norm()
        if norm > max_norm:
            scale = max_norm / norm
            for p in self._params.values():
                p.grad *= scale
        return norm

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            p = self._params[name]
            if p.value.shape != value.shape:
                raise ShapeError(f"parameter {name}: stored shape {value.shape} "
                                 f"!= registered shape {p.value.shape}")
            p.value[...] = value


class Graph:
    """Tape of computed nodes in topological (creation) order.

    Graphs are single-threaded and rebuilt per sequence. The same graph can
    be re-run with forward() after leaf values change; backward() fills
    gradients for one scalar loss.
    """

    def __init__(self, params: ParamSet | None = None):
        self.params = params if params is not None else ParamSet()
        self.nodes: list[Node] = []
        self.leaves: list[Node] = []

    # -- leaves ---------------------------------------------------------

    def input(self, value, name: str | None = None) -> Node:
        node = Node("input", _as_f64(value).copy(), name=name)
        self.leaves.append(node)
        return node

    # -- op plumbing ----------------------------------------------------

    def _push(self, op: str, parents: tuple[Node, ...],
              fwd: Callable[[], np.ndarray], bwd: Callable[[Node], None],
              name: str | None = None) -> Node:
        node = Node(op, fwd(), parents, name=name)
        node._fwd = fwd
        node._bwd = bwd
        self.nodes.append(node)
        return node

    @staticmethod
    def _mismatch(op: str, a: Node, b: Node) -> ShapeError:
        return ShapeError(f"{op}: incompatible shapes {a.label()} vs {b.label()}")

    # -- operations -----------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        """Matrix @ vector or matrix @ matrix."""
        if a.value.ndim != 2 or b.value.ndim not in (1, 2) \
                or a.value.shape[1] != b.value.shape[0]:
            raise self._mismatch("matmul", a, b)

        def fwd():
            return a.value @ b.value

        def bwd(out: Node):
            if b.value.ndim == 1:
                a.grad += np.outer(out.grad, b.value)
            else:
                a.grad += out.grad @ b.value.T
            b.grad += a.value.T @ out.grad

        return self._push("matmul", (a, b), fwd, bwd)

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise self._mismatch("add", a, b)

        def fwd():
            return a.value + b.value

        def bwd(out: Node):
            a.grad += out.grad
            b.grad += out.grad

        return self._push("add", (a, b), fwd, bwd)

    def mul(self, a: Node, b: Node) -> Node:
        """Elementwise product; one operand may be a 0-d scalar."""
        if a.value.shape != b.value.shape and a.value.ndim != 0 and b.value.ndim != 0:
            raise self._mismatch("elementwise-multiply", a, b)

        def fwd():
            return a.value * b.value

        def bwd(out: Node):
            ga = out.grad * b.value
            gb = out.grad * a.value
            a.grad += ga.sum() if a.value.ndim == 0 and ga.ndim != 0 else ga
            b.grad += gb.sum() if b.value.ndim == 0 and gb.ndim != 0 else gb

        return self._push("elementwise-multiply", (a, b), fwd, bwd)

    def concat(self, *parts: Node) -> Node:
        if not parts:
            raise ShapeError("concat: needs at least one operand")
        for p in parts:
            if p.value.ndim != 1:
                raise ShapeError(f"concat: only 1-d vectors, got {p.label()}")
        sizes = [p.value.shape[0] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def fwd():
            return np.concatenate([p.value for p in parts])

        def bwd(out: Node):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                p.grad += out.grad[lo:hi]

        return self._push("concat", tuple(parts), fwd, bwd)

    def sigmoid(self, x: Node) -> Node:
        def fwd():
            return _stable_sigmoid(x.value)

        def bwd(out: Node):
            x.grad += out.grad * out.value * (1.0 - out.value)

        return self._push("sigmoid", (x,), fwd, bwd)

    def tanh(self, x: Node) -> Node:
        def fwd():
            return np.tanh(x.value)

        def bwd(out: Node):
            x.grad += out.grad * (1.0 - out.value * out.value)

        return self._push("tanh", (x,), fwd, bwd)

    def softmax(self, x: Node) -> Node:
        """Probability vector from a 1-d score vector (or per row of a matrix)."""
        if x.value.ndim not in (1, 2):
            raise ShapeError(f"softmax: expected vector or matrix, got {x.label()}")

        def fwd():
            return _stable_softmax(x.value)

        def bwd(out: Node):
            p = out.value
            dot = (out.grad * p).sum(axis=-1, keepdims=p.ndim == 2)
            x.grad += p * (out.grad - dot)

        return self._push("softmax", (x,), fwd, bwd)

    def sum(self, x: Node) -> Node:
        """Reduce to a 0-d scalar."""

        def fwd():
            return np.asarray(x.value.sum())

        def bwd(out: Node):
            x.grad += out.grad

        return self._push("sum", (x,), fwd, bwd)

    def scale(self, x: Node, factor: float) -> Node:
        """Multiply by a compile-time Python float constant."""
        factor = float(factor)

        def fwd():
            return x.value * factor

        def bwd(out: Node):
            x.grad += out.grad * factor

        return self._push("scalar-scale", (x,), fwd, bwd)

    def log(self, x: Node, eps: float = 1e-12) -> Node:
        """Natural log, clamped below at eps; gradient is zero in the clamp."""

        def fwd():
            return np.log(np.maximum(x.value, eps))

        def bwd(out: Node):
            x.grad += np.where(x.value > eps, out.grad / np.maximum(x.value, eps), 0.0)

        return self._push("log", (x,), fwd, bwd)

    def neg(self, x: Node) -> Node:
        def fwd():
            return -x.value

        def bwd(out: Node):
            x.grad -= out.grad

        return self._push("negate", (x,), fwd, bwd)

    def select_row(self, x: Node, index: int) -> Node:
        """Row of a matrix, or a single 0-d component of a vector."""
        index = int(index)
        if x.value.ndim not in (1, 2) or not 0 <= index < x.value.shape[0]:
            raise ShapeError(f"select-row: index {index} invalid for {x.label()}")

        def fwd():
            return np.asarray(x.value[index])

        def bwd(out: Node):
            x.grad[index] += out.grad

        return self._push("select-row", (x,), fwd, bwd)

    def slice(self, x: Node, start: int, stop: int) -> Node:
        """Contiguous chunk of a 1-d vector (used to split fused gate blocks)."""
        if x.value.ndim != 1 or not 0 <= start < stop <= x.value.shape[0]:
            raise ShapeError(f"slice: range [{start}:{stop}] invalid for {x.label()}")

        def fwd():
            return x.value[start:stop].copy()

        def bwd(out: Node):
            x.grad[start:stop] += out.grad

        return self._push("slice", (x,), fwd, bwd)

    # -- execution ------------------------------------------------------

    def forward(self, check_finite: bool = False) -> None:
        """Recompute every tape node in topological order.

        Leaf values are taken as-is, so perturbing a parameter and calling
        forward() again re-evaluates the same graph at the new point.
        """
        for node in self.nodes:
            node.value = node._fwd()
            if check_finite and not np.all(np.isfinite(node.value)):
                raise NumericError(f"non-finite value in node {node.label()}")

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(node) into every node reachable from loss.

        All tape, leaf, and registered parameter gradients are zeroed first,
        so parameters the loss does not depend on end with exactly zero.
        """
        if loss.value.ndim != 0:
            raise ShapeError(f"backward: loss must be scalar, got {loss.label()}")
        for node in self.nodes:
            node.grad[...] = 0.0
        for node in self.leaves:
            node.grad[...] = 0.0
        self.params.zero_grads()
        loss.grad = np.asarray(1.0)
        for node in reversed(self.nodes):
            node._bwd(node)


def sgd_step(params: ParamSet, learning_rate: float,
             l2_coefficient: float = 0.0, apply_l2: bool = False) -> None:
    """In-place SGD update p <- p - lr * (g + [apply_l2] * l2 * p); zeroes grads.

    Raises NumericError if any gradient is non-finite, leaving parameters
    untouched so the caller can abort with the last good state.
    """
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name}")
    for p in params:
        step = p.grad
        if apply_l2 and l2_coefficient:
            step = step + l2_coefficient * p.value
        p.value -= learning_rate * step
    params.zero_grads()


def grad_check(build: Callable[[Graph], Node], params: ParamSet,
               epsilon: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    build constructs a scalar loss node on a fresh Graph over params, at the
    parameter values currently held in params. Returns the max over all
    parameter components of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    g = Graph(params)
    loss = build(g)
    if loss.value.ndim != 0:
        raise ShapeError(f"grad_check: builder must return a scalar, got {loss.label()}")
    g.forward(check_finite=True)
    g.backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat_value = p.value.reshape(-1)
        flat_grad = analytic[name].reshape(-1)
        for i in range(flat_value.size):
            saved = flat_value[i]
            flat_value[i] = saved + epsilon
            g.forward()
            f_plus = float(loss.value)
            flat_value[i] = saved - epsilon
            g.forward()
            f_minus = float(loss.value)
            flat_value[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(flat_grad[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
    g.forward()
    return worst
