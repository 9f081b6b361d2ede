"""
fbsde/diffgraph.py - Computation graph with nested reverse-mode differentiation

Every value is a GraphNode holding a float64 array, the tag of the primitive
that produced it and references to its operands. grad() walks the graph
backwards and emits the gradients as new GraphNodes built from the same
primitives, so a gradient can be differentiated again (reverse-over-reverse).
That is what lets a loss containing Z = du/dx be differentiated with respect
to the network parameters.

Primitive set (closed; each has a forward rule and an adjoint rule):
    add, sub, mul, matvec, matmul, sum, mean, square, tanh, sin, cos, power,
    scale, concat, slice, embed, norm, transpose, reshape, broadcast_to, sum_to

Values may be batched: a (M, k) matrix whose rows are independent paths.
"""

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from fbsde.core import DTYPE, ContractError, ShapeError


# =============================================================================
# Graph arena
# =============================================================================

_local = threading.local()


def _graph_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Graph:
    """
    Ordered arena of the nodes built while it is active.

    Usage:
        with Graph() as graph:
            ...build nodes...
        graph.replay()   # recompute every value in arena order
        graph.release()

    Graphs are thread-local: a node is recorded in the innermost graph
    entered by the thread that created it.
    """

    def __init__(self):
        self.nodes: list["GraphNode"] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: "GraphNode"):
        self.nodes.append(node)

    def replay(self) -> bool:
        """Re-evaluate every node in arena order; True if all values match bit-exactly."""
        replayed: dict[int, np.ndarray] = {}
        identical = True
        for node in self.nodes:
            if not node.parents:
                replayed[id(node)] = node.value
                continue
            values = [replayed.get(id(p), p.value) for p in node.parents]
            value = np.asarray(_OPS[node.op].forward(values, node.attrs), dtype=DTYPE)
            if value.shape != node.value.shape or value.tobytes() != node.value.tobytes():
                identical = False
            replayed[id(node)] = value
        return identical

    def release(self):
        """Drop all node references held by the arena."""
        self.nodes.clear()


# =============================================================================
# Nodes
# =============================================================================

class GraphNode:
    """A value in the computation graph."""

    __slots__ = ("value", "op", "parents", "attrs", "requires_grad", "__weakref__")

    def __init__(self, value, op: str = "constant", parents: tuple = (),
                 attrs: Optional[dict] = None, requires_grad: bool = False):
        self.value = value
        self.op = op
        self.parents = parents
        self.attrs = attrs or {}
        self.requires_grad = requires_grad
        stack = _graph_stack()
        if stack:
            stack[-1].record(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "GraphNode":
        return transpose(self)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self):
        return f"GraphNode(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        other = as_node(other)
        if other.ndim == 1:
            return matvec(self, other)
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


NodeLike = Union[GraphNode, np.ndarray, float, int, Sequence]


def constant(value) -> GraphNode:
    """Leaf node that is never differentiated."""
    return GraphNode(np.array(value, dtype=DTYPE), "constant")


def variable(value) -> GraphNode:
    """Leaf node that gradients can be taken with respect to."""
    return GraphNode(np.array(value, dtype=DTYPE), "variable", requires_grad=True)


def as_node(value: NodeLike) -> GraphNode:
    """Wrap arrays and scalars as constants; pass nodes through."""
    if isinstance(value, GraphNode):
        return value
    return constant(value)


# =============================================================================
# Primitive registry
# =============================================================================

@dataclass(frozen=True)
class _Op:
    forward: Callable
    backward: Callable


_OPS: dict[str, _Op] = {}


def _register(name: str, forward: Callable, backward: Callable):
    _OPS[name] = _Op(forward, backward)


def _apply(op: str, parents: tuple, **attrs) -> GraphNode:
    value = np.asarray(_OPS[op].forward([p.value for p in parents], attrs), dtype=DTYPE)
    return GraphNode(value, op, parents, attrs, any(p.requires_grad for p in parents))


def primitives() -> list[str]:
    """Names of the registered primitives."""
    return sorted(_OPS)


def _unbroadcast(g: GraphNode, shape: tuple) -> GraphNode:
    return g if g.shape == shape else sum_to(g, shape)


def _sum_to_value(value: np.ndarray, shape: tuple) -> np.ndarray:
    lead = value.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and value.shape[lead + i] != 1
    )
    out = value.sum(axis=axes, keepdims=True) if axes else value
    return out.reshape(shape)


def _broadcast_shape(op: str, a: GraphNode, b: GraphNode) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _normalize_axis(op: str, axis: Optional[int], ndim: int, shape: tuple) -> Optional[int]:
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(op, shape, (axis,))
    return axis % ndim


# =============================================================================
# Elementwise arithmetic
# =============================================================================

def add(a: NodeLike, b: NodeLike) -> GraphNode:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a, b)
    return _apply("add", (a, b))


def _add_backward(node, g, needs):
    a, b = node.parents
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None)


_register("add", lambda v, _: v[0] + v[1], _add_backward)


def sub(a: NodeLike, b: NodeLike) -> GraphNode:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a, b)
    return _apply("sub", (a, b))


def _sub_backward(node, g, needs):
    a, b = node.parents
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(scale(g, -1.0), b.shape) if needs[1] else None)


_register("sub", lambda v, _: v[0] - v[1], _sub_backward)


def mul(a: NodeLike, b: NodeLike) -> GraphNode:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a, b)
    return _apply("mul", (a, b))


def _mul_backward(node, g, needs):
    a, b = node.parents
    return (_unbroadcast(mul(g, b), a.shape) if needs[0] else None,
            _unbroadcast(mul(g, a), b.shape) if needs[1] else None)


_register("mul", lambda v, _: v[0] * v[1], _mul_backward)


def scale(x: NodeLike, factor: float) -> GraphNode:
    """Multiply by a Python scalar."""
    return _apply("scale", (as_node(x),), factor=float(factor))


_register("scale",
          lambda v, attrs: v[0] * attrs["factor"],
          lambda node, g, needs: (scale(g, node.attrs["factor"]),))


def square(x: NodeLike) -> GraphNode:
    return _apply("square", (as_node(x),))


_register("square",
          lambda v, _: v[0] * v[0],
          lambda node, g, needs: (mul(g, scale(node.parents[0], 2.0)),))


def power(x: NodeLike, exponent: float) -> GraphNode:
    """Elementwise power with a constant exponent."""
    return _apply("power", (as_node(x),), exponent=float(exponent))


def _power_backward(node, g, needs):
    x = node.parents[0]
    p = node.attrs["exponent"]
    return (mul(g, scale(power(x, p - 1.0), p)),)


_register("power", lambda v, attrs: np.power(v[0], attrs["exponent"]), _power_backward)


def tanh(x: NodeLike) -> GraphNode:
    return _apply("tanh", (as_node(x),))


_register("tanh",
          lambda v, _: np.tanh(v[0]),
          lambda node, g, needs: (mul(g, sub(1.0, square(node))),))


def sin(x: NodeLike) -> GraphNode:
    return _apply("sin", (as_node(x),))


def cos(x: NodeLike) -> GraphNode:
    return _apply("cos", (as_node(x),))


_register("sin", lambda v, _: np.sin(v[0]),
          lambda node, g, needs: (mul(g, cos(node.parents[0])),))
_register("cos", lambda v, _: np.cos(v[0]),
          lambda node, g, needs: (mul(g, scale(sin(node.parents[0]), -1.0)),))


# =============================================================================
# Linear algebra
# =============================================================================

def matvec(a: NodeLike, v: NodeLike) -> GraphNode:
    """Matrix-vector product A v."""
    a, v = as_node(a), as_node(v)
    if a.ndim != 2 or v.ndim != 1 or a.shape[1] != v.shape[0]:
        raise ShapeError("matvec", a.shape, v.shape)
    return _apply("matvec", (a, v))


def _matvec_backward(node, g, needs):
    a, v = node.parents
    m, n = a.shape
    ga = matmul(reshape(g, (m, 1)), reshape(v, (1, n))) if needs[0] else None
    gv = matvec(transpose(a), g) if needs[1] else None
    return ga, gv


_register("matvec", lambda v, _: v[0] @ v[1], _matvec_backward)


def matmul(a: NodeLike, b: NodeLike) -> GraphNode:
    """Matrix-matrix product A B."""
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _apply("matmul", (a, b))


def _matmul_backward(node, g, needs):
    a, b = node.parents
    return (matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None)


_register("matmul", lambda v, _: v[0] @ v[1], _matmul_backward)


def transpose(x: NodeLike) -> GraphNode:
    x = as_node(x)
    if x.ndim != 2:
        raise ShapeError("transpose", x.shape)
    return _apply("transpose", (x,))


_register("transpose",
          lambda v, _: np.ascontiguousarray(v[0].T),
          lambda node, g, needs: (transpose(g),))


def norm(x: NodeLike) -> GraphNode:
    """Euclidean (Frobenius) norm of the whole array; the zero array gets the zero subgradient."""
    return _apply("norm", (as_node(x),))


def _norm_backward(node, g, needs):
    x = node.parents[0]
    if node.value == 0.0:
        return (constant(np.zeros(x.shape, dtype=DTYPE)),)
    return (mul(x, mul(g, power(node, -1.0))),)


_register("norm", lambda v, _: np.sqrt(np.sum(v[0] * v[0])), _norm_backward)


# =============================================================================
# Reductions and shape manipulation
# =============================================================================

def sum_(x: NodeLike, axis: Optional[int] = None) -> GraphNode:
    """Sum over all entries, or over one axis."""
    x = as_node(x)
    axis = _normalize_axis("sum", axis, x.ndim, x.shape)
    return _apply("sum", (x,), axis=axis)


def _reduce_backward(g: GraphNode, x: GraphNode, axis: Optional[int]) -> GraphNode:
    if axis is None:
        return broadcast_to(g, x.shape)
    kept = list(x.shape)
    kept[axis] = 1
    return broadcast_to(reshape(g, tuple(kept)), x.shape)


_register("sum",
          lambda v, attrs: np.sum(v[0], axis=attrs["axis"]),
          lambda node, g, needs: (_reduce_backward(g, node.parents[0], node.attrs["axis"]),))


def mean(x: NodeLike, axis: Optional[int] = None) -> GraphNode:
    x = as_node(x)
    axis = _normalize_axis("mean", axis, x.ndim, x.shape)
    return _apply("mean", (x,), axis=axis)


def _mean_backward(node, g, needs):
    x = node.parents[0]
    axis = node.attrs["axis"]
    count = x.size if axis is None else x.shape[axis]
    return (scale(_reduce_backward(g, x, axis), 1.0 / count),)


_register("mean", lambda v, attrs: np.mean(v[0], axis=attrs["axis"]), _mean_backward)


def reshape(x: NodeLike, shape: tuple) -> GraphNode:
    x = as_node(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError("reshape", x.shape, shape)
    if shape == x.shape:
        return x
    return _apply("reshape", (x,), shape=shape)


_register("reshape",
          lambda v, attrs: v[0].reshape(attrs["shape"]),
          lambda node, g, needs: (reshape(g, node.parents[0].shape),))


def broadcast_to(x: NodeLike, shape: tuple) -> GraphNode:
    x = as_node(x)
    shape = tuple(int(s) for s in shape)
    try:
        ok = np.broadcast_shapes(x.shape, shape) == shape
    except ValueError:
        ok = False
    if not ok:
        raise ShapeError("broadcast_to", x.shape, shape)
    if shape == x.shape:
        return x
    return _apply("broadcast_to", (x,), shape=shape)


_register("broadcast_to",
          lambda v, attrs: np.array(np.broadcast_to(v[0], attrs["shape"])),
          lambda node, g, needs: (sum_to(g, node.parents[0].shape),))


def sum_to(x: NodeLike, shape: tuple) -> GraphNode:
    """Sum a broadcast result back down to `shape` (adjoint of broadcast_to)."""
    x = as_node(x)
    shape = tuple(int(s) for s in shape)
    try:
        ok = np.broadcast_shapes(x.shape, shape) == x.shape
    except ValueError:
        ok = False
    if not ok:
        raise ShapeError("sum_to", x.shape, shape)
    if shape == x.shape:
        return x
    return _apply("sum_to", (x,), shape=shape)


_register("sum_to",
          lambda v, attrs: _sum_to_value(v[0], attrs["shape"]),
          lambda node, g, needs: (broadcast_to(g, node.parents[0].shape),))


def concat(nodes: Sequence[NodeLike], axis: int = 0) -> GraphNode:
    nodes = tuple(as_node(n) for n in nodes)
    if not nodes:
        raise ShapeError("concat", ())
    first = nodes[0]
    axis = _normalize_axis("concat", axis, first.ndim, first.shape)
    for other in nodes[1:]:
        if other.ndim != first.ndim or any(
            i != axis and other.shape[i] != first.shape[i] for i in range(first.ndim)
        ):
            raise ShapeError("concat", first.shape, other.shape)
    return _apply("concat", nodes, axis=axis)


def _concat_backward(node, g, needs):
    axis = node.attrs["axis"]
    grads = []
    start = 0
    for parent, needed in zip(node.parents, needs):
        stop = start + parent.shape[axis]
        if needed:
            index = tuple(slice(start, stop) if i == axis else slice(None) for i in range(g.ndim))
            grads.append(slice_(g, index))
        else:
            grads.append(None)
        start = stop
    return tuple(grads)


_register("concat", lambda v, attrs: np.concatenate(v, axis=attrs["axis"]), _concat_backward)


def slice_(x: NodeLike, index) -> GraphNode:
    """Basic indexing (integers and slices only)."""
    x = as_node(x)
    index = index if isinstance(index, tuple) else (index,)
    for item in index:
        if not isinstance(item, (int, np.integer, slice)):
            raise ShapeError("slice", x.shape, (type(item).__name__,))
    try:
        x.value[index]
    except IndexError:
        raise ShapeError("slice", x.shape, index) from None
    return _apply("slice", (x,), index=index)


_register("slice",
          lambda v, attrs: np.array(v[0][attrs["index"]]),
          lambda node, g, needs: (embed(g, node.parents[0].shape, node.attrs["index"]),))


def embed(x: NodeLike, shape: tuple, index) -> GraphNode:
    """Zeros of `shape` with `x` written at `index` (adjoint of slice)."""
    x = as_node(x)
    return _apply("embed", (x,), shape=tuple(shape), index=index)


def _embed_forward(values, attrs):
    out = np.zeros(attrs["shape"], dtype=DTYPE)
    out[attrs["index"]] = values[0]
    return out


_register("embed", _embed_forward,
          lambda node, g, needs: (slice_(g, node.attrs["index"]),))


# =============================================================================
# Differentiation
# =============================================================================

def _topological_order(root: GraphNode) -> list[GraphNode]:
    """Nodes reachable from root, operands before consumers (iterative DFS)."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(output: GraphNode, wrt: Sequence[GraphNode]) -> list[GraphNode]:
    """
    Gradients of a scalar output with respect to each node in wrt.

    The returned gradients are graph nodes and can be differentiated again.
    A wrt node that output does not depend on gets a zero constant.
    """
    output = as_node(output)
    if output.size != 1:
        raise ContractError(f"grad: output must be scalar, got shape {output.shape}")
    for node in wrt:
        if not isinstance(node, GraphNode) or not node.requires_grad:
            raise ContractError("grad: every wrt node must require grad")

    order = _topological_order(output)
    targets = {id(node) for node in wrt}
    leads = set()
    for node in order:
        if id(node) in targets or any(id(p) in leads for p in node.parents):
            leads.add(id(node))

    adjoints = {id(output): constant(np.ones_like(output.value))}
    for node in reversed(order):
        g = adjoints.get(id(node))
        if g is None or not node.parents or id(node) not in leads:
            continue
        needs = tuple(id(p) in leads for p in node.parents)
        if not any(needs):
            continue
        contributions = _OPS[node.op].backward(node, g, needs)
        for parent, needed, contribution in zip(node.parents, needs, contributions):
            if not needed or contribution is None:
                continue
            key = id(parent)
            previous = adjoints.get(key)
            adjoints[key] = contribution if previous is None else add(previous, contribution)

    results = []
    for node in wrt:
        adjoint = adjoints.get(id(node))
        results.append(adjoint if adjoint is not None else constant(np.zeros_like(node.value)))
    return results


def hessian(f: Callable[[GraphNode], GraphNode], point) -> np.ndarray:
    """Dense Hessian of a scalar function of a flat vector, by differentiating each gradient entry."""
    x = variable(np.asarray(point, dtype=DTYPE).ravel())
    (gx,) = grad(as_node(f(x)), [x])
    rows = []
    for i in range(x.size):
        entry = slice_(gx, i)
        if entry.requires_grad:
            rows.append(grad(entry, [x])[0].value)
        else:
            rows.append(np.zeros(x.size, dtype=DTYPE))
    return np.vstack(rows)


def finite_difference_check(f: Callable[[GraphNode], NodeLike], point, step: float = 1e-5) -> float:
    """
    Max relative deviation between grad and central differences.

    f maps a flat vector node to a scalar node. The deviation per coordinate is
    |analytic - central| / (|analytic| + |central| + 1e-12).
    """
    if step <= 0:
        raise ContractError(f"finite_difference_check: step must be positive, got {step}")
    point = np.asarray(point, dtype=DTYPE).ravel()
    x = variable(point)
    analytic = grad(as_node(f(x)), [x])[0].value.ravel()

    central = np.empty_like(point)
    for i in range(point.size):
        shifted = point.copy()
        shifted[i] = point[i] + step
        forward = as_node(f(constant(shifted))).item()
        shifted[i] = point[i] - step
        backward = as_node(f(constant(shifted))).item()
        central[i] = (forward - backward) / (2.0 * step)

    if point.size == 0:
        return 0.0
    deviation = np.abs(analytic - central) / (np.abs(analytic) + np.abs(central) + 1e-12)
    return float(deviation.max())
