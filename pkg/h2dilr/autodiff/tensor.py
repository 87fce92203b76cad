"""Tensors and the define-by-run graph.

Operations record into the active ``Graph`` only when at least one input
requires a gradient; outside a graph everything runs as plain inference.
Append order is a valid topological order, so backward walks the node list in
reverse and visits each node once.
"""

import contextvars
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from h2dilr.core.errors import NonFiniteError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_active_graph: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "active_graph", default=None
)


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_graph", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._graph: Graph | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> dict[str, np.ndarray]:
        """Backpropagate from this scalar through the graph that produced it."""
        if self._graph is None:
            raise ShapeError("backward: tensor was not produced inside a recording graph")
        return self._graph.backward(self)

    def __add__(self, other):
        from h2dilr.autodiff import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from h2dilr.autodiff import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from h2dilr.autodiff import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from h2dilr.autodiff import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        from h2dilr.autodiff import ops

        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from h2dilr.autodiff import ops

        return ops.scale(self, -1.0)

    def __getitem__(self, key):
        from h2dilr.autodiff import ops

        return ops.index(self, key)

    def reshape(self, *shape):
        from h2dilr.autodiff import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from h2dilr.autodiff import ops

        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        from h2dilr.autodiff import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from h2dilr.autodiff import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


class Parameter(Tensor):
    """Learnable leaf tensor; owns a private copy of its data."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None, requires_grad: bool = True):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad, name)


@dataclass(frozen=True)
class Node:
    """One recorded primitive application."""

    primitive: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Graph:
    """Append-only tape of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Graph":
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_graph.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def current() -> "Graph | None":
        return _active_graph.get()

    def append(self, primitive: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        output._graph = self
        output._node = len(self.nodes)
        self.nodes.append(Node(primitive, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Chain-rule gradients of a scalar loss for every tracked leaf.

        Leaf ``.grad`` fields are overwritten with this pass's gradients; the
        returned map is keyed by leaf name (or ``tensor_<id>`` when unnamed).
        """
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss._graph is not self or loss._node is None:
            raise ShapeError("backward: loss was not produced by this graph")
        if not np.all(np.isfinite(loss.data)):
            raise NonFiniteError(
                f"backward: loss is non-finite (produced by node {loss._node} "
                f"'{self.nodes[loss._node].primitive}')"
            )

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        leaf_grads: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes[: loss._node + 1]):
            upstream = pending.pop(id(node.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise ShapeError(
                        f"backward: '{node.primitive}' returned gradient of shape {grad.shape} "
                        f"for input of shape {tensor.shape}"
                    )
                key = id(tensor)
                target = leaf_grads if tensor.is_leaf else pending
                if tensor.is_leaf:
                    leaves[key] = tensor
                target[key] = target[key] + grad if key in target else grad

        named: dict[str, np.ndarray] = {}
        for key, tensor in leaves.items():
            tensor.grad = leaf_grads[key]
            named[tensor.name or f"tensor_{key}"] = tensor.grad
        return named


def record(primitive: str, inputs: Sequence[Tensor], out: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap a primitive's output and append it to the active graph if needed."""
    graph = Graph.current()
    if not np.all(np.isfinite(out)):
        where = f" at node {len(graph.nodes)}" if graph is not None else ""
        raise NonFiniteError(f"{primitive}{where}: produced non-finite values")
    result = Tensor(out)
    if graph is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        graph.append(primitive, inputs, result, backward)
    return result


def as_tensor(value) -> Tensor:
    """Constants (python scalars, arrays) become non-tracked tensors."""
    return value if isinstance(value, Tensor) else Tensor(value)
