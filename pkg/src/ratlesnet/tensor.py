"""Dense 5-D tensors and a reverse-mode automatic differentiation tape.

Every tensor is a dense numpy array laid out as (batch, channel, x, y, z).
Operations execute eagerly; when a Graph is active and an input requires
gradients, the operation also appends a node to the tape.  backward() walks
the tape in reverse insertion order and accumulates gradients into the
``grad`` buffer of every tensor that requires them.  Gradients keep
accumulating across backward calls until explicitly cleared.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import GraphError, NumericError, ShapeError

Shape5 = tuple[int, int, int, int, int]


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced a non-finite value")


class Tensor:
    """A 5-D array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.ndim != 5:
            raise ShapeError(f"tensors are 5-D (batch, channel, x, y, z), got ndim={arr.ndim}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Shape5:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def is_scalar(self) -> bool:
        return all(e == 1 for e in self.data.shape)

    def item(self) -> float:
        if not self.is_scalar():
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def tensor_new(shape: Sequence[int], fill: float | Sequence[float] = 0.0,
               dtype: np.dtype | type = np.float32, requires_grad: bool = False) -> Tensor:
    """Build a tensor from a scalar fill value or a flat row-major sequence."""
    dims = tuple(int(e) for e in shape)
    if len(dims) != 5 or any(e < 0 for e in dims):
        raise ShapeError(f"shape must be 5 non-negative extents, got {dims}")
    if np.isscalar(fill):
        data = np.full(dims, fill, dtype=dtype)
    else:
        values = np.asarray(fill, dtype=dtype).reshape(-1)
        if values.size != int(np.prod(dims)):
            raise ShapeError(f"fill has {values.size} values, shape {dims} needs {int(np.prod(dims))}")
        data = values.reshape(dims)
    _check_finite(data, "tensor_new")
    return Tensor(data, requires_grad=requires_grad)


# A backward function maps the output gradient to one gradient (or None)
# per input, in input order.
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_active = threading.local()


def _graph_stack() -> list["Graph"]:
    stack = getattr(_active, "stack", None)
    if stack is None:
        stack = []
        _active.stack = stack
    return stack


def active_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Define-by-run tape.  Use as a context manager to record operations."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        stack = _graph_stack()
        if not stack or stack[-1] is not self:
            raise GraphError("graph context exited out of order")
        stack.pop()


def record_op(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
              backward_fn: BackwardFn) -> Tensor:
    """Finalize an op: guard against non-finite output, tape it if needed."""
    _check_finite(out_data, op)
    out = Tensor(out_data)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.nodes.append(_Node(op, inputs, out, backward_fn))
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """Propagate d(loss)/d(tensor) through the tape in reverse order.

    Gradients are accumulated into ``grad`` buffers: calling backward twice
    over the same tape doubles them.
    """
    if not loss.is_scalar():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending: dict[int, tuple[Tensor, np.ndarray]] = {}

    def push(t: Tensor, g: np.ndarray) -> None:
        entry = pending.get(id(t))
        if entry is None:
            pending[id(t)] = (t, g)
        else:
            # Build a fresh array: the stored one may be aliased by a grad buffer.
            pending[id(t)] = (t, entry[1] + g)

    def settle(t: Tensor, g: np.ndarray) -> None:
        t.grad = g if t.grad is None else t.grad + g

    push(loss, np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        entry = pending.pop(id(node.output), None)
        if entry is None:
            continue
        out_grad = entry[1]
        if node.output.requires_grad:
            settle(node.output, out_grad)
        input_grads = node.backward_fn(out_grad)
        for t, g in zip(node.inputs, input_grads):
            if g is None or not t.requires_grad:
                continue
            _check_finite(g, f"{node.op} backward")
            push(t, g)
    # Whatever is left belongs to leaves the tape never produced.
    for t, g in pending.values():
        if t.requires_grad:
            settle(t, g)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs matching shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    _binary_shapes("add", a, b)
    return record_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _binary_shapes("mul", a, b)

    def _backward(g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return record_op("mul", (a, b), a.data * b.data, _backward)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, returned as a (1, 1, 1, 1, 1) tensor."""
    total = np.sum(x.data, dtype=x.data.dtype).reshape((1,) * 5)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(g.reshape(()), x.data.shape).astype(x.data.dtype, copy=True),)

    return record_op("sum", (x,), total, _backward)


def _sample_inputs(rng: np.random.Generator, shape: Sequence[int], sampling: str,
                   margin: float) -> np.ndarray:
    n = int(np.prod(shape))
    if sampling == "normal":
        values = rng.standard_normal(n)
        # Finite differences misbehave near kinks (relu at 0), so resample
        # anything too close to the origin.
        for _ in range(64):
            close = np.abs(values) < margin
            if not close.any():
                break
            values[close] = rng.standard_normal(int(close.sum()))
        return values.reshape(shape)
    if sampling == "distinct":
        # Pairwise-distinct values with gaps far larger than the step size,
        # so argmax ties cannot flip under perturbation.
        values = (rng.permutation(n) - n / 2.0) * 0.05
        return values.reshape(shape)
    raise ValueError(f"unknown sampling mode {sampling!r}")


def grad_check(op: Callable[..., Tensor], input_shapes: Sequence[Sequence[int]], seed: int,
               h: float = 1e-4, sampling: str = "normal", margin: float = 1e-2) -> float:
    """Compare tape gradients of ``op`` against central finite differences.

    The op is reduced to a scalar through a fixed random projection, the
    analytic gradient of that scalar is taken off the tape, and every input
    coordinate is perturbed by ±h.  Everything runs in float64.  Returns the
    maximum relative error max |analytic - numeric| / max(1, |a| + |n|).
    """
    rng = np.random.default_rng(seed)
    inputs = [Tensor(_sample_inputs(rng, shape, sampling, margin), requires_grad=True)
              for shape in input_shapes]

    with Graph() as graph:
        out = op(*inputs)
        projection = Tensor(rng.standard_normal(out.data.shape))
        loss = tensor_sum(mul(out, projection))
    if not any(node.output is loss for node in graph.nodes):
        raise GraphError("op recorded nothing on the tape; no backward route exists")
    backward(graph, loss)

    def scalar_loss() -> float:
        return float(np.sum(op(*inputs).data * projection.data))

    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            kept = flat[j]
            flat[j] = kept + h
            up = scalar_loss()
            flat[j] = kept - h
            down = scalar_loss()
            flat[j] = kept
            numeric = (up - down) / (2.0 * h)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - numeric) / max(1.0, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
