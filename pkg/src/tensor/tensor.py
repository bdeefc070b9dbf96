"""
Tensor Core Module

Dense n-dimensional tensors with reverse-mode automatic differentiation. Every
differentiable operation is a Function subclass (see ops.py) whose forward works
on numpy arrays and whose backward maps the output gradient to one gradient per
input.

Features:
- float64 by default, float32 storage supported
- Graph tracing into topologically ordered op records
- Inference mode (no_grad) that keeps no activations alive
- Single-use graphs: a second backward over the same graph is refused
- Thread-local multiply-accumulate counting for profiling

Usage:
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    x.grad  # array([ 4., -6.])

    with no_grad():
        y = model(x)
"""

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.errors import ContractError

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_ids = itertools.count()
_state = threading.local()
_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype: Any) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError("tensor dtype must be float32 or float64", dtype=str(dtype))
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype() -> Any:
    return _DEFAULT_DTYPE


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Inference mode: ops run without recording a graph."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def count_macs() -> Iterator[Dict[str, int]]:
    """Accumulate multiply-accumulate counts reported by ops inside the block."""
    counter: Dict[str, int] = {"macs": 0}
    previous = getattr(_state, "mac_counter", None)
    _state.mac_counter = counter
    try:
        yield counter
    finally:
        _state.mac_counter = previous


def record_macs(count: int) -> None:
    counter = getattr(_state, "mac_counter", None)
    if counter is not None:
        counter["macs"] += int(count)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement forward(*arrays, **kwargs) -> array and
    backward(grad) -> tuple of gradients (None for inputs without one).
    Arrays needed by backward are stashed on the instance during forward and
    dropped by release() once the gradient has been propagated.
    """

    def __init__(self) -> None:
        self.inputs: Tuple["Tensor", ...] = ()
        self.op_id = next(_ids)
        self.consumed = False

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    def release(self) -> None:
        """Drop saved activations after backward."""
        keep = {"inputs", "op_id", "consumed"}
        for name in list(vars(self)):
            if name not in keep:
                delattr(self, name)
        self.inputs = ()
        self.consumed = True

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> "Tensor":
        fn = cls()
        tensors = tuple(as_tensor(x) for x in inputs)
        out_data = fn.forward(*(t.data for t in tensors), **kwargs)
        track = is_grad_enabled() and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=track, _copy=False)
        if track:
            fn.inputs = tensors
            out.creator = fn
        return out

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out dimensions that were broadcast to reach grad.shape."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """
    Value-plus-gradient container.

    Args:
        data: array-like payload; integer input is promoted to the default float dtype
        requires_grad: whether gradients accumulate into .grad
        name: optional label used in gradcheck reports and checkpoints
    """

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None, _copy: bool = True):
        array = np.array(data, copy=_copy) if _copy else np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[Function] = None
        self.name = name
        self.tensor_id = next(_ids)

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other: Any) -> "Tensor":
        return ops.add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return ops.add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return ops.sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return ops.sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return ops.mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return ops.mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return ops.div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return ops.div(other, self)

    def __neg__(self) -> "Tensor":
        return ops.neg(self)

    def __matmul__(self, other: Any) -> "Tensor":
        return ops.matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return ops.getitem(self, index)

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        return ops.max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)


def as_tensor(value: Any) -> Tensor:
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value)
    if not np.issubdtype(array.dtype, np.floating):
        array = array.astype(_DEFAULT_DTYPE)
    return Tensor(array, requires_grad=False, _copy=False)


@dataclass
class GraphNode:
    """One recorded op: its id, type name and the ids of its inputs."""
    op_id: int
    op: str
    input_ids: List[int]
    function: Function = field(repr=False)


@dataclass
class Graph:
    """
    Topologically ordered op records reachable from a root tensor.

    mode is "train" when the root carries a graph and "inference" otherwise.
    """
    nodes: List[GraphNode]
    mode: str

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        if root.creator is None:
            return cls(nodes=[], mode="train" if root.requires_grad else "inference")
        order: List[Function] = []
        visited = set()
        stack: List[Tuple[Function, bool]] = [(root.creator, False)]
        while stack:
            fn, expanded = stack.pop()
            if expanded:
                order.append(fn)
                continue
            if fn.op_id in visited:
                continue
            visited.add(fn.op_id)
            stack.append((fn, True))
            for parent in fn.inputs:
                if parent.creator is not None and parent.creator.op_id not in visited:
                    stack.append((parent.creator, False))
        nodes = [GraphNode(fn.op_id, type(fn).__name__,
                           [t.tensor_id for t in fn.inputs], fn) for fn in order]
        return cls(nodes=nodes, mode="train")


def backward(loss: Tensor) -> None:
    """
    Reverse accumulation from a scalar loss into every requires_grad leaf.

    Raises:
        ContractError: non-scalar loss, loss without a graph, or a graph whose
            backward already ran.
    """
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss", shape=loss.shape)
    if loss.creator is None:
        if loss.requires_grad:
            if loss.grad is not None:
                raise ContractError("backward already ran on this leaf; zero_grad before seeding it again")
            loss.grad = np.ones_like(loss.data)
            return
        raise ContractError("loss is detached from any differentiable graph")
    if loss.creator.consumed:
        raise ContractError("backward already ran on this graph; zero_grad and run a new forward")

    graph = Graph.trace(loss)
    pending: Dict[int, np.ndarray] = {loss.creator.op_id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        fn = node.function
        grad = pending.pop(fn.op_id, None)
        if grad is None:
            fn.release()
            continue
        input_grads = fn.backward(grad)
        for tensor, g in zip(fn.inputs, input_grads):
            if g is None or not tensor.requires_grad:
                continue
            if tensor.creator is not None:
                key = tensor.creator.op_id
                pending[key] = pending[key] + g if key in pending else g
            elif tensor.grad is None:
                tensor.grad = np.array(g, dtype=tensor.data.dtype, copy=True).reshape(tensor.shape)
            else:
                tensor.grad = tensor.grad + g
        fn.release()


from . import ops  # noqa: E402
