import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import BackwardError, NonFiniteError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_PRECISIONS = {32: np.float32, 64: np.float64}
_default_dtype = np.float32
_state = threading.local()


def default_dtype() -> type:
    return _default_dtype


@contextmanager
def precision(bits: int) -> Iterator[None]:
    """Switch the process-wide element type; 64-bit is meant for gradient verification."""
    global _default_dtype
    if bits not in _PRECISIONS:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    previous = _default_dtype
    _default_dtype = _PRECISIONS[bits]
    try:
        yield
    finally:
        _default_dtype = previous


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class KinkMonitor:
    """Tracks how close a forward pass came to a non-differentiable point."""

    def __init__(self):
        self.margin = math.inf

    def record(self, margin: float) -> None:
        if margin < self.margin:
            self.margin = margin


@contextmanager
def kink_monitor() -> Iterator[KinkMonitor]:
    monitor = KinkMonitor()
    previous = getattr(_state, "monitor", None)
    _state.monitor = monitor
    try:
        yield monitor
    finally:
        _state.monitor = previous


def record_kink_margin(margin: float) -> None:
    monitor = getattr(_state, "monitor", None)
    if monitor is not None:
        monitor.record(float(margin))


class Tensor:
    def __init__(
        self,
        data,
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "",
    ):
        arr = np.array(data, dtype=default_dtype(), copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {op or 'input'} (shape {arr.shape})")
        arr.flags.writeable = False
        self._data = arr
        self._parents = parents
        self._backward_fn = backward_fn
        self._op = op

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents, backward_fn, op: str) -> "Tensor":
        # ops hand over freshly computed arrays, no copy
        obj = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {op} (shape {arr.shape})")
        arr.flags.writeable = False
        obj._data = arr
        obj._parents = parents
        obj._backward_fn = backward_fn
        obj._op = op
        return obj

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def op(self) -> str:
        return self._op

    @property
    def requires_grad(self) -> bool:
        return self._backward_fn is not None

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op or 'leaf'})"


class Parameter(Tensor):
    def __init__(self, name: str, value):
        super().__init__(value, op="parameter")
        self.name = name
        self.grad = np.zeros_like(self._data)

    @property
    def requires_grad(self) -> bool:
        return True

    def assign(self, value: np.ndarray) -> None:
        arr = np.array(value, dtype=self._data.dtype, copy=True, order="C")
        if arr.shape != self._data.shape:
            raise ValueError(f"parameter {self.name}: shape {arr.shape} != {self._data.shape}")
        arr.flags.writeable = False
        self._data = arr

    def accumulate(self, grad: np.ndarray) -> None:
        self.grad = self.grad + grad.astype(self.grad.dtype, copy=False).reshape(self.grad.shape)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self._data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def make_result(arr: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor._wrap(arr, parents, backward_fn, op)
    return Tensor._wrap(arr, (), None, op)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dtheta into every Parameter reachable from ``loss``."""
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_fn is None:
        raise BackwardError("no recorded forward computation reaches this tensor")

    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if isinstance(node, Parameter):
            node.accumulate(grad)
            continue
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(grad)
        for parent, parent_grad in zip(node._parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad
