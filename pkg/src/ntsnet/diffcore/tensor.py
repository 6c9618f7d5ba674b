"""Array-valued nodes of a define-by-run reverse-mode graph."""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Sequence

import numpy as np

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_branch_log: contextvars.ContextVar[list | None] = contextvars.ContextVar("branch_log", default=None)


class ShapeError(ValueError):
    """Raised when an op receives inputs of inconsistent shape."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording backward closures."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the discrete branch decisions taken by non-smooth ops.

    Two evaluations with equal logs lie on the same smooth piece of the
    function, which is what the gradient checker needs to know.
    """
    log: list = []
    token = _branch_log.set(log)
    try:
        yield log
    finally:
        _branch_log.reset(token)


def note_branch(op: str, decision) -> None:
    log = _branch_log.get()
    if log is not None:
        log.append((op, np.asarray(decision).tobytes()))


class Tensor:
    """Dense array with an optional gradient slot.

    ``data`` is a numpy array; ``grad`` is ``None`` until a backward pass
    reaches the node (or :meth:`zero_grad` is called).
    """

    __slots__ = ("data", "grad", "op", "_parents", "_backward", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def from_op(
        cls,
        op: str,
        value: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ) -> "Tensor":
        out = cls(value, dtype=value.dtype)
        out.op = op
        if _grad_enabled.get() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        op = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{op})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate d(self)/d(node) to every reachable node that requires grad.

        Gradients accumulate into ``.grad`` of leaves; call ``zero_grad`` on
        parameters between steps.
        """
        if self._backward is None:
            raise GraphError(
                "backward called on a tensor with no recorded forward graph"
            )
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)

        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))
