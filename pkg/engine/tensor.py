import logging
from contextlib import contextmanager
from typing import Any, Iterator, Sequence

import numpy as np

logger = logging.getLogger("lic-quant.engine.tensor")


class GraphError(Exception):
    """Raised when the compute graph is used in an invalid way."""
    pass


class ShapeError(Exception):
    """Raised when operand shapes are incompatible with an operation."""
    pass


class NumericalError(Exception):
    """Raised when an operation would produce a non-finite or undefined value."""
    pass


# Computation precision. Training runs in 32-bit, verification suites switch to 64-bit.
_PRECISIONS = {32: np.float32, 64: np.float64}
_dtype: type[np.floating] = np.float32


def set_precision(bits: int) -> None:
    """
    Set the global computation precision.

    :param int bits: 32 or 64.
    :return: None
    :rtype: None

    :raises: ValueError if ``bits`` is not a supported precision.
    """
    global _dtype
    if bits not in _PRECISIONS:
        raise ValueError(f"Unsupported precision {bits}, expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[bits]


def get_dtype() -> type[np.floating]:
    """Returns the numpy dtype of the current computation precision."""
    return _dtype


def get_precision() -> int:
    return 64 if _dtype is np.float64 else 32


@contextmanager
def precision(bits: int) -> Iterator[None]:
    """
    Temporarily switch the computation precision.

    :param int bits: 32 or 64.
    """
    previous = get_precision()
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


class Function:
    """
    A node of the compute graph.

    Subclasses implement ``forward`` on plain numpy arrays and ``backward``, which maps
    the gradient of the output to one gradient (or None) per input.
    """

    def __init__(self) -> None:
        self.inputs: tuple["Tensor", ...] = ()
        self.released = False

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: "Tensor | float", **kwargs: Any) -> "Tensor":
        """
        Run the forward pass on the given inputs and record the node if any input
        requires a gradient.

        :param inputs: Input tensors, or python scalars which become constants.
        :param kwargs: Non-tensor arguments of the operation.
        :return: The output tensor.
        :rtype: Tensor
        """
        fn = cls()
        fn.inputs = tuple(as_tensor(value) for value in inputs)
        dtype = get_dtype()
        out = fn.forward(*(np.asarray(t.data, dtype=dtype) for t in fn.inputs), **kwargs)
        requires_grad = any(t.requires_grad for t in fn.inputs)
        return Tensor(out, requires_grad=requires_grad, creator=fn if requires_grad else None)


class Tensor:
    """
    An n-dimensional array with an optional gradient slot.

    Leaves are created directly; every other tensor remembers the Function that
    produced it so that ``backward`` can walk the graph in reverse.
    """

    def __init__(
            self,
            data: Any,
            requires_grad: bool = False,
            creator: Function | None = None,
            name: str | None = None,
    ) -> None:
        self.data = np.asarray(data, dtype=get_dtype()) if creator is None else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.creator = creator
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """
        Populate the gradients of every leaf that requires one with ∂self/∂leaf.

        The graph is released afterwards; calling backward again on the same graph
        without re-running the forward pass raises GraphError.

        :return: None
        :rtype: None

        :raises: GraphError if self is not a scalar or the graph was already released.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self.creator is None:
            if self.requires_grad:
                _accumulate(self, np.ones_like(self.data))
            return
        if self.creator.released:
            raise GraphError("backward() called twice on the same graph; re-run the forward pass first")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            fn = node.creator
            if fn is None:
                continue
            grad = grads.pop(id(node), None)
            if grad is None:
                fn.released = True
                continue
            input_grads = fn.backward(grad)
            for inp, inp_grad in zip(fn.inputs, input_grads):
                if inp_grad is None or not inp.requires_grad:
                    continue
                if inp.creator is None:
                    _accumulate(inp, inp_grad)
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + inp_grad
                else:
                    grads[id(inp)] = inp_grad
            fn.released = True

    # Operator sugar, all routed through engine.functional
    def __add__(self, other: "Tensor | float") -> "Tensor":
        from engine import functional as F
        return F.add(self, other)

    def __radd__(self, other: "Tensor | float") -> "Tensor":
        from engine import functional as F
        return F.add(other, self)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        from engine import functional as F
        return F.sub(self, other)

    def __rsub__(self, other: "Tensor | float") -> "Tensor":
        from engine import functional as F
        return F.sub(other, self)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        from engine import functional as F
        return F.mul(self, other)

    def __rmul__(self, other: "Tensor | float") -> "Tensor":
        from engine import functional as F
        return F.mul(other, self)

    def __truediv__(self, other: "Tensor | float") -> "Tensor":
        from engine import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other: "Tensor | float") -> "Tensor":
        from engine import functional as F
        return F.div(other, self)

    def __neg__(self) -> "Tensor":
        from engine import functional as F
        return F.neg(self)

    def abs(self) -> "Tensor":
        from engine import functional as F
        return F.abs(self)

    def square(self) -> "Tensor":
        from engine import functional as F
        return F.square(self)

    def exp(self) -> "Tensor":
        from engine import functional as F
        return F.exp(self)

    def log(self) -> "Tensor":
        from engine import functional as F
        return F.log(self)

    def sum(self, axes: Sequence[int] | int | None = None) -> "Tensor":
        from engine import functional as F
        return F.reduce(self, "sum", axes)

    def mean(self, axes: Sequence[int] | int | None = None) -> "Tensor":
        from engine import functional as F
        return F.reduce(self, "mean", axes)

    def reshape(self, *shape: int) -> "Tensor":
        from engine import functional as F
        return F.reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(value: "Tensor | float | np.ndarray") -> Tensor:
    """Wrap python scalars and arrays as constant tensors; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def parameter(data: Any, name: str | None = None) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(np.array(data, dtype=get_dtype()), requires_grad=True, name=name)


def _accumulate(leaf: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=leaf.data.dtype)
    if grad.shape != leaf.shape:
        raise GraphError(f"gradient shape {grad.shape} does not match tensor shape {leaf.shape}")
    leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative post-order, inputs before outputs; order is fixed by input order.
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
        if node.creator is not None:
            for inp in reversed(node.creator.inputs):
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order
