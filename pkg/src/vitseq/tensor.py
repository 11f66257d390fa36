"""Dense tensor with reverse-mode gradient propagation.

Values are stored as row-major numpy arrays, float32 by default. Every
differentiable operation (see kernels.py) records its inputs and a local
backward closure; Tensor.backward() walks the recorded trace in reverse
topological order and accumulates gradients into every node that requires
them. The trace is rebuilt on each forward pass.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Numpy-backed value node in the gradient trace.

    ``grad`` is populated (as a numpy array of the same shape) by a
    backward pass when ``requires_grad`` is set, directly or through a
    parent. Leaf tensors created from user data default to float32; ops
    preserve the dtype of their inputs, which is how the optional 64-bit
    gradient-check mode works.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out.requires_grad = any(p.requires_grad for p in out._parents)
        out._backward = backward if out.requires_grad else None
        if not out.requires_grad:
            out._parents = ()
        return out

    @classmethod
    def zeros(cls, *shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    # -- bookkeeping ----------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g.astype(self.data.dtype, copy=False)

    def backward(self) -> None:
        """Propagate from a scalar output to every requires_grad node."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar output, got shape {self.shape}"
            )
        if not np.isfinite(self.data).all():
            raise NumericError("backward() called on a non-finite value")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
