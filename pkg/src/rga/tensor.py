"""Dense tensors, the gradient tape, and trainable parameters.

Feature maps are 4-D ``(batch, channels, height, width)`` arrays of 32-bit
floats stored contiguously in row-major order. Parameters may additionally be
1-D (biases, batch-norm scales) and reduction results 0-D. A 64-bit mode
exists solely so gradient checks can run at tighter tolerances.
"""

from __future__ import annotations

from contextlib import contextmanager, nullcontext

import numpy as np

from .errors import ShapeError, TapeError

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def resolve_dtype(dtype) -> np.dtype:
    """Map ``"float32"``/``"float64"`` (or dtype objects) to a numpy dtype."""
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    return dt


class Tensor:
    """A dense float array plus an optional gradient buffer.

    Values are treated as immutable once an op has produced them; gradients
    are accumulated into ``grad`` by :func:`backward`.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        if dtype is None:
            # numpy scalars (0-d op results) carry a dtype too
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=resolve_dtype(dtype))
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def check_feature_map(name: str, t: Tensor) -> None:
    """Require a non-empty 4-D NCHW tensor."""
    if t.data.ndim != 4:
        raise ShapeError(f"{name} must be 4-D NCHW, got shape {t.shape}")
    if min(t.shape) < 1:
        raise ShapeError(f"{name} has an empty extent: {t.shape}")


def accumulate(t: Tensor, grad: np.ndarray) -> None:
    """Add ``grad`` into ``t.grad``, allocating the buffer on first use."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


class TapeNode:
    """One recorded op: its output, inputs, and the rule mapping the
    output gradient back onto the inputs."""

    __slots__ = ("op", "scope", "output", "inputs", "backward_fn")

    def __init__(self, op, scope, output, inputs, backward_fn):
        self.op = op
        self.scope = scope
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops from one forward pass.

    :func:`backward` replays the nodes in exact reverse order; a tape can be
    consumed only once.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False
        self._scopes: list[str] = []

    def record(self, op: str, output: Tensor, inputs, backward_fn) -> None:
        scope = "/".join(self._scopes)
        self.nodes.append(TapeNode(op, scope, output, tuple(inputs), backward_fn))

    @contextmanager
    def scope(self, name: str):
        """Label nodes recorded inside the block, e.g. ``enc1`` or ``iaa2``."""
        self._scopes.append(name)
        try:
            yield self
        finally:
            self._scopes.pop()

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def scopes(self) -> list[str]:
        return [n.scope for n in self.nodes]

    def __len__(self) -> int:
        return len(self.nodes)


def scope(tape: Tape | None, name: str):
    """Tape scope that degrades to a no-op when no tape is recording."""
    return tape.scope(name) if tape is not None else nullcontext()


def backward(tape: Tape, seed: Tensor) -> None:
    """Reverse-replay ``tape``, accumulating gradients into every input.

    ``seed`` is the gradient of the final recorded output (shape must match).
    Participating parameters receive gradients in their persistent buffers;
    intermediate tensors get lazily allocated ``grad`` arrays so input
    gradients are available for checking.
    """
    if tape.consumed:
        raise TapeError("tape already consumed; record a new forward pass first")
    if not tape.nodes:
        raise TapeError("backward on an empty tape")
    final = tape.nodes[-1].output
    if seed.shape != final.shape:
        raise ShapeError(
            f"seed shape {seed.shape} does not match final output shape {final.shape}"
        )
    accumulate(final, seed.data.astype(final.dtype, copy=False))
    for node in reversed(tape.nodes):
        gy = node.output.grad
        if gy is None:
            continue
        node.backward_fn(gy)
    tape.consumed = True


class Param:
    """A named trainable tensor with persistent gradient and Adam slots."""

    __slots__ = ("name", "value", "adam_m", "adam_v")

    def __init__(self, name: str, value: Tensor):
        self.name = name
        self.value = value
        value.grad = np.zeros_like(value.data)
        self.adam_m = Tensor(np.zeros_like(value.data))
        self.adam_v = Tensor(np.zeros_like(value.data))

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad[...] = 0

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.value.shape})"


class ParamRegistry:
    """Insertion-ordered collection of uniquely named parameters."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: Tensor) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Param(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def total_size(self) -> int:
        return sum(p.value.size for p in self)

    def zero_grads(self) -> None:
        for p in self:
            p.zero_grad()
