"""Tensor value type and the reverse-mode engine.

Every op is a :class:`Function` whose ``backward`` is itself written in terms
of differentiable ops, so gradients can be recorded (``create_graph=True``)
and differentiated again. This is what lets the full Jacobian penalty be
trained by double backward.
"""

from __future__ import annotations

import itertools
import threading
import weakref
from typing import Iterable, Optional, Sequence

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)
_seq = itertools.count()
_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from its inputs."""


class ShapeError(ValueError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class _GradMode:
    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        self.prev = is_grad_enabled()
        _state.grad_enabled = self.enabled

    def __exit__(self, *exc):
        _state.grad_enabled = self.prev
        return False


def no_grad() -> _GradMode:
    """Context manager that stops ops from recording graph nodes."""
    return _GradMode(False)


def enable_grad() -> _GradMode:
    return _GradMode(True)


class KinkRecorder:
    """Collects the branch decisions (relu masks, max indices, clip masks)
    taken during a forward pass. Two passes with equal signatures went
    through the same piecewise-smooth region."""

    def __init__(self):
        self.entries: list[bytes] = []

    def __enter__(self):
        self.prev = getattr(_state, "kinks", None)
        _state.kinks = self
        return self

    def __exit__(self, *exc):
        _state.kinks = self.prev
        return False

    def signature(self) -> tuple[bytes, ...]:
        return tuple(self.entries)


def record_kink(mask: np.ndarray) -> None:
    rec = getattr(_state, "kinks", None)
    if rec is not None:
        rec.entries.append(np.packbits(np.asarray(mask, dtype=bool).ravel()).tobytes())


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in _FLOAT_TYPES else np.float32
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """Dense float array (float32 unless built from float64 data) with an
    optional link to the op node that produced it."""

    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.name = name

    # -- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad}{tag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic ----------------------------------------------------
    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        from . import ops
        return ops.add(self, self._wrap(other))

    def __radd__(self, other):
        from . import ops
        return ops.add(self._wrap(other), self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, self._wrap(other))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(self._wrap(other), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, self._wrap(other))

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self._wrap(other), self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, self._wrap(other))

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(self._wrap(other), self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, self._wrap(other))

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class Node:
    """One recorded op application. ``seq`` increases with creation time,
    so sorting by it yields a topological order."""

    __slots__ = ("fn", "inputs", "seq", "_out")

    def __init__(self, fn: "Function", inputs: tuple[Tensor, ...], out: Tensor):
        self.fn = fn
        self.inputs = inputs
        self.seq = next(_seq)
        self._out = weakref.ref(out)

    @property
    def output(self) -> Optional[Tensor]:
        return self._out()

    def __repr__(self):
        return f"Node({self.fn.name}, seq={self.seq})"


class Function:
    """Base class for differentiable ops.

    ``forward`` works on raw arrays; ``backward`` receives the upstream
    gradient as a Tensor and returns one Tensor (or None) per input, built
    from differentiable ops.
    """

    name = "op"
    differentiable = True

    def __init__(self, inputs: tuple[Tensor, ...], **attrs):
        self.inputs = inputs
        self.attrs = attrs
        self.out: Optional[weakref.ref] = None

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Sequence[Optional[Tensor]]:
        raise NotImplementedError(f"{self.name} has no backward")

    def output(self) -> Tensor:
        out = self.out() if self.out is not None else None
        if out is None:
            raise RuntimeError(f"output of {self.name} is no longer alive")
        return out

    @classmethod
    def apply(cls, *inputs: Tensor, **attrs) -> Tensor:
        fn = cls(inputs, **attrs)
        data = fn.forward(*(t.data for t in inputs))
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{cls.name} produced non-finite values (output shape {data.shape})")
        out = Tensor(data, dtype=data.dtype if data.dtype in _FLOAT_TYPES else inputs[0].dtype)
        if cls.differentiable and is_grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = Node(fn, inputs, out)
            fn.out = weakref.ref(out)
        return out


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def topological_nodes(outputs: Iterable[Tensor]) -> list[Node]:
    """Every node reachable from ``outputs``, inputs before consumers."""
    seen: set[int] = set()
    stack = [t.node for t in outputs if t.node is not None]
    found: list[Node] = []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        found.append(node)
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append(t.node)
    found.sort(key=lambda n: n.seq)
    return found


def _accumulate(store: dict, key, value: Tensor) -> None:
    prev = store.get(key)
    store[key] = value if prev is None else prev + value


def grad(
    outputs: Sequence[Tensor] | Tensor,
    inputs: Sequence[Tensor] | Tensor,
    grad_outputs: Optional[Sequence[Tensor | np.ndarray] | Tensor | np.ndarray] = None,
    create_graph: bool = False,
) -> list[Optional[Tensor]]:
    """Vector-Jacobian products of ``outputs`` with respect to ``inputs``.

    Unreached inputs get ``None``. With ``create_graph`` the returned
    gradients carry nodes of their own and can be differentiated again.
    """
    single_in = isinstance(inputs, Tensor)
    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    inputs = [inputs] if single_in else list(inputs)
    if grad_outputs is None:
        for o in outputs:
            if o.size != 1:
                raise ShapeError(f"grad of non-scalar output {o.shape} needs grad_outputs")
        grad_outputs = [np.ones(o.shape, dtype=o.dtype) for o in outputs]
    elif isinstance(grad_outputs, (Tensor, np.ndarray)):
        grad_outputs = [grad_outputs]
    if len(grad_outputs) != len(outputs):
        raise ValueError("one grad_output per output required")

    node_grads: dict[int, Tensor] = {}
    leaf_grads: dict[int, Tensor] = {}
    for o, g in zip(outputs, grad_outputs):
        g = g if isinstance(g, Tensor) else Tensor(g, dtype=o.dtype)
        if g.shape != o.shape:
            raise ShapeError(f"grad_output shape {g.shape} does not match output {o.shape}")
        if o.node is not None:
            _accumulate(node_grads, id(o.node), g)
        else:
            _accumulate(leaf_grads, id(o), g)

    wanted = {id(t.node) for t in inputs if t.node is not None}
    captured: dict[int, Tensor] = {}
    with _GradMode(create_graph):
        for node in reversed(topological_nodes(outputs)):
            g = node_grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                captured[id(node)] = g
            in_grads = node.fn.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{node.fn.name} backward gave {gi.shape} for input {t.shape}")
                if t.node is not None:
                    _accumulate(node_grads, id(t.node), gi)
                else:
                    _accumulate(leaf_grads, id(t), gi)

    result: list[Optional[Tensor]] = []
    for t in inputs:
        if t.node is not None:
            result.append(captured.get(id(t.node)))
        else:
            result.append(leaf_grads.get(id(t)))
    return result


def backward(loss: Tensor, wrt: Optional[Sequence[Tensor]] = None, create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Gradient map from each leaf tensor (parameters, inputs) to dloss/dleaf.

    ``loss`` must be a scalar produced by recorded ops.
    """
    if loss.node is None:
        raise RuntimeError("backward called on a tensor with no recorded forward pass")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if wrt is None:
        leaves: dict[int, Tensor] = {}
        for node in topological_nodes([loss]):
            for t in node.inputs:
                if t.node is None and t.requires_grad:
                    leaves[id(t)] = t
        wrt = list(leaves.values())
    grads = grad([loss], wrt, create_graph=create_graph)
    return {t: (g if g is not None else Tensor(np.zeros(t.shape, dtype=t.dtype))) for t, g in zip(wrt, grads)}
