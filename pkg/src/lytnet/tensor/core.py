"""Dense tensor value type and the reverse-mode tape.

Every op in :mod:`lytnet.tensor.ops` produces a :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` linearises that graph into a tape (topological order) and
replays it in reverse.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return np.dtype(_get("dtype", np.float32))


def grad_enabled() -> bool:
    return _get("grad", True)


def debug_enabled() -> bool:
    return _get("debug", False)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (``float32``/``float64``)."""
    prev = _get("dtype", np.float32)
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def debug_mode():
    """Check every forward result for NaN/Inf."""
    prev = debug_enabled()
    _state.debug = True
    try:
        yield
    finally:
        _state.debug = prev


# op names whose backward is sign-flipped; used to prove the gradient checker
# actually catches broken derivatives
_FAULTY_OPS: set = set()


@contextlib.contextmanager
def inject_fault(*ops: str):
    _FAULTY_OPS.update(ops)
    try:
        yield
    finally:
        _FAULTY_OPS.difference_update(ops)


class Tensor:
    """N-d array of floats plus the bookkeeping needed for reverse-mode AD.

    Images use the NHWC layout throughout. Tensors are treated as immutable;
    ops never write into ``data`` of their inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=default_dtype())
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

    # -- array-ish surface ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators (implemented in ops) -------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires grad."""
        grads = _run_backward(self)
        for node in _topo_order(self):
            if node.requires_grad and not node._parents:
                node.grad = grads.get(id(node), np.zeros_like(node.data))


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op``; record the tape link when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    parents = tuple(parents)
    if debug_enabled() and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def build_tape(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` in topological order (inputs first)."""
    return _topo_order(loss)


def _run_backward(loss: Tensor) -> dict[int, np.ndarray]:
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        flip = node.op in _FAULTY_OPS
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if flip:
                pg = -pg
            if pg.shape != p.shape:
                raise RuntimeError(f"{node.op}: gradient shape {pg.shape} != input shape {p.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def backward(loss: Tensor, wrt: Sequence[Tensor] | dict | None = None):
    """Reverse-mode gradient of scalar ``loss``.

    With ``wrt`` a sequence, returns a list of gradient arrays in the same order;
    with a mapping, returns a dict keyed like ``wrt``. Tensors that ``loss`` does
    not depend on get zero gradients. With ``wrt=None`` this is ``loss.backward()``.
    """
    if wrt is None:
        loss.backward()
        return None
    grads = _run_backward(loss)
    if isinstance(wrt, dict):
        return {k: grads.get(id(t), np.zeros_like(t.data)) for k, t in wrt.items()}
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]
