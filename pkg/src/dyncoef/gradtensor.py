"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every op that touches a tensor with ``requires_grad`` appends a record to the
active :class:`Tape` (one per thread unless a tape is entered explicitly).
:func:`backward` replays the tape in reverse and accumulates gradients into
leaf tensors.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class DomainError(ValueError):
    """An input lies outside the domain of a function."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "is_leaf", "name", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce(self, "mean", axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered log of primitive ops: ``(output, inputs, backward_fn)``."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        self.records.append((out, inputs, fn))

    def reset(self) -> None:
        self.records.clear()

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def gradients(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``output`` w.r.t. ``wrt`` without touching ``.grad``."""
        grads = self._propagate(output)
        return [grads.get(id(t), np.zeros_like(t.values)) for t in wrt]

    def backward(self, output: Tensor) -> None:
        grads = self._propagate(output)
        for out, inputs, _ in self.records:
            for t in inputs:
                _flush_leaf(t, grads)
        _flush_leaf(output, grads)

    def _propagate(self, output: Tensor) -> dict[int, np.ndarray]:
        if output.values.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.values)}
        for out, inputs, fn in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            del grads[id(out)]
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        return grads


def _flush_leaf(t: Tensor, grads: dict[int, np.ndarray]) -> None:
    if not (t.is_leaf and t.requires_grad):
        return
    g = grads.pop(id(t), None)
    if g is None:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default = Tape()
        self.enabled = True
        self.kinks: list[np.ndarray] | None = None


_state = _State()


def current_tape() -> Tape:
    return _state.stack[-1] if _state.stack else _state.default


def reset_tape() -> None:
    current_tape().reset()


@contextmanager
def no_grad():
    """Evaluate without recording; values are identical to a recorded pass."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def kink_signs():
    """Record the active side of every ReLU-type kink evaluated in the block.

    Yields a list that collects one boolean array ``x > 0`` per
    ``relu``/``leaky_relu`` call. Two evaluations with equal records ran
    through the same linear pieces, which is what a finite-difference
    stencil needs to see a smooth function.
    """
    prev = _state.kinks
    _state.kinks = []
    try:
        yield _state.kinks
    finally:
        _state.kinks = prev


def same_kinks(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def _note_kinks(x: np.ndarray) -> None:
    if _state.kinks is not None:
        _state.kinks.append(x > 0)


def backward(output: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every leaf that ``output`` depends on (accumulating)."""
    (tape or current_tape()).backward(output)


def _make(values: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor(values)
    if _state.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        current_tape().record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def hadamard(a, b) -> Tensor:
    """Element-wise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "hadamard")
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                            _unbroadcast(g * av, bv.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _make(av @ bv, (a, b),
                 lambda g: (g @ bv.T if a.requires_grad else None,
                            av.T @ g if b.requires_grad else None))


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` for ``(P, in)`` input, ``(in, out)`` weight and ``(out,)`` bias."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear: {x.shape} @ {w.shape} + {b.shape}")
    xv, wv = x.values, w.values
    out = xv @ wv
    out += b.values
    return _make(out, (x, w, b),
                 lambda g: (g @ wv.T if x.requires_grad else None,
                            xv.T @ g if w.requires_grad else None,
                            g.sum(axis=0) if b.requires_grad else None))


def sparse_matmul(s: sp.spmatrix, x) -> Tensor:
    """``s @ x`` for a constant sparse matrix ``s`` and a 2-D tensor ``x``."""
    x = as_tensor(x)
    if x.ndim != 2 or s.shape[1] != x.shape[0]:
        raise DimensionError(f"sparse_matmul: {s.shape} @ {x.shape}")
    s = sp.csr_matrix(s)
    return _make(np.asarray(s @ x.values), (x,), lambda g: (np.asarray(s.T @ g),))


# ---------------------------------------------------------------------------
# unary element-wise


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    _note_kinks(a.values)
    out = np.maximum(a.values, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def leaky_relu(a, alpha: float = 0.01) -> Tensor:
    a = as_tensor(a)
    x = a.values
    _note_kinks(x)
    out = np.maximum(x, alpha * x) if alpha <= 1 else np.minimum(x, alpha * x)

    def fn(g):
        gi = g * alpha
        np.copyto(gi, g, where=x > 0)
        return (gi,)

    return _make(out, (a,), fn)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.values)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    return _make(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    return _make(np.cos(x), (a,), lambda g: (-g * np.sin(x),))


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "sqrt": sqrt,
    "neg": neg,
    "square": square,
    "sin": sin,
    "cos": cos,
}


def elementwise(a, fn: str, alpha: float = 0.01) -> Tensor:
    """Apply a named element-wise function (``leaky_relu`` takes ``alpha``)."""
    if fn == "leaky_relu":
        return leaky_relu(a, alpha)
    try:
        return _ELEMENTWISE[fn](a)
    except KeyError:
        raise ValueError(f"unknown element-wise function {fn!r}") from None


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
    return tuple(ax % ndim for ax in axes)


def reduce(a, op: str = "sum", axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    if op == "sum":
        out = a.values.sum(axis=axes, keepdims=keepdims)
        scale = 1.0
    elif op == "mean":
        out = a.values.mean(axis=axes, keepdims=keepdims)
        n = a.size if axes is None else int(np.prod([shape[ax] for ax in axes]))
        scale = 1.0 / n
    else:
        raise ValueError(f"unknown reduction {op!r}")

    def fn(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, shape),)

    return _make(np.asarray(out), (a,), fn)


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    (ax,) = _norm_axis(axis, a.ndim)
    return _make(np.cumsum(a.values, axis=ax), (a,),
                 lambda g: (np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.values, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def fn(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, ts, fn)


def take(a, index) -> Tensor:
    """``a[index]`` for basic or integer-array indexing; backward scatters with add."""
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        if _is_basic(index):
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.values[index], (a,), fn)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def scatter_rows(a, index: np.ndarray, n_rows: int) -> Tensor:
    """Place the rows of ``a`` at positions ``index`` of a zero ``(n_rows, ...)`` array.

    ``index`` must not repeat.
    """
    a = as_tensor(a)
    out = np.zeros((n_rows,) + a.shape[1:])
    out[index] = a.values
    return _make(out, (a,), lambda g: (g[index],))


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between the taped gradient of ``f`` at ``x`` and central differences.

    ``x`` is perturbed in place and restored afterwards.
    """
    analytic = _taped_grad(f, x)
    numeric = central_difference(f, x, eps)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def _taped_grad(f, x: Tensor) -> np.ndarray:
    was = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            y = f(x)
        return tape.gradients(y, [x])[0]
    finally:
        x.requires_grad = was


def central_difference(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> np.ndarray:
    if not x.values.flags.c_contiguous:
        x.values = np.ascontiguousarray(x.values)
    flat = x.values.reshape(-1)
    out = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            out[i] = (hi - lo) / (2 * eps)
    return out.reshape(x.shape)
