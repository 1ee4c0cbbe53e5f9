"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the primitives the models in this package need are provided.  Every
operation works on arrays with optional leading batch axes; a 2-D tensor is
the plain matrix case.  Matrix products accumulate over the shared axis
strictly left to right, so results are bit-reproducible and agree exactly
with a naive triple loop.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "DimensionError",
    "ContractError",
    "DeterminismError",
    "tape",
    "active_tape",
    "as_tensor",
    "matmul",
    "softmax",
    "softmax_rows",
    "swish",
    "sigmoid",
    "log",
    "clamp",
    "concat",
    "gather",
    "backward",
    "finite_diff_check",
    "adam_step",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class DeterminismError(RuntimeError):
    """Two evaluations of the same procedure disagreed."""


class Tape:
    """Ordered record of the differentiable operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict[int, Parameter] = {}

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)
        for p in node._parents:
            if isinstance(p, Parameter):
                self.params[id(p)] = p

    def clear(self) -> None:
        """Drop all records and zero the gradients of every parameter seen."""
        for p in self.params.values():
            p.zero_grad()
        self.nodes.clear()
        self.params.clear()


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextmanager
def tape():
    """Record operations issued inside the block on a fresh tape."""
    t = Tape()
    _TAPES.append(t)
    try:
        yield t
    finally:
        _TAPES.pop()


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -as_tensor(other))

    def __rsub__(self, other):
        return _add(as_tensor(other), -self)

    def __mul__(self, other):
        return _mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return _mul(self, as_tensor(1.0 / float(other)))

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, index):
        out = self.data[index]
        shape = self.data.shape

        def grad_fn(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return full

        return _unary(self, out, grad_fn)

    # shape ops ------------------------------------------------------------
    def sum(self, axis=None, keepdims=False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape)

        return _unary(self, out, grad_fn)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _unary(self, self.data.reshape(shape), lambda g: g.reshape(old))

    def transpose(self, *axes) -> "Tensor":
        """Swap the last two axes, or permute by ``axes`` when given."""
        if not axes:
            axes = tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2)
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)
        return _unary(self, self.data.transpose(axes), lambda g: g.transpose(inverse))


class Parameter(Tensor):
    """A trainable leaf with its own Adam state."""

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(np.array(data, dtype=np.float64, copy=True))
        self.name = name
        self.frozen = frozen
        self.requires_grad = not frozen
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"

    def freeze(self, frozen: bool = True) -> None:
        self.frozen = frozen
        self.requires_grad = not frozen

    def zero_grad(self) -> None:
        self.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, parents: Sequence[Tensor], grad_fns: Sequence[Callable]) -> Tensor:
    """Create an output node; record it only if some parent needs a gradient."""
    t = active_tape()
    needs = t is not None and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)

    def backward_fn(g):
        for p, fn in zip(parents, grad_fns):
            if p.requires_grad and fn is not None:
                p._accumulate(fn(g))

    out = Tensor(data, parents=parents, backward_fn=backward_fn, requires_grad=True)
    t.record(out)
    return out


def _unary(x: Tensor, out, grad_fn) -> Tensor:
    return _make(out, (x,), (grad_fn,))


def _add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(out, (a, b), (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        (lambda g: _unbroadcast(g * b.data, a.shape), lambda g: _unbroadcast(g * a.data, b.shape)),
    )


@njit(cache=True)
def _mm_kernel(a, b, out):
    # i-k-j order: each out[i, j] still sums its products left to right
    L, m, k = out.shape[0], a.shape[1], a.shape[2]
    n = b.shape[2]
    a_step = 1 if a.shape[0] > 1 else 0
    b_step = 1 if b.shape[0] > 1 else 0
    for l in range(L):
        la = l * a_step
        lb = l * b_step
        for i in range(m):
            for j in range(n):
                out[l, i, j] = 0.0
            for kk in range(k):
                aik = a[la, i, kk]
                for j in range(n):
                    out[l, i, j] += aik * b[lb, kk, j]


def _matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    if b.ndim == 2 or all(s == 1 for s in b.shape[:-2]):
        # rows are independent, so fold every leading axis of ``a`` into m
        a3 = np.ascontiguousarray(np.broadcast_to(a, lead + (m, k)).reshape(1, -1, k))
        b3 = np.ascontiguousarray(b.reshape(1, k, n))
        out = np.empty((1, a3.shape[1], n))
    else:
        L = int(np.prod(lead))
        a3 = a.reshape(1, m, k) if a.ndim == 2 else np.broadcast_to(a, lead + (m, k)).reshape(L, m, k)
        b3 = np.broadcast_to(b, lead + (k, n)).reshape(L, k, n)
        a3, b3 = np.ascontiguousarray(a3), np.ascontiguousarray(b3)
        out = np.empty((L, m, n))
    _mm_kernel(a3, b3, out)
    return out.reshape(lead + (m, n))


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = _matmul_data(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    if b.ndim == 2 and a.ndim > 2:
        k = a.shape[-1]

        def grad_b(g):
            # one long left-to-right sum over all folded rows
            return _matmul_data(a.data.reshape(-1, k).T, g.reshape(-1, g.shape[-1]))
    else:

        def grad_b(g):
            return _unbroadcast(_matmul_data(_swap(a.data), g), b.shape)

    return _make(out, (a, b), (lambda g: _unbroadcast(_matmul_data(g, _swap(b.data)), a.shape), grad_b))


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with the usual max shift."""
    x = as_tensor(x)
    if x.data.size == 0:
        raise ContractError("softmax of an empty tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _unary(x, s, grad_fn)


def softmax_rows(x) -> Tensor:
    return softmax(x, axis=-1)


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_data(x.data)
    return _unary(x, s, lambda g: g * s * (1.0 - s))


def swish(x) -> Tensor:
    """x * sigmoid(x), elementwise."""
    x = as_tensor(x)
    s = _sigmoid_data(x.data)
    out = x.data * s
    return _unary(x, out, lambda g: g * (s + out * (1.0 - s)))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.log(x.data), lambda g: g / x.data)


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip values; the gradient is zero wherever clipping was active."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _unary(x, out, lambda g: g * inside)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def slicer(i):
        lo, hi = bounds[i], bounds[i + 1]
        return lambda g: np.take(g, np.arange(lo, hi), axis=axis)

    return _make(out, tensors, [slicer(i) for i in range(len(tensors))])


def gather(table, index) -> Tensor:
    """Row lookup ``table[index]``; output shape is ``index.shape + (cols,)``."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]
    n_rows = table.shape[0]

    def grad_fn(g):
        full = np.zeros((n_rows,) + table.shape[1:])
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return full

    return _unary(table, out, grad_fn)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every parameter reachable from a scalar ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    t = active_tape()
    if t is None or not loss.requires_grad:
        return
    try:
        stop = t.nodes.index(loss) if t.nodes[-1] is not loss else len(t.nodes) - 1
    except ValueError:
        raise ContractError("loss was not produced on the active tape") from None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(t.nodes[: stop + 1]):
        if node.grad is not None and node._backward_fn is not None:
            node._backward_fn(node.grad)
    # free intermediate buffers; parameter gradients stay
    for node in t.nodes:
        node.grad = None
        node._backward_fn = None
    t.nodes.clear()


def finite_diff_check(
    forward: Callable[[], Tensor],
    param: Parameter,
    epsilon: float = 1e-6,
    max_coords: int | None = 64,
    seed: int = 0,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``forward`` rebuilds the scalar loss from current parameter values.  When
    ``param`` has more than ``max_coords`` entries a seeded subset is probed.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ContractError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    first = forward().item()
    second = forward().item()
    if first != second:
        raise DeterminismError(f"forward gave {first!r} then {second!r}")

    was_frozen = param.frozen
    param.freeze(False)
    try:
        with tape() as t:
            loss = forward()
            # leave every gradient as we found it
            saved = {id(p): (p, p.grad) for p in [param, *t.params.values()]}
            param.zero_grad()
            backward(loss)
        analytic = np.zeros_like(param.data) if param.grad is None else param.grad.copy()
    finally:
        for p, g in saved.values():
            p.grad = g
        param.freeze(was_frozen)

    flat = param.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False))
    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = forward().item()
        flat[i] = orig - epsilon
        f_minus = forward().item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return float(worst)


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; clears gradients afterwards."""
    for p in params:
        if p.frozen:
            p.zero_grad()
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1**p.step_count)
        v_hat = p.adam_v / (1.0 - beta2**p.step_count)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    for p in params:
        if not p.frozen and p.grad is not None:
            p.data -= lr * p.grad
        p.zero_grad()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
