"""A small reverse-mode differentiation tape over numpy arrays.

Only the operations the flows need are supported.  Operations are recorded
while a :class:`Tape` is active and at least one input is tracked (a
:class:`Parameter` or the output of a recorded operation).  Outside a tape,
every operation is a plain numpy evaluation.

    with Tape() as tape:
        loss = ...
    grads = tape.backward(loss, params)
"""
from __future__ import annotations

import threading

import numpy as np
from scipy.linalg import solve_triangular

from . import rq_spline as _rq
from .errors import GraphError, ShapeError

_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that may be tracked by the active tape."""

    __slots__ = ("value", "tracked", "name", "__weakref__")

    def __init__(self, value, tracked=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tracked = tracked
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<{type(self).__name__}{label} shape={self.shape}>"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, value, name=None):
        super().__init__(np.array(value, dtype=np.float64), tracked=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Entry:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Records operations in execution order for one backward pass."""

    def __init__(self):
        self.entries = []
        self._produced = set()

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, inputs, outputs, backward):
        self.entries.append(_Entry(inputs, outputs, backward))
        for out in outputs:
            self._produced.add(id(out))

    def backward(self, loss: Tensor, params=None):
        """Gradients of a scalar ``loss`` w.r.t. ``params`` (all reached leaves if None).

        Returns a list aligned with ``params``, or a dict keyed by parameter
        when ``params`` is None.  Unreached parameters get zero gradients.
        """
        if not isinstance(loss, Tensor) or id(loss) not in self._produced:
            raise GraphError("loss was not produced by an operation on this tape")
        if loss.value.size != 1:
            raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.value)}
        leaves = {}
        for entry in reversed(self.entries):
            g_out = [grads.get(id(o)) for o in entry.outputs]
            if all(g is None for g in g_out):
                continue
            g_out = [np.zeros_like(o.value) if g is None else g for o, g in zip(entry.outputs, g_out)]
            g_in = entry.backward(*g_out)
            for inp, g in zip(entry.inputs, g_in):
                if g is None or not inp.tracked:
                    continue
                key = id(inp)
                grads[key] = grads[key] + g if key in grads else g
                if isinstance(inp, Parameter):
                    leaves[key] = inp
        if params is None:
            return {p: grads[k] for k, p in leaves.items()}
        return [grads.get(id(p), np.zeros_like(p.value)) for p in params]


def _op(inputs, outputs, backward):
    """Register ``outputs`` of an operation on the active tape if needed."""
    tape = _active_tape()
    if tape is None or not any(t.tracked for t in inputs):
        return outputs
    for out in outputs:
        out.tracked = True
    tape.record(inputs, outputs, backward)
    return outputs


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value + b.value)
    _op([a, b], [out], lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value - b.value)
    _op([a, b], [out], lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value * b.value)
    _op(
        [a, b],
        [out],
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )
    return out


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value / b.value)
    _op(
        [a, b],
        [out],
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out.value / b.value, b.shape),
        ),
    )
    return out


def square(a):
    a = as_tensor(a)
    out = Tensor(a.value * a.value)
    _op([a], [out], lambda g: (2.0 * g * a.value,))
    return out


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.value))
    _op([a], [out], lambda g: (g * out.value,))
    return out


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.value))
    _op([a], [out], lambda g: (g / a.value,))
    return out


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.value, 0.0))
    _op([a], [out], lambda g: (g * (a.value > 0),))
    return out


def softplus(a):
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.value))
    _op([a], [out], lambda g: (g * np.exp(-np.logaddexp(0.0, -a.value)),))
    return out


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)
    _op([a], [out], lambda g: (p * (g - np.sum(g * p, axis=axis, keepdims=True)),))
    return out


def dropout(a, p, rng):
    """Inverted dropout: zero with probability ``p`` and rescale survivors."""
    a = as_tensor(a)
    if p <= 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, mask)


# -- reductions and shape ----------------------------------------------------


def sum_(a, axis=None):
    a = as_tensor(a)
    out = Tensor(np.sum(a.value, axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    _op([a], [out], backward)
    return out


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.value.reshape(shape))
    _op([a], [out], lambda g: (g.reshape(a.shape),))
    return out


def getitem(a, index):
    a = as_tensor(a)
    out = Tensor(a.value[index])

    def backward(g):
        full = np.zeros_like(a.value)
        if _is_basic(index):
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    _op([a], [out], backward)
    return out


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis))
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    _op(tensors, [out], lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def scatter(values, shape, index):
    """Place a flat vector into a zero array of ``shape`` at ``index``."""
    values = as_tensor(values)
    full = np.zeros(shape)
    full[index] = values.value
    out = Tensor(full)
    _op([values], [out], lambda g: (g[index],))
    return out


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = Tensor(a.value @ b.value)
    _op([a, b], [out], lambda g: (g @ b.value.T, a.value.T @ g))
    return out


def tri_solve(matrix, rows, lower, unit_diagonal=False):
    """Solve ``matrix @ x = r`` for every row ``r`` of ``rows``."""
    matrix, rows = as_tensor(matrix), as_tensor(rows)
    a = matrix.value
    x = solve_triangular(a, rows.value.T, lower=lower, unit_diagonal=unit_diagonal).T
    out = Tensor(x)

    def backward(g):
        g_rows = solve_triangular(a, g.T, lower=lower, trans="T", unit_diagonal=unit_diagonal).T
        g_mat = -g_rows.T @ x
        g_mat = np.tril(g_mat, -1 if unit_diagonal else 0) if lower else np.triu(
            g_mat, 1 if unit_diagonal else 0
        )
        return g_mat, g_rows

    _op([matrix, rows], [out], backward)
    return out


# -- spline ------------------------------------------------------------------


def rq_spline(x, theta, tail_bound=_rq.DEFAULT_TAIL_BOUND, inverse=False):
    """Elementwise spline transform of ``x`` with raw parameters ``theta``.

    ``theta`` has shape ``(..., 3K - 1)`` broadcastable against ``x``.
    Returns ``(output, log_abs_det)`` tensors shaped like the broadcast input.
    """
    x, theta = as_tensor(x), as_tensor(theta)
    if inverse:
        y, logdet, cache = _rq.rq_transform_inverse(x.value, theta.value, tail_bound)
        vjp = _rq.rq_transform_inverse_vjp
    else:
        y, logdet, cache = _rq.rq_transform(x.value, theta.value, tail_bound)
        vjp = _rq.rq_transform_vjp
    out, out_ld = Tensor(y), Tensor(logdet)

    def backward(g_y, g_ld):
        g_x, g_theta = vjp(cache, g_y, g_ld)
        return _unbroadcast(g_x, x.shape), _unbroadcast(g_theta, theta.shape)

    _op([x, theta], [out, out_ld], backward)
    return out, out_ld
