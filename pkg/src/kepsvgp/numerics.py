"""Dense arithmetic, linear-algebra oracles, seeded sampling and a reverse-mode tape.

Arrays are plain ``numpy.ndarray`` values (float64 unless single precision is
requested).  Trainable quantities are wrapped in :class:`Tensor`, and every
primitive applied to a tensor while a :class:`GradTape` is active is recorded
together with its hand-written gradient rule.  ``tape.gradient`` replays the
records backwards.

>>> w = Tensor([1.0, 2.0], requires_grad=True)
>>> with GradTape() as tape:
...     loss = (w * w).sum()
>>> tape.gradient(loss, [w])[0]
array([2., 4.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConvergenceFailure, NonFiniteObjective, NotPositiveDefinite, ShapeMismatch

DEFAULT_DTYPE = np.float64

_local = threading.local()


def _tapes():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class GradTape:
    """Records primitives applied to tensors with ``requires_grad`` set.

    Tapes are per thread.  Nesting is allowed; each active tape records
    every primitive.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def _record(self, out, parents, backward):
        self._records.append((out, parents, backward))

    def gradient(self, target, sources):
        """Gradients of scalar ``target`` w.r.t. each tensor in ``sources``.

        Sources that do not influence the target get an all-zero gradient.
        """
        target = _t(target)
        grads = {id(target): np.ones_like(target.data)}
        for out, parents, backward in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for p, pg in zip(parents, backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        return [np.asarray(grads.get(id(s), np.zeros_like(s.data)), dtype=s.data.dtype) for s in sources]


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "name")
    __array_ufunc__ = None  # make ndarray operators defer to Tensor

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    # array protocol -------------------------------------------------------
    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # operators ------------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward):
    out = Tensor(value)
    tapes = _tapes()
    if tapes and any(p.requires_grad for p in parents):
        out.requires_grad = True
        for tape in tapes:
            tape._record(out, parents, backward)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise ----------------------------------------------------------------
def add(a, b):
    a, b = _t(a), _t(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _t(a), _t(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _t(a), _t(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = _t(a), _t(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a):
    a = _t(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    a = _t(a)
    p = float(p)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    a = _t(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = _t(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _t(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def tanh(a):
    a = _t(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp_min(a, floor):
    """max(a, floor) for a constant floor; no gradient flows where clamped."""
    a = _t(a)
    keep = a.data > floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def gelu(a):
    a = _t(a)
    c = np.sqrt(2.0 / np.pi)
    x = a.data
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


# reductions and shape ops -------------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    a = _t(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _t(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) / count


def reshape(a, shape):
    a = _t(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = _t(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    a = _t(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def expand_dims(a, axis):
    a = _t(a)
    return _make(np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx):
    a = _t(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def take_rows(table, ids):
    """Gather rows of a 2-D ``table`` by integer ``ids`` of any shape."""
    table = _t(table)
    ids = np.asarray(ids)

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], (table,), backward)


def concat(tensors, axis=0):
    tensors = [_t(x) for x in tensors]
    out = np.concatenate([x.data for x in tensors], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [_t(x) for x in tensors]
    out = np.stack([x.data for x in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward)


def matmul(a, b):
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


# fused numerically sensitive primitives -----------------------------------------
def softmax(a, axis=-1):
    a = _t(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    a = _t(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)
    return _make(out, (a,), lambda g: (g - y * g.sum(axis=axis, keepdims=True),))


def l2_normalize(a, eps=1e-8, axis=-1):
    """x / max(||x||, eps) along ``axis``."""
    a = _t(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    y = x / denom

    def backward(g):
        radial = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(big, (g - y * radial) / denom, g / eps),)

    return _make(y, (a,), backward)


# linear-algebra oracles ---------------------------------------------------------
def cholesky(A, sym_tol=1e-10):
    """Lower-triangular ``L`` with ``A = L @ L.T``."""
    A = np.asarray(A, dtype=DEFAULT_DTYPE)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"cholesky needs a square matrix, got {A.shape}")
    if np.max(np.abs(A - A.T), initial=0.0) > sym_tol * max(1.0, np.max(np.abs(A), initial=0.0)):
        raise NotPositiveDefinite("matrix is not symmetric")
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def svd(A):
    """Thin SVD ``A = U @ diag(S) @ V.T`` with ``S`` descending."""
    A = np.asarray(A, dtype=DEFAULT_DTYPE)
    if not np.all(np.isfinite(A)):
        raise ValueError("svd input must be finite")
    try:
        U, S, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from None
    return U, S, Vt.T


# randomness ---------------------------------------------------------------------
def make_rng(seed):
    """Philox-4x64 counter-based generator; streams are reproducible given the seed."""
    return np.random.Generator(np.random.Philox(seed))


def rng_state(rng):
    return rng.bit_generator.state


def rng_from_state(state):
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)


def sample_standard_normal(shape, rng, dtype=DEFAULT_DTYPE):
    return rng.standard_normal(shape, dtype=dtype)


# gradient checking ---------------------------------------------------------------
@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def worst(self):
        return max(self.errors.items(), key=lambda kv: kv[1])

    def passed(self, tol):
        return self.max_error < tol


def grad_check(
    objective: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients against central differences, parameter by parameter.

    The error per entry is ``|analytic - numeric| / max(1, |numeric|)``; the
    report keeps the maximum for each parameter.  ``objective`` must be a
    deterministic function of ``params`` (fix any noise before calling).
    """
    names = list(names) if names is not None else list(params)
    tensors = [params[n] for n in names]
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
    try:
        with GradTape() as tape:
            value = objective(params)
        if not np.isfinite(value.data).all():
            raise NonFiniteObjective(f"objective is {value.data}")
        analytic = tape.gradient(value, tensors)
    finally:
        for t, f in zip(tensors, flags):
            t.requires_grad = f

    def f():
        v = float(np.asarray(objective(params).data))
        if not np.isfinite(v):
            raise NonFiniteObjective(f"objective is {v} under perturbation")
        return v

    report = GradCheckReport()
    for name, t, ga in zip(names, tensors, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(num)))
        report.errors[name] = worst
    return report
