"""A small tape-based reverse-mode autodiff engine over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in execution
order; :meth:`Tape.backward` walks them in reverse and accumulates gradients
into leaf tensors created with ``requires_grad=True``. Without an active tape
the same functions run as plain numpy code, which is what inference uses.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


_DEBUG = False


def set_debug(flag: bool) -> None:
    """Check every forward result for non-finite values."""
    global _DEBUG
    _DEBUG = bool(flag)


class ShapeError(ValueError):
    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(f"{kind}: {message}")


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_recorded")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name
        self._recorded = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def exp(self): return exp(self)
    def log(self): return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate ``d loss / d leaf`` into every reachable leaf's ``grad``."""
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ValueError("backward called on an empty tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        if not loss._recorded and loss.requires_grad:
            loss.grad += 1.0
            return
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._recorded:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    inp.grad += gi


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    tape = tape or (_tape_stack()[-1] if _tape_stack() else None)
    if tape is None:
        raise ValueError("no tape recorded the loss; build it inside `with Tape():`")
    tape.backward(loss)


def _make(value, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    stack = _tape_stack()
    needs = bool(stack) and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.requires_grad = needs
    out.grad = None
    out.name = None
    out._recorded = needs
    if _DEBUG and not np.all(np.isfinite(value)):
        raise FloatingPointError("non-finite value produced in forward pass")
    if needs:
        stack[-1].nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


_ROW_BLOCK = 16


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Rows are multiplied in zero-padded blocks of fixed height so every row goes
    # through the same kernel path: a row's result never depends on how many
    # other rows share the call.
    if b.ndim == 2 and a.ndim >= 2:
        a2 = a.reshape(-1, a.shape[-1])
        n = a2.shape[0]
        pad = -n % _ROW_BLOCK
        if pad:
            a2 = np.concatenate([a2, np.zeros((pad, a2.shape[1]))])
        r = np.matmul(a2.reshape(-1, _ROW_BLOCK, a2.shape[1]), b).reshape(-1, b.shape[-1])[:n]
        return r.reshape(a.shape[:-1] + (b.shape[-1],))
    return np.matmul(a, b)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        v = a.value + b.value
    except ValueError as err:
        raise ShapeError("add", str(err)) from None
    return _make(v, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        v = a.value - b.value
    except ValueError as err:
        raise ShapeError("sub", str(err)) from None
    return _make(v, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        v = a.value * b.value
    except ValueError as err:
        raise ShapeError("mul", str(err)) from None
    return _make(v, (a, b), lambda g: (_unbroadcast(g * b.value, a.shape),
                                       _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        v = a.value / b.value
    except ValueError as err:
        raise ShapeError("div", str(err)) from None
    return _make(v, (a, b), lambda g: (_unbroadcast(g / b.value, a.shape),
                                       _unbroadcast(-g * v / b.value, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    v = a.value ** p
    return _make(v, (a,), lambda g: (g * p * a.value ** (p - 1.0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    v = np.sqrt(a.value)
    return _make(v, (a,), lambda g: (0.5 * g / v,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    v = np.exp(a.value)
    return _make(v, (a,), lambda g: (g * v,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    v = np.tanh(a.value)
    return _make(v, (a,), lambda g: (g * (1.0 - v * v),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    v = _sigmoid(a.value)
    return _make(v, (a,), lambda g: (g * v * (1.0 - v),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.value)
    return _make(a.value * s, (a,), lambda g: (g * s * (1.0 + a.value * (1.0 - s)),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    v = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(v, (a,), lambda g: (g * _sigmoid(x),))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` (a constant boolean array) holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    v = np.where(cond, a.value, b.value)
    return _make(v, (a, b), lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                                       _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", "operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        v = _mm(a.value, b.value)
    except ValueError as err:
        raise ShapeError("matmul", str(err)) from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape) if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        if b.ndim == 2:
            gb = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return _make(v, (a, b), bw)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    v = a.value.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(v, dtype=np.float64), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        v = a.value.reshape(shape)
    except ValueError as err:
        raise ShapeError("reshape", str(err)) from None
    return _make(v, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.value, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        v = np.broadcast_to(a.value, shape)
    except ValueError as err:
        raise ShapeError("broadcast", str(err)) from None
    return _make(v, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        v = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeError("concat", str(err)) from None
    ax = axis % v.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        out = []
        for k in range(len(ts)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(bounds[k], bounds[k + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(v, ts, bw)


def getitem(a, idx) -> Tensor:
    """Indexing (basic or advanced); advanced-index gradients are scatter-added."""
    a = as_tensor(a)
    try:
        v = a.value[idx]
    except (IndexError, ValueError) as err:
        raise ShapeError("slice", str(err)) from None

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(v, dtype=np.float64), (a,), bw)


# ---------------------------------------------------------------- composite kernels

def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax; entries where ``mask`` is False get exactly zero weight."""
    a = as_tensor(a)
    x = a.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: every slice needs at least one unmasked entry")
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    v = e / e.sum(axis=axis, keepdims=True)
    return _make(v, (a,), lambda g: (v * (g - (g * v).sum(axis=axis, keepdims=True)),))


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine part)."""
    a = as_tensor(a)
    mu = a.value.mean(axis=-1, keepdims=True)
    xc = a.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), bw)


_KINDS: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul, "concat": None,
    "slice": getitem, "exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid,
    "softmax": softmax, "sum": tsum, "mean": mean, "broadcast": broadcast_to,
    "reshape": reshape, "transpose": transpose, "where": where, "silu": silu, "softplus": softplus,
    "layer_norm": layer_norm, "sqrt": sqrt, "square": square, "neg": neg, "pow": power,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by name, e.g. ``forward_op("softmax", x, axis=-1)``."""
    if kind == "concat":
        return concat(inputs, **kwargs)
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- parameters

class ParameterStore:
    """Named trainable tensors in insertion order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def n_values(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self._params) - set(state)
        unknown = set(state) - set(self._params)
        if missing or unknown:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for k, t in self._params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {t.shape}")
            t.value = v.copy()
            t.grad = np.zeros_like(t.value)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((t.grad ** 2).sum()) for t in self._params.values())))


def value_and_grad(f: Callable[[], Tensor], store: ParameterStore) -> tuple[float, dict[str, np.ndarray]]:
    store.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    return float(loss.value), {k: t.grad.copy() for k, t in store.items()}


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    tolerance: float
    deviations: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    absolute_failures: dict[str, float] = field(default_factory=dict)

    @property
    def max_deviation(self) -> float:
        return max(self.deviations.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_deviation < self.tolerance and not self.absolute_failures

    def failures(self) -> list[str]:
        bad = [k for k, d in self.deviations.items() if d >= self.tolerance]
        return bad + [k for k in self.absolute_failures if k not in bad]

    def summary(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return (f"{state}: max relative deviation {self.max_deviation:.3e} over "
                f"{len(self.deviations)} tensors ({sum(self.checked.values())} entries), "
                f"tolerance {self.tolerance:g}")


def grad_check(f: Callable[[], Tensor], params, tolerance: float = 1e-4, eps: float = 1e-5,
               grad_floor: float = 1e-6, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``f`` must rebuild the scalar loss from the current parameter values with any
    randomness frozen. ``params`` is a :class:`ParameterStore` or a mapping /
    iterable of tensors. The relative deviation ``|a - n| / max(|a|, |n|)`` is
    taken over entries whose gradient magnitude exceeds ``grad_floor``; smaller
    entries only have to agree to within ``grad_floor`` absolutely. With
    ``max_entries`` set, that many randomly chosen entries per tensor are checked.
    """
    if isinstance(params, ParameterStore):
        named = list(params.items())
    elif isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(t.name or f"param{i}", t) for i, t in enumerate(params)]
    for _, t in named:
        t.grad = np.zeros_like(t.value)
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(tolerance)
    for name, t in named:
        analytic = t.grad.reshape(-1).copy()
        flat = t.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for n, j in enumerate(idx):
            orig = flat[j]
            flat[j] = orig + eps
            up = float(f().value)
            flat[j] = orig - eps
            down = float(f().value)
            flat[j] = orig
            numeric[n] = (up - down) / (2.0 * eps)
        a = analytic[idx]
        scale = np.maximum(np.abs(a), np.abs(numeric))
        big = scale > grad_floor
        rel = np.abs(a - numeric)[big] / scale[big]
        report.deviations[name] = float(rel.max()) if rel.size else 0.0
        report.checked[name] = int(idx.size)
        small_err = np.abs(a - numeric)[~big]
        if small_err.size and small_err.max() > grad_floor:
            report.absolute_failures[name] = float(small_err.max())
    return report
