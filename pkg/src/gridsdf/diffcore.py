"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every operation whose inputs carry a node id on it.
Operations on constants only are evaluated eagerly and never recorded, so the
same code path serves training (under a tape) and pure evaluation (no tape).

Broadcasting follows numpy rules; backward sums over broadcast axes.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Parameter", "ShapeError", "GradCheckFailure",
    "active_tape", "custom_op", "constant",
    "add", "subtract", "multiply", "divide", "negative", "matmul",
    "sum", "mean", "exp", "log", "sigmoid", "softplus", "absolute", "square",
    "sqrt", "l2_norm", "maximum_scalar", "concatenate", "gather_rows",
    "sin", "cos", "reshape", "transpose", "getitem", "cumprod_exclusive",
    "stop_gradient", "no_tape", "grad_check", "grad_check_parameter",
]


class ShapeError(ValueError):
    pass


class GradCheckFailure(ArithmeticError):
    def __init__(self, message: str, index: tuple[int, ...]):
        super().__init__(message)
        self.index = index


_TAPES: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Immutable array, optionally bound to a node on a tape."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100.0

    def __init__(self, data, node: int | None = None, tape: "Tape | None" = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return subtract(self, o)
    def __rsub__(self, o): return subtract(o, self)
    def __mul__(self, o): return multiply(self, o)
    def __rmul__(self, o): return multiply(o, self)
    def __truediv__(self, o): return divide(self, o)
    def __rtruediv__(self, o): return divide(o, self)
    def __neg__(self): return negative(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None): return sum(self, axis)
    def mean(self, axis=None): return mean(self, axis)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self): return transpose(self)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Parameter:
    """Trainable array with gradient accumulator and Adam moments."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def tensor(self) -> Tensor:
        """Leaf tensor on the active tape, or a constant when none is active."""
        tape = active_tape()
        if tape is None:
            return Tensor(self.value.view())
        return tape.watch(self)


@dataclass
class _Node:
    kind: str
    inputs: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]
    param: Parameter | None = None


class Tape:
    """Append-only operation record; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._watched: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        # vjp closures hold tensors that point back here; drop them so the
        # recorded activations are freed without waiting for the cycle collector
        for node in self.nodes:
            node.vjp = None
        return False

    def watch(self, x) -> Tensor:
        """Register a leaf. Accepts a Parameter (grad flows to it) or an array."""
        if isinstance(x, Parameter):
            nid = self._watched.get(id(x))
            if nid is not None:
                return Tensor(x.value.view(), nid, self)
            data = x.value.view()
            nid = self._append(_Node("leaf", (), None, data.shape, x))
            self._watched[id(x)] = nid
            return Tensor(data, nid, self)
        data = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        nid = self._append(_Node("leaf", (), None, data.shape))
        return Tensor(data, nid, self)

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def record(self, kind, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        nid = self._append(_Node(kind, ids, vjp, out.shape))
        return Tensor(out, nid, self)

    def backward(self, root: Tensor) -> dict[str, np.ndarray]:
        """Populate gradients of ``root`` for every node; return per-parameter grads."""
        if root.tape is not self or root.node is None:
            raise ValueError("backward root is not recorded on this tape")
        if self not in _TAPES:
            raise ValueError("backward must run inside the tape context")
        if root.size != 1:
            raise ShapeError(f"backward root must be a scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.node: np.ones(root.shape)}
        for nid in range(root.node, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                continue
            if nid != root.node:
                del grads[nid]  # intermediate cotangents are not retained
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if inp is None or ig is None:
                    continue
                prev = grads.get(inp)
                grads[inp] = ig if prev is None else prev + ig
        self.grads = grads
        out = {}
        for node_id, node in enumerate(self.nodes):
            if node.param is not None:
                g = grads.get(node_id)
                node.param.grad[...] = 0.0 if g is None else g
                out[node.param.name] = node.param.grad
        return out

    def grad(self, t: Tensor) -> np.ndarray:
        if t.tape is not self or t.node is None:
            raise ValueError("tensor is not recorded on this tape")
        g = self.grads.get(t.node)
        return np.zeros(t.shape) if g is None else g


def _tracked(inputs: Sequence[Tensor]) -> "Tape | None":
    tape = None
    for t in inputs:
        if t.node is not None:
            if t.tape not in _TAPES:
                raise ValueError("tensor belongs to a tape that is no longer active")
            if tape is not None and t.tape is not tape:
                raise ValueError("inputs recorded on different tapes")
            tape = t.tape
    return tape


def custom_op(kind: str, inputs: Sequence[Tensor], out: np.ndarray,
              vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Record a user-defined operation. ``vjp(g)`` returns one grad per input."""
    tape = _tracked(inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(kind, inputs, out, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shapes(kind, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return custom_op("add", (a, b), a.data + b.data,
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def subtract(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shapes("subtract", a, b)
    sa, sb = a.shape, b.shape
    return custom_op("subtract", (a, b), a.data - b.data,
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def multiply(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shapes("multiply", a, b)
    ad, bd = a.data, b.data
    return custom_op("multiply", (a, b), ad * bd,
                     lambda g: (_unbroadcast(g * bd, ad.shape) if a.node is not None else None,
                                _unbroadcast(g * ad, bd.shape) if b.node is not None else None))


def divide(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shapes("divide", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return custom_op("divide", (a, b), out,
                     lambda g: (_unbroadcast(g / bd, ad.shape) if a.node is not None else None,
                                _unbroadcast(-g * out / bd, bd.shape) if b.node is not None else None))


def negative(a) -> Tensor:
    a = constant(a)
    return custom_op("negative", (a,), -a.data, lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` 2-D; ``a`` may carry leading batch axes."""
    a, b = constant(a), constant(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ bd.T if a.node is not None else None
        gb = None
        if b.node is not None:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return custom_op("matmul", (a, b), ad @ bd, vjp)


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = constant(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return custom_op("sum", (a,), np.asarray(out, dtype=np.float64), vjp)


def mean(a, axis=None) -> Tensor:
    a = constant(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return multiply(sum(a, axis), 1.0 / n)


def _unary(kind, a, out, dfn):
    a = constant(a)
    return custom_op(kind, (a,), out, lambda g: (g * dfn(),))


def exp(a) -> Tensor:
    a = constant(a)
    out = np.exp(a.data)
    return _unary("exp", a, out, lambda: out)


def log(a) -> Tensor:
    a = constant(a)
    return _unary("log", a, np.log(a.data), lambda: 1.0 / a.data)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


def sigmoid(a) -> Tensor:
    a = constant(a)
    out = _sigmoid(a.data)
    return _unary("sigmoid", a, out, lambda: out * (1.0 - out))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated stably; the derivative is the logistic sigmoid."""
    a = constant(a)
    x = a.data
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    out = np.maximum(x, 0.0) - np.log(r)
    return _unary("softplus", a, out, lambda: np.where(x >= 0, r, e * r))


def absolute(a) -> Tensor:
    a = constant(a)
    return _unary("absolute", a, np.abs(a.data), lambda: np.sign(a.data))


def square(a) -> Tensor:
    a = constant(a)
    return _unary("square", a, a.data * a.data, lambda: 2.0 * a.data)


def sqrt(a) -> Tensor:
    a = constant(a)
    out = np.sqrt(a.data)

    def d():
        with np.errstate(divide="ignore"):
            return np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)

    return _unary("sqrt", a, out, d)


def l2_norm(a) -> Tensor:
    """Euclidean norm along the last axis; subgradient 0 at the origin."""
    a = constant(a)
    x = a.data
    out = np.sqrt(np.sum(x * x, axis=-1))

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return ((g / safe * (out > 0))[..., None] * x,)

    return custom_op("l2_norm", (a,), out, vjp)


def maximum_scalar(a, c: float) -> Tensor:
    """max(a, c); subgradient 0 on ties."""
    a = constant(a)
    mask = a.data > c
    return custom_op("maximum_scalar", (a,), np.where(mask, a.data, c),
                     lambda g: (g * mask,))


def concatenate(parts: Sequence) -> Tensor:
    """Concatenate along the last axis; leading axes must agree."""
    parts = [constant(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concatenate: leading shapes differ, {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[-1] for p in parts]
    edges = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=-1)

    def vjp(g):
        return tuple(g[..., edges[i]:edges[i + 1]] for i in range(len(parts)))

    return custom_op("concatenate", parts, out, vjp)


def gather_rows(a, index) -> Tensor:
    """Rows ``a[index]`` along axis 0; backward scatters with accumulation."""
    a = constant(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return custom_op("gather_rows", (a,), a.data[idx], vjp)


def sin(a) -> Tensor:
    a = constant(a)
    return _unary("sin", a, np.sin(a.data), lambda: np.cos(a.data))


def cos(a) -> Tensor:
    a = constant(a)
    return _unary("cos", a, np.cos(a.data), lambda: -np.sin(a.data))


def reshape(a, shape) -> Tensor:
    a = constant(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return custom_op("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = constant(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op("transpose", (a,), np.transpose(a.data, axes),
                     lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = constant(a)
    shape = a.shape

    advanced = any(isinstance(i, (list, np.ndarray)) for i in
                   (idx if isinstance(idx, tuple) else (idx,)))

    def vjp(g):
        out = np.zeros(shape)
        if advanced:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return custom_op("getitem", (a,), np.asarray(a.data[idx]), vjp)


def cumprod_exclusive(a) -> Tensor:
    """``out[..., i] = prod(a[..., :i])`` along the last axis (``out[..., 0] = 1``).

    The backward pass avoids dividing by ``a`` so zero factors are handled exactly.
    """
    a = constant(a)
    x = a.data
    out = np.ones_like(x)
    if x.shape[-1] > 1:
        out[..., 1:] = np.cumprod(x[..., :-1], axis=-1)

    def vjp(g):
        n = x.shape[-1]
        acc = np.zeros(x.shape[:-1])
        gx = np.zeros_like(x)
        for j in range(n - 2, -1, -1):
            acc = g[..., j + 1] + x[..., j + 1] * acc
            gx[..., j] = out[..., j] * acc
        return (gx,)

    return custom_op("cumprod_exclusive", (a,), out, vjp)


def stop_gradient(a) -> Tensor:
    return Tensor(constant(a).data)


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Temporarily evaluate without recording (parameters become constants)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5,
               indices: Sequence[tuple[int, ...]] | None = None) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    Relative error is ``|analytic - numeric| / max(1, |numeric|)``. ``indices``
    restricts the comparison to a subset of components of ``x``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with Tape() as tape:
        leaf = tape.watch(x0)
        y = f(leaf)
        if y.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got {y.shape}")
        if not np.all(np.isfinite(y.data)):
            raise GradCheckFailure("non-finite function value", ())
        tape.backward(y)
        analytic = tape.grad(leaf)
    bad = np.argwhere(~np.isfinite(analytic))
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise GradCheckFailure(f"non-finite analytic gradient at {idx}", idx)
    if indices is None:
        indices = list(np.ndindex(*x0.shape))
    worst = 0.0
    with no_tape():
        for idx in indices:
            idx = tuple(int(i) for i in idx)
            xp = x0.copy()
            xp[idx] += step
            xm = x0.copy()
            xm[idx] -= step
            fp = f(Tensor(xp)).item()
            fm = f(Tensor(xm)).item()
            num = (fp - fm) / (2.0 * step)
            if not np.isfinite(num):
                raise GradCheckFailure(f"non-finite finite difference at {idx}", idx)
            err = abs(analytic[idx] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


def grad_check_parameter(loss: Callable[[], Tensor], param: Parameter, step: float = 1e-5,
                         indices: Sequence[tuple[int, ...]] | None = None) -> float:
    """Like :func:`grad_check` but perturbs ``param.value`` in place for a closure ``loss``."""
    with Tape() as tape:
        y = loss()
        tape.backward(y)
    analytic = param.grad.copy()
    if tape._watched.get(id(param)) is None:
        analytic[...] = 0.0
    if indices is None:
        indices = list(np.ndindex(*param.shape))
    worst = 0.0
    with no_tape():
        for idx in indices:
            idx = tuple(int(i) for i in idx)
            orig = param.value[idx]
            param.value[idx] = orig + step
            fp = loss().item()
            param.value[idx] = orig - step
            fm = loss().item()
            param.value[idx] = orig
            num = (fp - fm) / (2.0 * step)
            if not (np.isfinite(num) and np.isfinite(analytic[idx])):
                raise GradCheckFailure(f"non-finite gradient at {idx}", idx)
            worst = max(worst, abs(analytic[idx] - num) / max(1.0, abs(num)))
    return worst
