"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every op is a plain function taking :class:`Tensor` (or array-like) operands.
Outside a :class:`Tape` context the ops evaluate eagerly with no bookkeeping,
which is the path used for rendering and evaluation. Inside a tape, any op
with a tracked operand appends a node whose backward closure is replayed in
strict reverse insertion order by :meth:`Tape.backward`.

Example:
    >>> w = Parameter(np.array([3.0]), name="w")
    >>> with Tape() as tape:
    ...     loss = sum_(square(w))
    ...     grads = tape.backward(loss)
    >>> float(grads[w][0])
    6.0
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

DEBUG = os.environ.get("KALMANFIELD_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(ValueError):
    """A non-finite value reached an op (debug builds) or a gradient check."""


class Tensor:
    """Dense float64 value, optionally tracked on the active tape."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100

    def __init__(self, data, node: int | None = None, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
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
        return float(self.data)

    def __repr__(self) -> str:
        tracked = "" if self.node is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tracked})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


class Parameter(Tensor):
    """A trainable leaf. It joins whichever tape first uses it."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64, copy=True))
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"

    # identity semantics so parameters can key gradient dicts
    __hash__ = object.__hash__

    def __eq__(self, other):
        return self is other


@dataclass
class _Node:
    kind: str
    inputs: tuple[int | None, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]


@dataclass
class Tape:
    """Append-only record of tracked ops for one forward/backward pass.

    A tape is single-writer. Parameters are shared read-only across tapes;
    each tape assigns a parameter its own leaf node on first use.
    """

    nodes: list[_Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)
    _param_nodes: dict[int, int] = field(default_factory=dict)
    _params: dict[int, Parameter] = field(default_factory=dict)
    _done: bool = False

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _STACK.pop()
        assert popped is self

    # -- recording -------------------------------------------------------
    def node_of(self, t) -> int | None:
        if not isinstance(t, Tensor):
            return None
        if isinstance(t, Parameter):
            key = id(t)
            nid = self._param_nodes.get(key)
            if nid is None:
                nid = self._append(_Node("param", (), None, t.shape))
                self._param_nodes[key] = nid
                self._params[nid] = t
            return nid
        if t.tape is self:
            return t.node
        return None

    def watch(self, value) -> Tensor:
        """Return a tracked leaf holding ``value`` (used for input gradients)."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        nid = self._append(_Node("leaf", (), None, data.shape))
        return Tensor(data, nid, self)

    def _append(self, node: _Node) -> int:
        if self._done:
            raise RuntimeError("tape already consumed by backward(); build a new tape")
        self.nodes.append(node)
        return len(self.nodes) - 1

    # -- reverse pass ----------------------------------------------------
    def backward(self, loss: Tensor) -> dict[Parameter, np.ndarray]:
        """Backpropagate a scalar loss. Returns gradients keyed by parameter.

        Gradients of leaves (parameters and watched inputs) stay available
        via :meth:`grad`; intermediate gradients are freed as they are consumed.
        """
        nid = self.node_of(loss) if isinstance(loss, Tensor) else None
        if nid is None:
            raise ValueError("backward() needs a tensor tracked on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads = self.grads
        grads.clear()
        grads[nid] = np.ones(loss.shape)
        for k in range(nid, -1, -1):
            node = self.nodes[k]
            if node.backward is None:
                continue
            g = grads.pop(k, None)
            if g is None:
                continue
            ins = node.backward(g)
            for src, gi in zip(node.inputs, ins):
                if src is None or gi is None:
                    continue
                prev = grads.get(src)
                grads[src] = gi if prev is None else prev + gi
        self._done = True
        out = {}
        for pid, param in self._params.items():
            g = grads.get(pid)
            out[param] = np.zeros(param.shape) if g is None else g
        return out

    def grad(self, t: Tensor) -> np.ndarray:
        nid = self.node_of(t)
        if nid is None:
            raise ValueError("tensor is not tracked on this tape")
        g = self.grads.get(nid)
        return np.zeros(t.shape) if g is None else g


_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


@contextmanager
def no_grad():
    """Evaluate without recording: ops inside return plain untracked tensors."""
    _STACK.append(None)
    try:
        yield
    finally:
        _STACK.pop()


def no_grad_value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_finite(kind: str, arrays: Iterable[np.ndarray]) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite input to {kind}")


def _record(kind: str, out: np.ndarray, inputs: Sequence, backward) -> Tensor:
    """Wrap ``out``; record a node when a tape is active and an input is tracked.

    ``backward(g, needs)`` receives the upstream gradient and a tuple of
    booleans saying which inputs need a gradient.
    """
    if DEBUG:
        _check_finite(kind, (no_grad_value(x) for x in inputs))
    tape = active_tape()
    if tape is None:
        return Tensor(out)
    ids = tuple(tape.node_of(x) for x in inputs)
    if all(i is None for i in ids):
        return Tensor(out)
    needs = tuple(i is not None for i in ids)
    nid = tape._append(_Node(kind, ids, lambda g: backward(g, needs), out.shape))
    return Tensor(out, nid, tape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# -- binary elementwise ---------------------------------------------------


def add(a, b) -> Tensor:
    av, bv = no_grad_value(a), no_grad_value(b)
    _broadcast_shape("add", av, bv)

    def backward(g, needs):
        return (
            _unbroadcast(g, av.shape) if needs[0] else None,
            _unbroadcast(g, bv.shape) if needs[1] else None,
        )

    return _record("add", av + bv, (a, b), backward)


def sub(a, b) -> Tensor:
    av, bv = no_grad_value(a), no_grad_value(b)
    _broadcast_shape("sub", av, bv)

    def backward(g, needs):
        return (
            _unbroadcast(g, av.shape) if needs[0] else None,
            _unbroadcast(-g, bv.shape) if needs[1] else None,
        )

    return _record("sub", av - bv, (a, b), backward)


def mul(a, b) -> Tensor:
    av, bv = no_grad_value(a), no_grad_value(b)
    _broadcast_shape("mul", av, bv)

    def backward(g, needs):
        return (
            _unbroadcast(g * bv, av.shape) if needs[0] else None,
            _unbroadcast(g * av, bv.shape) if needs[1] else None,
        )

    return _record("mul", av * bv, (a, b), backward)


def div(a, b) -> Tensor:
    av, bv = no_grad_value(a), no_grad_value(b)
    _broadcast_shape("div", av, bv)
    out = av / bv

    def backward(g, needs):
        return (
            _unbroadcast(g / bv, av.shape) if needs[0] else None,
            _unbroadcast(-g * out / bv, bv.shape) if needs[1] else None,
        )

    return _record("div", out, (a, b), backward)


def neg(a) -> Tensor:
    return _record("neg", -no_grad_value(a), (a,), lambda g, needs: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands (a batch of rows times a weight matrix)."""
    av, bv = no_grad_value(a), no_grad_value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def backward(g, needs):
        return (g @ bv.T if needs[0] else None, av.T @ g if needs[1] else None)

    return _record("matmul", av @ bv, (a, b), backward)


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` for row batches; one node instead of two."""
    xv, wv, bv = no_grad_value(x), no_grad_value(w), no_grad_value(b)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0] or bv.shape != (wv.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {xv.shape}, {wv.shape}, {bv.shape}")

    def backward(g, needs):
        return (
            g @ wv.T if needs[0] else None,
            xv.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    return _record("linear", xv @ wv + bv, (x, w, b), backward)


# -- structural -------------------------------------------------------------


def concat(tensors: Sequence) -> Tensor:
    """Concatenate along the last axis."""
    vals = [no_grad_value(t) for t in tensors]
    lead = {v.shape[:-1] for v in vals}
    if len(lead) != 1:
        raise ShapeError(f"concat: mismatched leading shapes {[v.shape for v in vals]}")
    widths = [v.shape[-1] for v in vals]
    bounds = np.cumsum([0] + widths)

    def backward(g, needs):
        return tuple(
            g[..., bounds[i] : bounds[i + 1]] if needs[i] else None for i in range(len(vals))
        )

    return _record("concat", np.concatenate(vals, axis=-1), tuple(tensors), backward)


def reshape(a, shape) -> Tensor:
    av = no_grad_value(a)
    try:
        out = av.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {av.shape} to {shape}") from None
    return _record("reshape", out, (a,), lambda g, needs: (g.reshape(av.shape),))


def getitem(a, index) -> Tensor:
    """Indexing; integer-array indices may repeat (gradients accumulate)."""
    av = no_grad_value(a)
    out = av[index]

    def backward(g, needs):
        full = np.zeros_like(av)
        if _repeats(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record("getitem", np.array(out, dtype=np.float64), (a,), backward)


def _repeats(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    for part in parts:
        if isinstance(part, (np.ndarray, list)):
            arr = np.asarray(part)
            if arr.dtype == bool:
                continue
            if len(np.unique(arr)) != arr.size:
                return True
    return False


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    av = no_grad_value(a)
    out = np.asarray(av.sum(axis=axis, keepdims=keepdims))

    def backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _record("sum", out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    av = no_grad_value(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    out = np.asarray(av.mean(axis=axis, keepdims=keepdims))

    def backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, av.shape).copy(),)

    return _record("mean", out, (a,), backward)


def cumsum(a, exclusive: bool = False) -> Tensor:
    """Cumulative sum along the last axis; ``exclusive`` shifts by one (starts at 0)."""
    av = no_grad_value(a)
    inc = np.cumsum(av, axis=-1)
    out = inc
    if exclusive:
        out = np.concatenate([np.zeros_like(av[..., :1]), inc[..., :-1]], axis=-1)

    def backward(g, needs):
        rev = np.cumsum(g[..., ::-1], axis=-1)[..., ::-1]
        if exclusive:
            rev = np.concatenate([rev[..., 1:], np.zeros_like(g[..., :1])], axis=-1)
        return (rev,)

    return _record("cumsum", out, (a,), backward)


def stop_gradient(a) -> Tensor:
    """Value copy cut from the tape."""
    return Tensor(no_grad_value(a))


def sparse_matmul(m, a) -> Tensor:
    """``m @ a`` for a constant scipy sparse matrix ``m`` and dense tracked ``a``."""
    av = no_grad_value(a)
    if m.shape[1] != av.shape[0]:
        raise ShapeError(f"sparse_matmul: incompatible shapes {m.shape} and {av.shape}")
    return _record(
        "sparse_matmul", np.asarray(m @ av), (a,), lambda g, needs: (np.asarray(m.T @ g),)
    )


# -- unary elementwise ------------------------------------------------------


def square(a) -> Tensor:
    av = no_grad_value(a)
    return _record("square", av * av, (a,), lambda g, needs: (2.0 * av * g,))


def exp(a) -> Tensor:
    out = np.exp(no_grad_value(a))
    return _record("exp", out, (a,), lambda g, needs: (g * out,))


def expm1(a) -> Tensor:
    av = no_grad_value(a)
    out = np.expm1(av)
    return _record("expm1", out, (a,), lambda g, needs: (g * (out + 1.0),))


def log(a) -> Tensor:
    av = no_grad_value(a)
    return _record("log", np.log(av), (a,), lambda g, needs: (g / av,))


def sqrt(a) -> Tensor:
    out = np.sqrt(no_grad_value(a))
    return _record("sqrt", out, (a,), lambda g, needs: (0.5 * g / out,))


def abs_(a) -> Tensor:
    av = no_grad_value(a)
    return _record("abs", np.abs(av), (a,), lambda g, needs: (g * np.sign(av),))


def sin(a) -> Tensor:
    av = no_grad_value(a)
    return _record("sin", np.sin(av), (a,), lambda g, needs: (g * np.cos(av),))


def cos(a) -> Tensor:
    av = no_grad_value(a)
    return _record("cos", np.cos(av), (a,), lambda g, needs: (-g * np.sin(av),))


def relu(a) -> Tensor:
    av = no_grad_value(a)
    out = np.maximum(av, 0.0)
    return _record("relu", out, (a,), lambda g, needs: (g * (av > 0),))


def sigmoid(a) -> Tensor:
    out = special.expit(no_grad_value(a))
    return _record("sigmoid", out, (a,), lambda g, needs: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    av = no_grad_value(a)
    return _record(
        "softplus", np.logaddexp(0.0, av), (a,), lambda g, needs: (g * special.expit(av),)
    )


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes only where the value was strictly inside."""
    av = no_grad_value(a)
    inside = (av > lo) & (av < hi)
    return _record("clip", np.clip(av, lo, hi), (a,), lambda g, needs: (g * inside,))


# -- gradient checking ------------------------------------------------------


def numeric_gradient(fn: Callable[[], Tensor], param: Parameter, index, step: float) -> float:
    """Central difference of ``fn()`` w.r.t. one entry of ``param``."""
    flat = param.data.reshape(-1)
    orig = flat[index]
    flat[index] = orig + step
    fp = float(no_grad_value(fn()))
    flat[index] = orig - step
    fm = float(no_grad_value(fn()))
    flat[index] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NonFiniteError(f"non-finite function value perturbing {param.name}[{index}]")
    return (fp - fm) / (2.0 * step)


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max of ``|analytic - numeric| / max(1, |numeric|)`` over parameter entries.

    ``fn`` takes no arguments and evaluates a scalar from the current parameter
    values. With ``max_entries`` set, each parameter is checked on its
    largest-gradient entries plus a random sample, ``max_entries`` in total.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    with Tape() as tape:
        value = fn()
        if not np.all(np.isfinite(no_grad_value(value))):
            raise NonFiniteError("non-finite function value at the base point")
        try:
            grads = tape.backward(value)
        except ValueError:
            # constant function: nothing tracked, analytic gradient is zero
            grads = {}
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros(p.shape)).reshape(-1)
        n = p.size
        if max_entries is None or n <= max_entries:
            idx = np.arange(n)
        else:
            top = np.argsort(-np.abs(analytic), kind="stable")[: max_entries // 2]
            rest = rng.choice(n, size=max_entries - len(top), replace=False)
            idx = np.unique(np.concatenate([top, rest]))
        for i in idx:
            num = numeric_gradient(fn, p, int(i), step)
            err = abs(analytic[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
