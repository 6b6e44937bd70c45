"""Dense float64 tensors with a reverse-mode differentiation tape.

A :class:`Tape` records every operation applied to tensors that descend
from a watched :class:`Parameter`. Calling :func:`backward` walks the tape
once in reverse and accumulates gradients into the parameters. Tensors that
do not descend from a watched parameter are plain constants and are never
recorded.

Only scalar-by-tensor broadcasting is supported. The affine layer is a
single fused op (:func:`linear`) so that bias addition needs no general
broadcasting rule.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BoundsError, ContractError, DimensionError, DomainError

__all__ = [
    "Tensor", "Tape", "Parameter", "tensor", "matmul", "linear", "add", "sub",
    "mul", "div", "neg", "exp", "log", "relu", "sigmoid", "softplus",
    "maximum", "log_softmax", "softmax", "reduce_sum", "reduce_mean",
    "concat", "slice_axis", "reshape", "one_hot", "one_hot_rows",
    "backward", "finite_diff_gradient", "relative_error",
]


class Parameter:
    """A named trainable array with a gradient buffer of the same shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass
class _Node:
    kind: str
    inputs: tuple
    vjp: Callable | None


@dataclass
class Tape:
    """Append-only record of differentiable operations for one forward pass."""

    nodes: list = field(default_factory=list)
    _leaves: dict = field(default_factory=dict)
    consumed: bool = False

    def watch(self, param: Parameter) -> "Tensor":
        """Leaf tensor for ``param``; repeated calls return the same leaf."""
        hit = self._leaves.get(id(param))
        if hit is not None:
            return hit[1]
        node = self._append(_Node("leaf", (), None))
        leaf = Tensor(param.value, self, node)
        self._leaves[id(param)] = (param, leaf)
        return leaf

    def _append(self, node: _Node) -> int:
        if self.consumed:
            raise ContractError("tape already consumed by backward")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """An n-dimensional float64 array, optionally tied to a tape node."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor({self.data!r}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data) -> Tensor:
    """Wrap ``data`` as a constant tensor (no-op for tensors)."""
    return data if isinstance(data, Tensor) else Tensor(data)


def _result(data: np.ndarray, inputs: Sequence[Tensor], kind: str, vjp) -> Tensor:
    tape = None
    for t in inputs:
        if t.node is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ContractError(f"{kind}: operands are recorded on different tapes")
    if tape is None:
        return Tensor(data)
    node = tape._append(_Node(kind, tuple(t.node for t in inputs), vjp))
    return Tensor(data, tape, node)


def _check_finite(data: np.ndarray, kind: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{kind}: produced non-finite values")
    return data


# --- binary elementwise -------------------------------------------------------

def _binary_operands(a, b, kind):
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), "add", vjp)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), "sub", vjp)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), "mul", vjp)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0.0):
        raise DomainError("div: divisor contains zero elements")
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), "div", vjp)


def maximum(x, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)`` for a constant ``floor``."""
    x = tensor(x)
    mask = x.data > floor

    def vjp(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, floor), (x,), "maximum", vjp)


# --- unary elementwise --------------------------------------------------------

def neg(x) -> Tensor:
    x = tensor(x)
    return _result(-x.data, (x,), "neg", lambda g: (-g,))


def exp(x) -> Tensor:
    x = tensor(x)
    with np.errstate(over="ignore"):
        out = _check_finite(np.exp(x.data), "exp")
    return _result(out, (x,), "exp", lambda g: (g * out,))


def log(x) -> Tensor:
    x = tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    xd = x.data
    return _result(np.log(xd), (x,), "log", lambda g: (g / xd,))


def relu(x) -> Tensor:
    x = tensor(x)
    mask = x.data > 0.0  # relu'(0) = 0
    return _result(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = tensor(x)
    out = _sigmoid(x.data)
    return _result(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    x = tensor(x)
    xd = x.data
    return _result(np.logaddexp(0.0, xd), (x,), "softplus", lambda g: (g * _sigmoid(xd),))


# --- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.tracked, b.tracked

    def vjp(g):
        return (g @ bd.T if need_a else None, ad.T @ g if need_b else None)

    return _result(ad @ bd, (a, b), "matmul", vjp)


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` with the bias added to every row."""
    x, weight, bias = tensor(x), tensor(weight), tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    need_x, need_w = x.tracked, weight.tracked

    def vjp(g):
        return (g @ wd.T if need_x else None, xd.T @ g if need_w else None, g.sum(axis=0))

    return _result(xd @ wd + bias.data, (x, weight, bias), "linear", vjp)


# --- reductions and normalisation --------------------------------------------

def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def reduce_sum(x, axis: int | None = None) -> Tensor:
    x = tensor(x)
    shape = x.shape
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,), "sum",
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = _axis(x, axis)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _result(x.data.sum(axis=ax), (x,), "sum", vjp)


def reduce_mean(x, axis: int | None = None) -> Tensor:
    x = tensor(x)
    n = x.data.size if axis is None else x.shape[_axis(x, axis)]
    return mul(reduce_sum(x, axis), 1.0 / n)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = tensor(x)
    ax = _axis(x, axis)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=ax, keepdims=True),)

    return _result(out, (x,), "log_softmax", vjp)


def softmax(x, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis))


# --- structural ---------------------------------------------------------------

def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: nothing to concatenate")
    ax = _axis(parts[0], axis)
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {p.shape} differ off axis {ax}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([p.data for p in parts], axis=ax), parts, "concat", vjp)


def slice_axis(x, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    x = tensor(x)
    ax = _axis(x, axis)
    if not 0 <= start < stop <= x.shape[ax]:
        raise BoundsError(f"slice [{start}, {stop}) outside extent {x.shape[ax]}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result(x.data[index], (x,), "slice", vjp)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {tuple(shape)}: {exc}") from None
    return _result(out, (x,), "reshape", lambda g: (g.reshape(old),))


def one_hot(index: int, k: int) -> Tensor:
    """Constant one-hot vector of length ``k`` with a 1 at ``index``."""
    if not 0 <= index < k:
        raise BoundsError(f"one_hot index {index} outside [0, {k})")
    out = np.zeros(k)
    out[index] = 1.0
    return Tensor(out)


def one_hot_rows(indices, k: int) -> Tensor:
    """Constant ``[n x k]`` matrix whose row ``i`` is ``one_hot(indices[i], k)``."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise BoundsError(f"one_hot indices outside [0, {k})")
    out = np.zeros((idx.size, k))
    out[np.arange(idx.size), idx] = 1.0
    return Tensor(out)


# --- differentiation ----------------------------------------------------------

def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> None:
    """Accumulate ``d loss / d value`` into ``grad`` of each watched parameter.

    ``params`` restricts which parameters receive gradients; by default every
    parameter watched on the loss's tape does. The tape is consumed.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.tracked:
        raise ContractError("loss does not depend on any watched parameter")
    tape = loss.tape
    if tape.consumed:
        raise ContractError("tape already consumed by backward")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(())}
    leaf_grads: dict[int, np.ndarray] = {}
    for i in range(loss.node, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        if node.vjp is None:
            leaf_grads[i] = g
            continue
        for src, gi in zip(node.inputs, node.vjp(g)):
            if src is None or gi is None:
                continue
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = gi
    tape.consumed = True
    wanted = None if params is None else {id(p) for p in params}
    for pid, (param, leaf) in tape._leaves.items():
        if wanted is not None and pid not in wanted:
            continue
        g = leaf_grads.get(leaf.node)
        if g is not None:
            param.grad += g


def finite_diff_gradient(f: Callable[[], float], params: Sequence[Parameter],
                         h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` with respect to each parameter.

    ``f`` takes no arguments and reads the parameters' current values, so it
    must be deterministic (pin its noise). Values are restored afterwards.
    """
    out = []
    for p in params:
        grad = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f())
            flat[i] = orig - h
            down = float(f())
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out.append(grad)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest coordinatewise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0

