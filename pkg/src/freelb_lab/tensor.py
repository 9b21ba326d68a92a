"""Dense float64 tensors with reverse-mode differentiation.

Every primitive returns a new :class:`Tensor`.  When any operand has
``requires_grad`` set, the result carries an op record (inputs, a pure
forward function and its vector-Jacobian product).  The graph reachable from
an output is the tape: :class:`Tape` orders it topologically, replays it
forward and runs the backward sweep.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "RngState", "DropoutMask", "NonFiniteError", "ShapeError",
    "backward", "matmul", "add", "sub", "mul", "neg", "exp", "log", "tanh", "gelu",
    "tensor_sum", "tensor_mean", "reshape", "transpose", "select", "take_rows",
    "softmax_rows", "layer_norm", "cross_entropy", "sample_dropout_mask", "apply_dropout",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class _Op:
    __slots__ = ("name", "inputs", "forward", "vjp")

    def __init__(self, name, inputs, forward, vjp):
        self.name = name
        self.inputs = inputs
        self.forward = forward
        self.vjp = vjp


class Tensor:
    """A float64 array, optionally a differentiable leaf or a recorded result."""

    __slots__ = ("data", "requires_grad", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._op = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t._op = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self._op.name}" if self._op is not None else ""
        return f"Tensor(shape={self.shape}{flag}{op})"

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {name}")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(name: str, forward: Callable, vjp: Callable, *inputs) -> Tensor:
    inputs = tuple(_as_tensor(x) for x in inputs)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out = forward(*(t.data for t in inputs))
    _check_finite(out, name)
    t = Tensor._wrap(out)
    if any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t._op = _Op(name, inputs, forward, vjp)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def _add_vjp(g, arrays, out, needs):
    a, b = arrays
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None)


def add(a, b) -> Tensor:
    return _record("add", np.add, _add_vjp, a, b)


def _sub_vjp(g, arrays, out, needs):
    a, b = arrays
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None)


def sub(a, b) -> Tensor:
    return _record("sub", np.subtract, _sub_vjp, a, b)


def _mul_vjp(g, arrays, out, needs):
    a, b = arrays
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def mul(a, b) -> Tensor:
    return _record("mul", np.multiply, _mul_vjp, a, b)


def neg(a) -> Tensor:
    return _record("neg", np.negative, lambda g, arrays, out, needs: (-g,), a)


def exp(a) -> Tensor:
    return _record("exp", np.exp, lambda g, arrays, out, needs: (g * out,), a)


def log(a) -> Tensor:
    return _record("log", np.log, lambda g, arrays, out, needs: (g / arrays[0],), a)


def tanh(a) -> Tensor:
    return _record("tanh", np.tanh, lambda g, arrays, out, needs: (g * (1.0 - out * out),), a)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def _gelu_vjp(g, arrays, out, needs):
    x = arrays[0]
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


def gelu(a) -> Tensor:
    """GELU, tanh approximation (smooth, so finite differences behave)."""
    return _record("gelu", _gelu_fwd, _gelu_vjp, a)


# ---------------------------------------------------------------------------
# shape and reductions


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    in_shape = a.shape
    try:
        np.empty(in_shape).reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _record("reshape", lambda x: x.reshape(shape),
                   lambda g, arrays, out, needs: (g.reshape(in_shape),), a)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", lambda x: np.transpose(x, axes),
                   lambda g, arrays, out, needs: (np.transpose(g, inv),), a)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)

    def vjp(g, arrays, out, needs):
        x = arrays[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", lambda x: np.asarray(np.sum(x, axis=axis, keepdims=keepdims)), vjp, a)


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tensor_sum(a, axis, keepdims) * (1.0 / n)


def select(a, key) -> Tensor:
    """Basic-indexing view ``a[key]``; the gradient scatters back into zeros."""

    def vjp(g, arrays, out, needs):
        z = np.zeros_like(arrays[0])
        z[key] = g
        return (z,)

    return _record("select", lambda x: np.array(x[key]), vjp, a)


def take_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range [0, {table.shape[0]})")

    def vjp(g, arrays, out, needs):
        z = np.zeros_like(arrays[0])
        np.add.at(z, ids.reshape(-1), g.reshape(-1, z.shape[-1]))
        return (z,)

    return _record("take_rows", lambda v: v[ids], vjp, table)


# ---------------------------------------------------------------------------
# linear algebra


def _matmul_vjp(g, arrays, out, needs):
    a, b = arrays
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    if needs[1]:
        if b.ndim == 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _record("matmul", np.matmul, _matmul_vjp, a, b)


# ---------------------------------------------------------------------------
# normalisation and losses


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(t) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    t = _as_tensor(t)
    if t.ndim == 0 or t.shape[-1] == 0:
        raise ShapeError("softmax needs a non-empty trailing dimension")

    def vjp(g, arrays, out, needs):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", _softmax, vjp, t)


def layer_norm(t, gain, bias, eps: float = 1e-5) -> Tensor:
    t, gain, bias = _as_tensor(t), _as_tensor(gain), _as_tensor(bias)
    d = t.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")

    def fwd(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + eps) * g + b

    def vjp(dy, arrays, out, needs):
        x, g, _ = arrays
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        dx = dg = db = None
        if needs[0]:
            dxh = dy * g
            dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                        - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            dg = (dy * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            db = dy.reshape(-1, d).sum(axis=0)
        return dx, dg, db

    return _record("layer_norm", fwd, vjp, t, gain, bias)


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of ``logits`` (batch x classes) against integer labels.

    ``reduction`` is ``"mean"`` (scalar) or ``"none"`` (one loss per row).
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects logits of shape (batch, classes)")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.dtype.kind not in "iu":
        raise TypeError("labels must be integers")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    if reduction not in ("mean", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    rows = np.arange(n)

    def fwd(x):
        m = x.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
        per = lse - x[rows, labels]
        return per.mean() if reduction == "mean" else per

    def vjp(g, arrays, out, needs):
        p = _softmax(arrays[0])
        p[rows, labels] -= 1.0
        if reduction == "mean":
            return (p * (g / n),)
        return (p * g[:, None],)

    return _record("cross_entropy", fwd, vjp, logits)


# ---------------------------------------------------------------------------
# tape and backward


class Tape:
    """Topologically ordered record of the ops that produced ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = _topo_order(output) if output.requires_grad else []
        self.leaves = [n for n in self.nodes if n._op is None]

    def __len__(self):
        return len(self.nodes)

    def replay(self) -> np.ndarray:
        """Recompute every recorded op from the stored leaf values."""
        if not self.nodes:
            return self.output.data.copy()
        values: dict[int, np.ndarray] = {}
        for node in self.nodes:
            if node._op is None:
                values[id(node)] = node.data
                continue
            args = [values.get(id(x), x.data) for x in node._op.inputs]
            values[id(node)] = node._op.forward(*args)
        return values[id(self.output)]

    def backward(self, leaves: Sequence[Tensor], grad_output=None) -> dict:
        out = self.output
        for leaf in leaves:
            if not leaf.requires_grad:
                raise ValueError(f"{leaf!r} is not on the tape (requires_grad is False)")
        if grad_output is None:
            if out.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {out.shape}")
            seed = np.ones_like(out.data)
        else:
            seed = np.asarray(grad_output, dtype=np.float64)
            if seed.shape != out.shape:
                raise ShapeError(f"grad_output shape {seed.shape} != output shape {out.shape}")
        grads: dict[int, np.ndarray] = {}
        if out.requires_grad:
            grads[id(out)] = seed
            for node in reversed(self.nodes):
                op = node._op
                g = grads.get(id(node))
                if op is None or g is None:
                    continue
                needs = tuple(x.requires_grad for x in op.inputs)
                in_grads = op.vjp(g, [x.data for x in op.inputs], node.data, needs)
                for x, gx in zip(op.inputs, in_grads):
                    if gx is None or not x.requires_grad:
                        continue
                    key = id(x)
                    if key in grads:
                        grads[key] = grads[key] + gx
                    else:
                        grads[key] = gx
        result = {}
        for leaf in leaves:
            g = grads.get(id(leaf))
            g = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)
            _check_finite(g, "backward")
            result[leaf] = g
        return result


def _topo_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._op is not None:
            for x in node._op.inputs:
                if x.requires_grad and id(x) not in visited:
                    stack.append((x, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor], grad_output=None) -> dict:
    """Reverse-mode gradients of ``loss`` with respect to each of ``leaves``.

    Returns a dict mapping each leaf tensor to an array of the leaf's shape.
    Leaves the loss does not depend on get zeros.  ``grad_output`` seeds a
    non-scalar output (a vector-Jacobian product).
    """
    return Tape(loss).backward(list(leaves), grad_output)


# ---------------------------------------------------------------------------
# randomness and dropout


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


class RngState:
    """Seeded random stream with deterministic, position-independent splits.

    ``child(*keys)`` derives a named sub-stream; ``split()`` derives the next
    numbered one.  Neither depends on how many draws the parent has made.
    """

    def __init__(self, seed: int, path: tuple = ()):
        if not 0 <= int(seed) < 2 ** 64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self.path = tuple(path)
        self.splits = 0
        self._gen = None

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def child(self, *keys) -> "RngState":
        return RngState(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def split(self) -> "RngState":
        # offset keeps numbered splits disjoint from small named/int children
        self.splits += 1
        return RngState(self.seed, self.path + (2 ** 32 + self.splits,))

    def uniform(self, low, high, size) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def random(self, size) -> np.ndarray:
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngState(seed={self.seed}, path={self.path})"


@dataclass(frozen=True)
class DropoutMask:
    """A sampled inverted-dropout mask; ``p`` is the drop probability."""

    keep: np.ndarray
    p: float
    scale: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        keep = np.array(self.keep, dtype=bool)
        keep.flags.writeable = False
        scale = keep / (1.0 - self.p)
        scale.flags.writeable = False
        object.__setattr__(self, "keep", keep)
        object.__setattr__(self, "scale", scale)

    @property
    def shape(self) -> tuple:
        return self.keep.shape


def sample_dropout_mask(shape, p: float, rng: RngState) -> DropoutMask:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = rng.random(tuple(shape)) >= p
    return DropoutMask(keep, float(p))


def apply_dropout(t, mask: DropoutMask) -> Tensor:
    t = _as_tensor(t)
    if t.shape != mask.shape:
        raise ShapeError(f"dropout mask shape {mask.shape} != activation shape {t.shape}")
    return mul(t, Tensor._wrap(mask.scale))
