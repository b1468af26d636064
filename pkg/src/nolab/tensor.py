"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their operands requires a gradient. Outside a tape, or when no operand
is tracked, they are plain numpy computations.

    with Tape() as tape:
        loss = softmax_cross_entropy(model(x), y)
    tape.backward(loss)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what}: non-finite values")
    return arr


class Tensor:
    """A float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = _finite(arr, name or "tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> "Tensor":
        # op outputs skip the dtype coercion path
        t = cls.__new__(cls)
        t.data = _finite(arr, op)
        t.grad = None
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, "detach")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so every operand is recorded
    before its consumer. ``backward`` walks the record once in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> None:
        """Populate ``.grad`` of tracked leaves with d(loss)/d(leaf).

        Gradients are overwritten, never accumulated across calls. Tracked
        leaves with no path to ``loss`` receive zeros. If ``wrt`` is given,
        exactly those tensors receive gradients.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(n.output) for n in self.nodes}
        if wrt is None:
            seen: dict[int, Tensor] = {}
            for n in self.nodes:
                for t in n.inputs:
                    if t.requires_grad and id(t) not in produced:
                        seen.setdefault(id(t), t)
            targets = list(seen.values())
        else:
            targets = list(wrt)

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for n in reversed(self.nodes):
            g = grads.pop(id(n.output), None)
            if g is None:
                continue
            for t, gi in zip(n.inputs, n.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for t in targets:
            g = grads.get(id(t))
            t.grad = np.zeros_like(t.data) if g is None else _finite(np.asarray(g, dtype=DTYPE), "gradient")


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _record(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    result = Tensor._wrap(out, op)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.nodes.append(Node(op, inputs, result, vjp))
    return result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        return add_scalar(a, float(b))
    if _is_scalar(a):
        return add_scalar(b, float(a))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add_scalar(a, -float(b))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, float(b))
    if _is_scalar(a):
        return scale(b, float(a))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _record("add_scalar", (a,), a.data + c, lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sign(a: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = 0. Its derivative is zero everywhere."""
    a = as_tensor(a)
    return _record("sign", (a,), np.sign(a.data), lambda g: (np.zeros_like(g),))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _record("clamp", (a,), out, lambda g: (g * inside,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b`` of shape (C,) along axis 1 of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return _record("add_bias", (x, b), x.data + b.data.reshape(view), lambda g: (g, g.sum(axis=axes)))


# ---------------------------------------------------------------- structural


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    src = a.shape
    return _record("reshape", (a,), out, lambda g: (g.reshape(src),))


def take_rows(a: Tensor, n: int) -> Tensor:
    """First ``n`` entries along axis 0."""
    a = as_tensor(a)
    if not 1 <= n <= a.shape[0]:
        raise ShapeError(f"take_rows: {n} rows requested from shape {a.shape}")
    full = a.shape

    def vjp(g):
        out = np.zeros(full, dtype=DTYPE)
        out[:n] = g
        return (out,)

    return _record("take_rows", (a,), a.data[:n], vjp)


def tsum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.full(src, float(g)),))


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    src, n = a.shape, a.size
    return _record("mean", (a,), np.asarray(a.data.mean()), lambda g: (np.full(src, float(g) / n),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _record("matmul", (a, b), ad @ bd, vjp)


def conv_output_hw(h: int, w: int, k: int, padding: int) -> tuple[int, int]:
    return h + 2 * padding - k + 1, w + 2 * padding - k + 1


def _im2col(xp: np.ndarray, k: int, oh: int, ow: int) -> np.ndarray:
    # (N, C, H, W) padded -> (C*K*K, N*OH*OW)
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, oh, ow), dtype=DTYPE)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + oh, j : j + ow]
    return cols.reshape(c * k * k, n * oh * ow)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(c, k, k, n, oh, ow)
    out = np.zeros((c, n, h, w), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + oh, j : j + ow] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of NCHW input with OIHW square kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    n = x.shape[0]
    o, k = w.shape[0], w.shape[2]
    oh, ow = conv_output_hw(x.shape[2], x.shape[3], k, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, oh, ow)
    wmat = w.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    wshape, pshape = w.shape, xp.shape

    def vjp(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(wshape) if w.requires_grad else None
        if not x.requires_grad:
            return None, gw
        gx = _col2im(wmat.T @ g2, pshape, k, oh, ow)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, gw

    return _record("conv2d", (x, w), np.ascontiguousarray(out), vjp)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximal element in row-major
    window order.
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2d: needs NCHW with H, W >= 2, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    xd = x.data
    quads = [xd[:, :, i : 2 * oh : 2, j : 2 * ow : 2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def vjp(g):
        gx = np.zeros((n, c, h, w), dtype=DTYPE)
        taken = np.zeros(out.shape, dtype=bool)
        for q, (i, j) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (q == out) & ~taken
            taken |= hit
            gx[:, :, i : 2 * oh : 2, j : 2 * ow : 2] = g * hit
        return (gx,)

    return _record("maxpool2d", (x,), out, vjp)


def maxpool_output_hw(h: int, w: int) -> tuple[int, int]:
    return h // 2, w // 2


# ---------------------------------------------------------------- losses


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(z, dtype=DTYPE)))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of (N, C) logits against integer labels.

    ``reduction`` is ``"mean"`` (scalar), ``"sum"`` (scalar) or ``"none"``
    (per-sample vector).
    """
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or y.shape[0] != logits.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: shape mismatch {logits.shape} vs {y.shape}")
    n, c = logits.shape
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits.data)
    per = -logp[np.arange(n), y]
    p = np.exp(logp)
    p[np.arange(n), y] -= 1.0
    if reduction == "mean":
        return _record("xent", (logits,), np.asarray(per.mean()), lambda g: (p * (float(g) / n),))
    if reduction == "sum":
        return _record("xent", (logits,), np.asarray(per.sum()), lambda g: (p * float(g),))
    if reduction == "none":
        return _record("xent", (logits,), per, lambda g: (p * g[:, None],))
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------- oracle


def finite_difference_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one component at a time."""
    if not h > 0:
        raise ValueError("h must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.empty_like(x0)
    flat, gflat = x0.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x0))
        flat[i] = orig - h
        fm = float(f(x0))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"finite_difference_grad: f is non-finite near component {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad
