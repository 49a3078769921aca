"""Dense float64 (optionally float32) tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When at least one input takes part in
gradient tracking (and recording is enabled for the current thread), the
output keeps references to its parents plus a closure mapping the output
gradient to parent gradients. :meth:`Tensor.backward` orders the recorded
graph into a :class:`Tape` and replays it in reverse.

Broadcasting is deliberately narrow: a right operand may only lack *leading*
axes of the left operand (``(B, M, D) + (D,)`` is fine, ``(B, M, D) + (B, 1, D)``
is not). Anything else needs an explicit reshape.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tape",
    "Tensor",
    "add",
    "concat",
    "cross_entropy",
    "embedding",
    "expand",
    "gelu",
    "is_grad_enabled",
    "masked_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "precision",
    "reshape",
    "rmsnorm",
    "scale",
    "silu",
    "slice_axis",
    "softmax",
    "sub",
    "sum",
    "swapaxes",
    "transpose",
]

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def precision(dtype):
    """Build new tensors as ``dtype`` (float64 or float32) inside the block.

    Gradient checks need float64; long training runs use float32 for speed.
    """
    global DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise TypeError(f"unsupported precision {dtype!r}")
    prev, DTYPE = DTYPE, dtype
    try:
        yield
    finally:
        DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A row-major float array that may participate in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph --------------------------------------------------------------
    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked leaf.

        ``grad`` defaults to ones, which for a scalar is the usual seed.
        Gradients add onto whatever is already stored in ``.grad``.
        """
        if grad is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.broadcast_to(np.asarray(grad, dtype=DTYPE), self.shape).copy()
        Tape.from_output(self).backward(seed)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return sum(self)

    def mean(self) -> "Tensor":
        return mean(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Topologically ordered record of the ops that produced a tensor.

    ``nodes`` lists every tensor in the graph with parents strictly before
    children; :meth:`backward` visits each node once, in reverse.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, seed: np.ndarray) -> None:
        out = self.nodes[-1]
        grads: dict[int, np.ndarray] = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if len(sb) > len(sa) or sa[len(sa) - len(sb):] != sb:
        raise DimensionError(f"{op}: cannot combine shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


# -- arithmetic ---------------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a scalar tensor or a trailing-shape suffix."""
    if b.ndim == 0 or b.shape == (1,) and a.shape[-1:] != (1,):
        bd = b.data.reshape(())

        def back(g):
            return g * bd, np.array((g * a.data).sum()).reshape(b.shape)

        return _make(a.data * bd, (a, b), back)
    _check_suffix(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (g * b.data, _reduce_to(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix ``(k, n)`` shared across the leading axes of
    ``a``, or carries exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def expand(a: Tensor, lead: Sequence[int]) -> Tensor:
    """Repeat ``a`` across new leading axes ``lead``; the gradient sums them out."""
    lead = tuple(lead)
    data = np.broadcast_to(a.data, lead + a.shape).copy()
    return _make(data, (a,), lambda g: (_reduce_to(g, a.shape),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _make(data, (a,), lambda g: (g.reshape(src),))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _make(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


# -- structural ---------------------------------------------------------------
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise DimensionError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def back(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), back)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {weight.shape[0]})")

    def back(g):
        full = np.zeros(weight.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _make(weight.data[ids], (weight,), back)


# -- nonlinearities -----------------------------------------------------------
def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _make(xd * sig, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),))


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    from scipy.special import erf

    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / rms(x) * gain`` over the last axis."""
    _check_suffix(x, gain, "rmsnorm")
    if gain.ndim != 1:
        raise DimensionError(f"rmsnorm: gain must be 1-D, got {gain.shape}")
    xd, gd = x.data, gain.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * inv
    d = xd.shape[-1]

    def back(g):
        gx = None
        if x.requires_grad:
            gn = g * gd
            gx = inv * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / d)
        return gx, _reduce_to(g * normed, gain.shape)

    return _make(normed * gd, (x, gain), back)


def _softmax_np(xd: np.ndarray, axis: int) -> np.ndarray:
    e = xd - xd.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax. NaN anywhere in a slice yields NaN there."""
    y = _softmax_np(x.data, axis)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to positions where ``mask`` is true.

    Masked positions get probability exactly zero and receive zero gradient.
    ``mask`` broadcasts against ``x`` numpy-style and must leave at least one
    visible entry per row.
    """
    xd = np.where(mask, x.data, -np.inf)
    y = _softmax_np(xd, -1)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back)


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over positions where ``mask`` holds.

    ``logits`` is ``(..., T, V)``; ``targets`` and ``mask`` match its leading
    shape. Masked-out positions add nothing to the loss or the gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    lead = logits.shape[:-1]
    if targets.shape != lead or mask.shape != lead:
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape} / mask {mask.shape}"
        )
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: mask selects no positions")
    v = logits.shape[-1]
    if targets[mask].size and (targets[mask].min() < 0 or targets[mask].max() >= v):
        raise IndexError(f"cross_entropy: targets outside [0, {v})")
    z = logits.data.reshape(-1, v)
    t = np.where(mask, targets, 0).reshape(-1)
    m = mask.reshape(-1)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(z.shape[0]), t]
    nll = np.where(m, logsum - picked, 0.0)
    loss = nll.sum() / count

    def back(g):
        p = np.exp(shifted - logsum[:, None])
        p[np.arange(z.shape[0]), t] -= 1.0
        p *= (m / count)[:, None] * float(g)
        return (p.reshape(logits.shape),)

    return _make(np.array(loss), (logits,), back)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)
