"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray together with the primitive application that
produced it. Calling backward() on a scalar replays the recorded
applications in reverse topological order exactly once, accumulating
vector-Jacobian products into the ``grad`` slot of every tensor that
requires one. Nothing is recorded for subgraphs whose inputs are all
constant, so frozen-model inference builds no graph at all.

Dtype discipline: every primitive preserves the dtype of its inputs.
Training code builds float32 leaves; gradient audits and the theory
checks build float64 leaves and get float64 throughout.

NaN/Inf anywhere in a primitive's output is an error state. The check
runs after every primitive while ``set_check_finite(True)`` (the
default); hot loops may disable it and rely on the per-step loss and
optimizer gradient checks instead.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

# Additive mask bias. Large enough that exp(NEG_INF - rowmax) underflows to
# an exact 0.0 weight for any realistic score scale, small enough to stay
# finite so fully-masked rows softmax to uniform garbage instead of NaN.
NEG_INF = -1e9

_CHECK_FINITE = True
_GRAD_ENABLED = True


def set_check_finite(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def check_finite_enabled() -> bool:
    return _CHECK_FINITE


class no_grad:
    """Context manager that suppresses graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Node of the computation graph: an ndarray plus gradient plumbing."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    # -- introspection --------------------------------------------------

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
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self.op!r})"

    # -- gradient plumbing ----------------------------------------------

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        """Constant view of this tensor's values; cuts the graph."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar loss")
        order = _toposort(self)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                if node is not self:
                    # intermediate grads are spent once propagated; freeing
                    # them keeps the backward working set small
                    node.grad = None

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a gradient contribution that may alias someone else's
    buffer (a view, or the child's grad passed straight through)."""
    if not t.requires_grad and t._backward is None:
        return
    if t.grad is None:
        # copy: g may be a view into a buffer the caller still owns
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _accumulate_owned(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a freshly allocated gradient array the caller hands over.

    Only call this with arrays the backward closure just built and will not
    touch again; the tensor may take the buffer as its grad without a copy.
    """
    if not t.requires_grad and t._backward is None:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by primitive {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = _GRAD_ENABLED and any(
        p.requires_grad or p._backward is not None for p in parents
    )
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad



def _acc_maybe_broadcast(t: Tensor, g: np.ndarray) -> None:
    reduced = _unbroadcast(g, t.data.shape)
    if reduced is g:
        _accumulate(t, reduced)
    else:
        _accumulate_owned(t, reduced)


# -- elementwise primitives ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _acc_maybe_broadcast(a, g)
        _acc_maybe_broadcast(b, g)

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _acc_maybe_broadcast(a, g)
        _accumulate_owned(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate_owned(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate_owned(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), "mul", backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _accumulate_owned(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate_owned(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate_owned(a, -g)

    return _node(-a.data, (a,), "neg", backward)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)

    def backward(g):
        _accumulate_owned(a, g * e * a.data ** (e - 1.0))

    return _node(a.data**e, (a,), f"pow[{e}]", backward)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accumulate_owned(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _node(a.data * sig, (a,), "silu", backward)


# -- shape primitives ------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(old))

    return _node(a.data.reshape(shape), (a,), "reshape", backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), "transpose", backward)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), "concat", backward)


# -- reductions ------------------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is None:
            _accumulate_owned(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate_owned(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]

    def backward(g):
        if axis is None:
            _accumulate_owned(a, np.broadcast_to(g / count, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate_owned(a, np.broadcast_to(g / count, a.data.shape).copy())

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean", backward)


# -- matrix product --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}"
        )

    linear = b.data.ndim == 2 and a.data.ndim > 2
    if linear:
        # One large GEMM instead of a gufunc loop over the leading axes;
        # several times faster for (batch, seq, d) @ (d, n).
        lead = a.data.shape[:-1]
        k = a.data.shape[-1]
        flat = np.ascontiguousarray(a.data).reshape(-1, k)
        out = (flat @ b.data).reshape(*lead, b.data.shape[-1])
    else:
        out = np.matmul(a.data, b.data)

    def backward(g):
        bd, ad_ = b.data, a.data
        if linear:
            g2 = np.ascontiguousarray(g).reshape(-1, g.shape[-1])
            _accumulate_owned(a, (g2 @ bd.T).reshape(ad_.shape))
            flat_a = np.ascontiguousarray(ad_).reshape(-1, ad_.shape[-1])
            _accumulate_owned(b, flat_a.T @ g2)
        elif bd.ndim == 2 and ad_.ndim == 2:
            _accumulate_owned(a, g @ bd.T)
            _accumulate_owned(b, ad_.T @ g)
        else:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = np.matmul(np.swapaxes(ad_, -1, -2), g)
            _accumulate_owned(a, _unbroadcast(ga, ad_.shape))
            _accumulate_owned(b, _unbroadcast(gb, bd.shape))

    return _node(out, (a, b), "matmul", backward)


# -- neural-net primitives --------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stable softmax: shifts by the per-slice max before exponentiating."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate_owned(a, (g - dot) * y)

    return _node(y, (a,), "softmax", backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each trailing-axis slice to unit root-mean-square, then by gain."""
    d = x.data.shape[-1]
    if d < 1:
        raise DimensionError("rms_norm needs a non-empty trailing axis")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + np.asarray(eps, dtype=x.dtype))
    y = x.data * r * gain.data

    def backward(g):
        gg = g * gain.data
        proj = (gg * x.data).sum(axis=-1, keepdims=True)
        _accumulate_owned(x, r * gg - (r**3 / d) * x.data * proj)
        axes = tuple(range(x.data.ndim - 1))
        _accumulate_owned(gain, (g * x.data * r).sum(axis=axes))

    return _node(y, (x, gain), "rms_norm", backward)


def _rope_tables(positions: np.ndarray, d: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = d // 2
    exponents = -2.0 * np.arange(half, dtype=np.float64) / d
    theta = 10000.0**exponents
    angles = positions.astype(np.float64)[:, None] * theta[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope(x: Tensor, positions) -> Tensor:
    """Rotate consecutive value pairs of the trailing axis by pos-dependent angles.

    ``x`` has shape (..., T, d) with d even; ``positions`` has length T.
    Pair j rotates by angle pos * 10000^(-2j/d), so each pair keeps its norm
    and position 0 is the identity.
    """
    d = x.data.shape[-1]
    if d % 2 != 0:
        raise DimensionError(f"rope requires an even trailing extent, got {d}")
    pos = np.asarray(positions)
    if pos.shape[0] != x.data.shape[-2]:
        raise DimensionError("rope positions must match the sequence axis")
    cos, sin = _rope_tables(pos, d, x.dtype)
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    y = np.empty_like(x.data)
    y[..., 0::2] = xe * cos - xo * sin
    y[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        _accumulate_owned(x, gx)

    return _node(y, (x,), "rope", backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding table; scatter-adds gradients on backward."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def backward(g):
        if not (table.requires_grad or table._backward is not None):
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        flat_ids = ids.reshape(-1)
        np.add.at(table.grad, flat_ids, g.reshape(flat_ids.shape[0], -1))

    return _node(out, (table,), "embedding", backward)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select x[b, idx[b], :] for each batch row b."""
    idx = np.asarray(idx)
    batch = np.arange(x.data.shape[0])
    out = x.data[batch, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[batch, idx] = g
        _accumulate_owned(x, gx)

    return _node(out, (x,), "gather_rows", backward)


def cross_entropy(scores: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(scores)[label].

    The gradient with respect to the scores is (softmax - onehot) / batch,
    computed in closed form for stability.
    """
    labels = np.asarray(labels)
    n, v = scores.data.shape
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= v:
        raise IndexError(f"labels must lie in [0, {v})")
    shifted = scores.data - scores.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(n), labels]
    loss = np.asarray((lse - picked).mean(), dtype=scores.dtype)

    def backward(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        _accumulate_owned(scores, p * (g / n))

    return _node(loss, (scores,), "cross_entropy", backward)
