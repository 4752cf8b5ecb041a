"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation builds a node holding its inputs and a closure that maps the
upstream gradient to per-input gradients.  Calling ``backward`` on a scalar
loss walks the recorded graph once in reverse topological order and returns
the accumulated gradients of all reachable parameters.  Gradients for shared
parameters (for example one quantizer scale feeding many cores) accumulate
additively.

Quantization nodes use straight-through surrogates from :mod:`ttq.quant`;
everything else is an exact vector-Jacobian product.
"""

from __future__ import annotations

import string
from typing import Callable, Iterable, Sequence

import numpy as np

from . import quant as q

_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording (evaluation / teacher passes)."""

    def __enter__(self):
        global _grad_enabled
        self.prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self.prev
        return False


class BackwardError(RuntimeError):
    """Backward misuse: double backward or non-scalar loss."""


class Tensor:
    """An ndarray plus the recording needed for one reverse sweep."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self.name = name
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad}{tag})"


def Parameter(data, name: str | None = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
        out.requires_grad = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape),
        _unbroadcast(g * a.data, b.data.shape),
    ))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
    ))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def pow_const(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def sqrt(a) -> Tensor:
    return pow_const(a, 0.5)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation (smooth everywhere)."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(out, (a,), vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Shape and indexing


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along an axis with a 1-D index; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ValueError("take expects a 1-D index array")
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _make(out, (a,), vjp)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[sl] = g
        return (ga,)

    return _make(a.data[sl], (a,), vjp)


def pad_axis(a, axis: int, after: int) -> Tensor:
    """Append zeros along one axis (input padding up to the factor product)."""
    a = _as_tensor(a)
    if after == 0:
        return a
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (0, after)
    n = a.data.shape[axis]
    return _make(np.pad(a.data, widths), (a,), lambda g: (np.take(g, range(n), axis=axis),))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    return scale(sum_all(a), 1.0 / a.data.size)


def matmul(a, b) -> Tensor:
    """Matrix product; batched on leading axes when both operands carry them."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data @ b.data

    def vjp(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = g @ bt
        gb = at @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), vjp)


def einsum(subscripts: str, *operands) -> Tensor:
    """Einstein summation with automatic VJPs.

    Subscripts must be explicit (no ellipsis), and every input index must
    appear in the output or another operand, which holds for all tensor-train
    contractions used here.
    """
    ins, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = ins.split(",")
    tensors = [_as_tensor(t) for t in operands]
    if len(in_subs) != len(tensors):
        raise ValueError("subscript count does not match operand count")
    for i, sub in enumerate(in_subs):
        elsewhere = set(out_sub) | {c for j, s in enumerate(in_subs) if j != i for c in s}
        if not set(sub) <= elsewhere:
            raise ValueError(f"operand {i} has an index private to it; VJP undefined")
    result = np.einsum(subscripts, *[t.data for t in tensors])

    def vjp(g):
        grads = []
        for i, sub in enumerate(in_subs):
            other_subs = [s for j, s in enumerate(in_subs) if j != i]
            other_ops = [tensors[j].data for j in range(len(tensors)) if j != i]
            call = ",".join([out_sub] + other_subs) + "->" + sub
            grads.append(np.einsum(call, g, *other_ops))
        return tuple(grads)

    return _make(result, tensors, vjp)


# ---------------------------------------------------------------------------
# Fused neural-net ops


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)

    return _make(s, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.data.shape[-1]

    def vjp(g):
        gg = (g * xhat).reshape(-1, n).sum(axis=0).reshape(gamma.data.shape)
        gb = g.reshape(-1, n).sum(axis=0).reshape(beta.data.shape)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (gx, gg, gb)

    return _make(out, (x, gamma, beta), vjp)


def fake_quant(x, scale_t: Tensor, bits: int) -> Tensor:
    """Quantize-dequantize with straight-through gradients.

    Forward emits the dequantized surrogate.  Backward passes the upstream
    gradient through in-range elements to x, and routes the branch-value
    surrogate, summed over every element sharing the scale, to ``scale_t``.
    """
    x = _as_tensor(x)
    scale_t = _as_tensor(scale_t)
    if bits == q.FULL_PRECISION:
        return x
    s = float(scale_t.data)
    out = q.fake_quant_forward(x.data, s, bits)

    def vjp(g):
        gx = g * q.ste_grad_input(x.data, s, bits).astype(g.dtype)
        gs = np.asarray((g * q.ste_grad_scale(x.data, s, bits)).sum(), dtype=scale_t.data.dtype)
        return (gx, gs.reshape(scale_t.data.shape))

    return _make(out, (x, scale_t), vjp)


def stop_gradient(a) -> Tensor:
    return _as_tensor(a).detach()


# ---------------------------------------------------------------------------
# Backward sweep


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """One reverse sweep from a scalar loss.

    Returns a map from ``id(tensor)`` to gradient for every requires-grad
    leaf; each leaf's ``.grad`` is also populated.  The recorded graph is
    consumed: a second backward through the same nodes raises.
    """
    if loss.data.size != 1:
        raise BackwardError("backward expects a scalar loss")
    if loss._consumed:
        raise BackwardError("graph already consumed; one backward per forward")
    if loss._vjp is None and not loss.requires_grad:
        raise BackwardError("loss does not depend on any parameter")
    loss._consumed = True
    order = _topo_order(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    grads: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                key = id(p)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + pg
                else:
                    adjoint[key] = pg
            node._vjp = None  # consume: one backward per forward
            node._parents = ()
        elif node.requires_grad:
            grads[id(node)] = g if node.grad is None else node.grad + g
            node.grad = grads[id(node)]
    return grads


# ---------------------------------------------------------------------------
# Convenience: letters for generated einsum subscripts


def fresh_letters(n: int, used: Iterable[str] = ()) -> list[str]:
    pool = [c for c in string.ascii_lowercase if c not in set(used)]
    if n > len(pool):
        raise ValueError("ran out of einsum letters")
    return pool[:n]
