"""Dense float64 tensors with reverse-mode autodiff and an Adam optimizer.

Everything downstream (the toy LM, the amortizer, the aggregator) is built
from the ops in this module.  Tensors wrap numpy arrays; each op records a
backward closure so `backward()` can walk the tape.  A global no-grad mode
lets inference run without allocating any graph state.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable tape construction inside the block (adaptation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array plus optional grad buffer and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _needs_grad(self):
        return self.requires_grad or bool(self._parents)

    def backward(self):
        """Accumulate gradients of this scalar into every reachable tensor.

        Calling twice without zeroing grads accumulates (caller resets).
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        topo = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in topo:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent._needs_grad():
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def _toposort(root):
    """Iterative postorder over the tape, returned in reverse (root first)."""
    order = []
    visited = set()
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
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data, parents, backward):
    if _GRAD_ENABLED and any(p._needs_grad() for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape))]

    return _make(out, (a, b), bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape))]

    return _make(out, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return [
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        ]

    return _make(out, (a, b), bwd)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    out = a.data * c

    def bwd(g):
        return [(a, g * c)]

    return _make(out, (a,), bwd)


def matmul(a, b):
    """Matrix product; batched when inputs carry matching leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}"
        )
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return [
            (a, _unbroadcast(ga, a.data.shape)),
            (b, _unbroadcast(gb, b.data.shape)),
        ]

    return _make(out, (a, b), bwd)


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bwd(g):
        return [(a, np.transpose(g, inv))]

    return _make(out, (a,), bwd)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return [(a, g.reshape(a.data.shape))]

    return _make(out, (a,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        return list(zip(tensors, pieces))

    return _make(out, tuple(tensors), bwd)


def slice_rows(a, start, stop):
    a = as_tensor(a)
    out = a.data[start:stop]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return [(a, ga)]

    return _make(out, (a,), bwd)


def take_rows(a, indices):
    """Row gather (embedding lookup). indices is a 1-D integer array."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return [(a, ga)]

    return _make(out, (a,), bwd)


def sum_all(a):
    a = as_tensor(a)
    out = np.asarray(a.data.sum())

    def bwd(g):
        return [(a, np.broadcast_to(g, a.data.shape).copy())]

    return _make(out, (a,), bwd)


def mean_all(a):
    a = as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean())

    def bwd(g):
        return [(a, np.broadcast_to(g / n, a.data.shape).copy())]

    return _make(out, (a,), bwd)


def stop_gradient(a):
    """Forward identity that contributes zero gradient to its input."""
    a = as_tensor(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# nonlinear ops


def gelu(a):
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return [(a, g * (cdf + x * pdf))]

    return _make(out, (a,), bwd)


def softmax_rows(a):
    """Row-stable softmax over the last axis; rows sum to 1 within 1e-12."""
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return [(a, out * (g - dot))]

    return _make(out, (a,), bwd)


def layer_norm(a, gain, bias, eps=1e-5):
    """Per-row normalization over the last axis, then affine."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs last dimension >= 2")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    out = xhat * gain.data + bias.data

    def bwd(g):
        gg = g * gain.data
        gx = inv_std * (
            gg
            - gg.mean(axis=-1, keepdims=True)
            - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(x.ndim - 1))
        return [
            (a, gx),
            (gain, (g * xhat).sum(axis=axes)),
            (bias, g.sum(axis=axes)),
        ]

    return _make(out, (a, gain, bias), bwd)


def cross_entropy_from_logits(logits, targets, mask=None):
    """Mean NLL over unmasked positions, computed with log-sum-exp.

    logits: [n, V]; targets: int[n]; mask: bool[n], True = counted.
    """
    logits = as_tensor(logits)
    x = logits.data
    n, v = x.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise ShapeError(f"targets shape {t.shape} does not match logits rows {n}")
    if np.any(t < 0) or np.any(t >= v):
        raise ValueError("target index out of range")
    m = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    kept = int(m.sum())
    if kept == 0:
        raise ValueError("cross entropy over an all-masked input is undefined")
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + x.max(axis=-1)
    nll = lse - x[np.arange(n), t]
    out = np.asarray(nll[m].mean())

    def bwd(g):
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), t] -= 1.0
        p[~m] = 0.0
        return [(logits, p * (float(g) / kept))]

    return _make(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# parameters and optimizer


def truncated_normal(rng, shape, std=0.02):
    """Normal(0, std) resampled into [-2 std, 2 std]."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def parameter(rng, shape, std=0.02):
    return Tensor(truncated_normal(rng, shape, std), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape):
    return Tensor(np.ones(shape), requires_grad=True)


class Adam:
    """Standard Adam with bias correction over a fixed parameter list."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} does not match parameter {p.data.shape}"
                )
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_global_norm(params, max_norm):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        s = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return norm
