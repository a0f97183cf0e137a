"""Tape-ordered reverse-mode differentiation over numpy arrays.

A :class:`Var` records the operation that produced it. :func:`backward`
walks every node reachable from a scalar loss in reverse creation order and
accumulates gradients, so shared subexpressions receive the sum of all paths.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np

from . import _kernels
from . import tensor as tc

_clock = itertools.count()


class Var:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "order", "name")
    __array_priority__ = 100  # make ndarray <op> Var defer to Var

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.order = next(_clock)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        if k != 2:
            raise NotImplementedError("only squaring is supported")
        return mul(self, self)

    def sum(self):
        return sum_all(self)

    def relu(self):
        return relu(self)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _op(value, parents: Sequence[Var], backward_fn: Callable) -> Var:
    req = any(p.requires_grad for p in parents)
    return Var(value, requires_grad=req, parents=parents if req else (), backward_fn=backward_fn if req else None)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Var) -> Dict[Var, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Returns a mapping from leaf ``Var`` to its gradient.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    nodes, seen, stack = [], set(), [loss]
    while stack:
        v = stack.pop()
        if id(v) in seen or not v.requires_grad:
            continue
        seen.add(id(v))
        nodes.append(v)
        stack.extend(v.parents)
    nodes.sort(key=lambda v: v.order, reverse=True)

    grads = {id(loss): np.ones_like(loss.value)}
    leaves = {}
    for v in nodes:
        g = grads.pop(id(v), None)
        if g is None:
            continue
        if v.backward_fn is None:
            v.grad = g if v.grad is None else v.grad + g
            leaves[v] = v.grad
            continue
        for parent, pg in zip(v.parents, v.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return leaves


# elementwise -----------------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _op(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Var:
    a = as_var(a)
    return _op(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _op(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def reciprocal(a) -> Var:
    a = as_var(a)
    out = 1.0 / a.value
    return _op(out, (a,), lambda g: (-g * out * out,))


def relu(x) -> Var:
    x = as_var(x)
    on = x.value > 0  # subgradient 0 at exactly 0
    return _op(np.where(on, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * on,))


def relu6(x) -> Var:
    x = as_var(x)
    on = (x.value > 0) & (x.value < 6)
    return _op(np.clip(x.value, 0, 6), (x,), lambda g: (g * on,))


def activation(kind: str, x: Var) -> Var:
    if kind == "identity":
        return x
    if kind == "relu":
        return relu(x)
    if kind == "relu6":
        return relu6(x)
    raise tc.ConfigurationError(f"unknown activation {kind!r}")


def sigmoid(x) -> Var:
    x = as_var(x)
    s = 1.0 / (1.0 + np.exp(-x.value))
    return _op(s, (x,), lambda g: (g * s * (1 - s),))


# reductions ------------------------------------------------------------------

def sum_all(x) -> Var:
    x = as_var(x)
    return _op(x.value.sum().reshape(1, 1, 1, 1), (x,),
               lambda g: (np.broadcast_to(g.reshape(()), x.shape).astype(x.value.dtype),))


def mean_all(x) -> Var:
    return sum_all(x) * (1.0 / x.value.size)


def global_avg_pool(x) -> Var:
    x = as_var(x)
    N, C, H, W = x.shape
    out = x.value.mean(axis=(2, 3), keepdims=True)
    return _op(out, (x,), lambda g: (np.broadcast_to(g / (H * W), x.shape).astype(x.value.dtype),))


# layers ----------------------------------------------------------------------

def conv1x1(x, w, b=None) -> Var:
    x, w = as_var(x), as_var(w)
    p = tc.Conv1x1Params(w.value, None if b is None else as_var(b).value)
    out = tc.conv1x1(x.value, p)
    N, C, H, W = x.shape

    def bw(g):
        g3 = g.reshape(N, -1, H * W)
        x3 = x.value.reshape(N, C, H * W)
        dx = np.matmul(w.value.T, g3).reshape(x.shape) if x.requires_grad else None
        dw = np.tensordot(g3, x3, axes=([0, 2], [0, 2])) if w.requires_grad else None
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if b is None else (x, w, as_var(b))
    return _op(out, parents, bw)


def depthwise3x3(x, w) -> Var:
    x, w = as_var(x), as_var(w)
    out = tc.depthwise3x3_dense(x.value, tc.DepthwiseParams(w.value))

    def bw(g):
        dx, dw = tc.depthwise3x3_backward(x.value, w.value, g)
        return dx, dw

    return _op(out, (x, w), bw)


def conv3x3(x, w, stride: int = 1) -> Var:
    x, w = as_var(x), as_var(w)
    out = tc.conv3x3(x.value, w.value, stride=stride)
    return _op(out, (x, w), lambda g: tc.conv3x3_backward(x.value, w.value, g, stride))


def batchnorm(x, gamma, beta, p: tc.BatchNormParams, training: bool, update_stats: bool = True) -> Var:
    """Batch normalisation; ``p`` carries running statistics and epsilon.

    ``gamma``/``beta`` are passed separately so they can be traced leaves.
    """
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    sh = (1, -1, 1, 1)
    if not training:
        inv = 1.0 / np.sqrt(p.running_var + p.epsilon)
        scale = (gamma.value * inv).astype(x.value.dtype)
        xhat = (x.value - p.running_mean.reshape(sh)) * inv.reshape(sh).astype(x.value.dtype)
        out = x.value * scale.reshape(sh) + (beta.value - p.running_mean * scale).reshape(sh)

        def bw_eval(g):
            return g * scale.reshape(sh), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _op(out.astype(x.value.dtype), (x, gamma, beta), bw_eval)

    xv = np.ascontiguousarray(x.value)
    C = x.shape[1]
    out, xhat = np.empty_like(xv), np.empty_like(xv)
    mean, var = np.empty(C), np.empty(C)
    N = xv.shape[0]
    _kernels.bn_train_forward(xv.reshape(N, C, -1), gamma.value, beta.value, p.epsilon,
                              out.reshape(N, C, -1), xhat.reshape(N, C, -1), mean, var)
    m = xv.size // C
    if update_stats:
        tc.update_running_stats(p, mean, var, m)
    inv = 1.0 / np.sqrt(var + p.epsilon)

    def bw(g):
        dx = np.empty_like(xhat)
        dgamma, dbeta = np.empty(C, xv.dtype), np.empty(C, xv.dtype)
        _kernels.bn_train_backward(np.ascontiguousarray(g).reshape(N, C, -1), xhat.reshape(N, C, -1),
                                   gamma.value, inv, dx.reshape(N, C, -1), dgamma, dbeta)
        return dx, dgamma, dbeta

    return _op(out, (x, gamma, beta), bw)


def linear(x, w, b) -> Var:
    """``x`` (N, C) or (N, C, 1, 1) times ``w`` (K, C) plus ``b`` (K,)."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    x2 = x.value.reshape(x.shape[0], -1)
    out = x2 @ w.value.T + b.value

    def bw(g):
        return (g @ w.value).reshape(x.shape), g.T @ x2, g.sum(axis=0)

    return _op(out, (x, w, b), bw)


def cross_entropy(logits, labels) -> Var:
    """Mean softmax cross-entropy for integer ``labels``."""
    logits = as_var(logits)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    labels = np.asarray(labels)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1
        return (d * (g.reshape(()) / n),)

    return _op(np.asarray(loss, dtype=logits.value.dtype).reshape(1, 1, 1, 1), (logits,), bw)


# optimisers ------------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "adam"
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState,
             lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
             lr_scale: Optional[Dict[str, float]] = None) -> None:
    """Momentum SGD with L2 weight decay folded into the gradient; updates in place.

    ``lr_scale`` optionally multiplies the step size of individual parameters.
    """
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        step = lr * (lr_scale or {}).get(name, 1.0)
        if weight_decay:
            g = g + weight_decay * p
        if momentum:
            buf = state.first.get(name)
            buf = g.copy() if buf is None else momentum * buf + g
            state.first[name] = buf
            g = buf
        p -= (step * g).astype(p.dtype)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
              lr_scale: Optional[Dict[str, float]] = None) -> None:
    state.step += 1
    b1, b2 = betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if weight_decay:
            g = g + weight_decay * p
        m = state.first.get(name)
        v = state.second.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.first[name], state.second[name] = m, v
        step = lr * (lr_scale or {}).get(name, 1.0)
        p -= (step * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Binder:
    """Wraps named parameter arrays as traced leaves for one forward pass."""

    def __init__(self, named: Iterable, trainable: bool = True):
        self._names = {}
        self._leaves = {}
        for name, arr in named:
            self._names[id(arr)] = name
            self._leaves[id(arr)] = Var(arr, requires_grad=trainable, name=name)

    def __call__(self, arr: Optional[np.ndarray]) -> Optional[Var]:
        if arr is None:
            return None
        v = self._leaves.get(id(arr))
        return v if v is not None else Var(arr)

    def grads(self) -> Dict[str, np.ndarray]:
        return {self._names[k]: v.grad for k, v in self._leaves.items() if v.grad is not None}


def constant_binder(arr):
    return None if arr is None else Var(arr)
