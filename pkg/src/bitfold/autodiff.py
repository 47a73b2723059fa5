"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array and records the op that produced it; calling
``backward`` on a scalar loss walks the recorded graph in reverse
topological order and accumulates gradients into every reachable tensor
with ``requires_grad=True``. The graph is rebuilt on every forward pass
and freed after backward.

Every primitive validates that its output is finite and raises
NonFiniteValue otherwise, so training loops fail at the op that produced
the bad value rather than many steps later.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import DetachedLoss, NonFiniteValue, NotScalar, ShapeMismatch

LAYERNORM_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue("non-finite value produced by a forward op")


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    # -- graph mechanics ----------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad of every reachable leaf."""
        if self.size != 1:
            raise NotScalar(f"backward requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise DetachedLoss("loss does not depend on any tracked parameter")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # free the graph as we go
            node._parents = ()
            node._backward = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


# -- arithmetic -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(out, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), bw)


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p

    def bw(g):
        if a.requires_grad:
            a._accum(g * p * a.data ** (p - 1.0))

    return _make(out, (a,), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.outer(g, b.data) if a.ndim > 1 else g * b.data
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.outer(a.data, g)
            b._accum(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), bw)


# -- elementwise nonlinearities ---------------------------------------------

def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        a._accum(g * out)

    return _make(out, (a,), bw)


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)

    def bw(g):
        a._accum(g / a.data)

    return _make(out, (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        a._accum(g * 0.5 / out)

    return _make(out, (a,), bw)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        a._accum(g * (1.0 - out * out))

    return _make(out, (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a._accum(g * out * (1.0 - out))

    return _make(out, (a,), bw)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bw(g):
        a._accum(g * (a.data > 0.0))

    return _make(out, (a,), bw)


def swish(a):
    """x * sigmoid(x), the gating nonlinearity used in transitions."""
    return mul(a, sigmoid(a))


def sin(a):
    a = as_tensor(a)
    out = np.sin(a.data)

    def bw(g):
        a._accum(g * np.cos(a.data))

    return _make(out, (a,), bw)


def cos(a):
    a = as_tensor(a)
    out = np.cos(a.data)

    def bw(g):
        a._accum(-g * np.sin(a.data))

    return _make(out, (a,), bw)


def sign_ste(a):
    """sign with sign(0)=+1; straight-through identity gradient."""
    a = as_tensor(a)
    out = np.where(a.data >= 0.0, 1.0, -1.0)

    def bw(g):
        a._accum(g)

    return _make(out, (a,), bw)


# -- reductions -------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.shape).copy())

    return _make(out, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# -- shape ops --------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        a._accum(g.reshape(a.shape))

    return _make(out, (a,), bw)


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)

    def bw(g):
        inv = None if axes is None else np.argsort(axes)
        a._accum(np.transpose(g, inv))

    return _make(out, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accum(p)

    return _make(out, tuple(tensors), bw)


def take(a, idx):
    """Basic slicing or integer-array gather; backward scatters-adds."""
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        gz = np.zeros_like(a.data)
        np.add.at(gz, idx, g)
        a._accum(gz)

    return _make(out, (a,), bw)


def where(cond, a, b):
    """cond is a constant boolean array; gradients flow to both branches."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _make(out, (a, b), bw)


# -- normalizations ---------------------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accum((g - dot) * out)

    return _make(out, (a,), bw)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse

    def bw(g):
        sm = np.exp(out)
        a._accum(g - sm * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), bw)


def layernorm(a, eps=LAYERNORM_EPS):
    """Normalize the trailing axis to zero mean, unit variance (pre-affine).

    Constant rows map to zeros: variance 0 plus eps avoids division by zero.
    """
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        n = a.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        a._accum(inv * (g - gm - out * gxm))
        del n

    return _make(out, (a,), bw)


# -- pair-tensor contractions (hot kernels) ---------------------------------

def tri_contract(a, b, mode):
    """Channel-wise L x L contraction used by triangle multiplicative updates.

    mode 'outgoing': out[i,j,d] = sum_k a[i,k,d] * b[j,k,d]
    mode 'incoming': out[i,j,d] = sum_k a[k,i,d] * b[k,j,d]
    """
    from . import kernels

    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 3 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"tri_contract: {a.shape} vs {b.shape}")
    if mode == "outgoing":
        # per channel d: O = A B^T, dA = G B, dB = G^T A
        out = kernels.cmm_bt(a.data, b.data)

        def bw(g):
            if a.requires_grad:
                a._accum(kernels.cmm(g, b.data))
            if b.requires_grad:
                b._accum(kernels.cmm_at(g, a.data))

    elif mode == "incoming":
        # per channel d: O = A^T B, dA = B G^T, dB = A G
        out = kernels.cmm_at(a.data, b.data)

        def bw(g):
            if a.requires_grad:
                a._accum(kernels.cmm_bt(b.data, g))
            if b.requires_grad:
                b._accum(kernels.cmm(a.data, g))

    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _make(out, (a, b), bw)


def pair_dist(x, eps=1e-8):
    """Smoothed pairwise distance matrix of an (L,3) point set.

    D[i,j] = sqrt(|x_i - x_j|^2 + eps); eps keeps the diagonal
    differentiable.
    """
    from . import kernels

    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ShapeMismatch(f"pair_dist expects (L,3), got {x.shape}")
    out = kernels.pdist(x.data, eps)

    def bw(g):
        x._accum(kernels.pdist_grad(x.data, out, g, eps))

    return _make(out, (x,), bw)


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    passed: bool

    def __str__(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] max_rel_err={self.max_rel_err:.3e} at {self.worst_param}"


def grad_check(fn, params, step=1e-5, seed=0, tol=1e-4, max_entries=40):
    """Compare backward() gradients with central finite differences.

    `fn` rebuilds the loss from scratch on each call (it closes over
    `params`, a dict name -> Tensor). Large tensors are subsampled
    deterministically by `seed`.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params.values():
        p.zero_grad()
    loss = fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    rng = np.random.default_rng(seed)
    worst, worst_name = 0.0, "<none>"
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * step)
            ana = analytic[name].reshape(-1)[i]
            denom = max(abs(num), abs(ana), 1.0)
            rel = abs(num - ana) / denom
            if rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
    return GradCheckReport(max_rel_err=worst, worst_param=worst_name, passed=worst < tol)


# -- parameter containers ---------------------------------------------------

class Module:
    """Minimal parameter container: Tensor attributes and sub-Modules."""

    def parameters(self, prefix=""):
        out = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.parameters(prefix=key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.parameters(prefix=f"{key}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{key}.{i}"] = item
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()


def param(rng, *shape, scale=None):
    """Gaussian-initialized trainable tensor; fan-in scaling by default."""
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
        scale = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def zeros_param(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, zero_init=False):
        if zero_init:
            self.w = zeros_param(d_in, d_out)
        else:
            self.w = param(rng, d_in, d_out)
        self.b = zeros_param(d_out)

    def __call__(self, x):
        return matmul(x, self.w) + self.b


class Affine(Module):
    """Post-layernorm learnable scale and shift."""

    def __init__(self, d):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = zeros_param(d)

    def __call__(self, x):
        return x * self.gamma + self.beta
