"""Minimal dense tensor engine with reverse-mode gradients.

Tensors wrap numpy arrays. Every op records a backward closure on the tape
of the active ExecutionContext, and every tensor allocation is charged to
that context's AllocationLedger (values, not bytes), so peak activation
memory and multiply-add counts are exact and deterministic.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from . import kernels


class DimensionError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ContractError(ValueError):
    pass


def _default_dtype():
    p = os.environ.get("MEXFUSE_PRECISION", "f64").strip().lower()
    if p == "f32":
        return np.float32
    if p == "f64":
        return np.float64
    raise RuntimeError(f"MEXFUSE_PRECISION must be f32 or f64, got {p!r}")


DEFAULT_DTYPE = _default_dtype()


class AllocationLedger:
    """Counts live tensor values, their peak, and accumulated multiply-adds."""

    def __init__(self):
        self.live_values = 0
        self.peak_values = 0
        self.flops = 0

    def alloc(self, n):
        self.live_values += n
        if self.live_values > self.peak_values:
            self.peak_values = self.live_values

    def free(self, n):
        self.live_values -= n

    def add_flops(self, n):
        self.flops += n

    def reset(self):
        self.live_values = 0
        self.peak_values = 0
        self.flops = 0

    def snapshot(self):
        return {
            "live_values": self.live_values,
            "peak_values": self.peak_values,
            "flops": self.flops,
        }


class ExecutionContext:
    """One tape/ledger pair. Parallel workers each get their own context."""

    def __init__(self):
        self.ledger = AllocationLedger()
        self.tape = []
        self.grad_enabled = True

    def record(self, tensor):
        self.tape.append(tensor)

    def free_tape(self):
        """Drop tape references and release their ledger charge."""
        for t in self.tape:
            if not t.is_leaf:
                self.ledger.free(t.data.size)
                t._parents = ()
                t._backward = None
        self.tape.clear()


_CTX = ExecutionContext()


def current_context():
    return _CTX


@contextmanager
def fresh_context():
    global _CTX
    saved = _CTX
    _CTX = ExecutionContext()
    try:
        yield _CTX
    finally:
        _CTX = saved


@contextmanager
def use_context(ctx):
    global _CTX
    saved = _CTX
    _CTX = ctx
    try:
        yield ctx
    finally:
        _CTX = saved


@contextmanager
def no_grad():
    prev = _CTX.grad_enabled
    _CTX.grad_enabled = False
    try:
        yield
    finally:
        _CTX.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "_parents", "_backward", "_ctx")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.is_leaf = _backward is None
        ctx = current_context()
        self._ctx = ctx
        ctx.ledger.alloc(arr.size)
        if not self.is_leaf:
            ctx.record(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    # ---- autograd plumbing -------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None:
                t._backward(t.grad)

    def zero_grad(self):
        self.grad = None


def _result(data, parents, backward_fn):
    ctx = current_context()
    needs = ctx.grad_enabled and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, dtype=data.dtype,
                      _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data, dtype=data.dtype)


# ---- elementwise ops -------------------------------------------------------


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a, b):
    _check_same_shape(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), bwd)


def sub(a, b):
    _check_same_shape(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result(a.data - b.data, (a, b), bwd)


def mul(a, b):
    _check_same_shape(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), bwd)


def scale(a, c):
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _result(a.data * c, (a,), bwd)


def add_bias(x, bias):
    """x[..., d] + bias[d], broadcast over leading axes."""
    if x.data.shape[-1] != bias.data.shape[-1] or bias.data.ndim != 1:
        raise DimensionError(
            f"add_bias: trailing dim {x.data.shape} vs bias {bias.data.shape}")

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g)
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _result(x.data + bias.data, (x, bias), bwd)


def gelu(x):
    """tanh-approximation GELU; smooth, so finite differences behave."""
    c = np.sqrt(2.0 / np.pi)
    xd = x.data
    inner = c * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bwd(g):
        if x.requires_grad:
            d_inner = c * (1.0 + 3 * 0.044715 * xd ** 2)
            dydx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * d_inner
            x._accumulate(g * dydx)

    return _result(out, (x,), bwd)


def relu(x):
    mask = x.data > 0

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), bwd)


# ---- linear algebra --------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul: need 2-D operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.data.shape} x {b.data.shape}")
    m, k = a.data.shape
    n = b.data.shape[1]
    ctx = current_context()
    ctx.ledger.add_flops(m * n * k)
    out = kernels.matmul2d(np.ascontiguousarray(a.data), np.ascontiguousarray(b.data))

    def bwd(g):
        if a.requires_grad:
            ctx.ledger.add_flops(m * k * n)
            a._accumulate(kernels.matmul2d(np.ascontiguousarray(g),
                                           np.ascontiguousarray(b.data.T)))
        if b.requires_grad:
            ctx.ledger.add_flops(k * n * m)
            b._accumulate(kernels.matmul2d(np.ascontiguousarray(a.data.T),
                                           np.ascontiguousarray(g)))

    return _result(out, (a, b), bwd)


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: need 2-D, got {a.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _result(np.ascontiguousarray(a.data.T), (a,), bwd)


def reshape(a, shape):
    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _result(np.ascontiguousarray(a.data.reshape(shape)), (a,), bwd)


def softmax_rows(a):
    """Row-stable softmax along the last axis of a 2-D tensor."""
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows: need 2-D, got {a.data.shape}")
    y = kernels.softmax_rows2d(np.ascontiguousarray(a.data))

    def bwd(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            a._accumulate(y * (g - dot))

    return _result(y, (a,), bwd)


# ---- reductions ------------------------------------------------------------


def sum_all(a):
    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g)))

    return _result(np.asarray(a.data.sum()), (a,), bwd)


def mean_axis(a, axis):
    if a.data.shape[axis] == 0:
        raise DegenerateInputError(f"mean over empty axis {axis} of {a.data.shape}")
    n = a.data.shape[axis]

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return _result(a.data.mean(axis=axis), (a,), bwd)


def max_axis(a, axis):
    if a.data.shape[axis] == 0:
        raise DegenerateInputError(f"max over empty axis {axis} of {a.data.shape}")
    idx = np.argmax(a.data, axis=axis)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, np.expand_dims(idx, axis),
                              np.expand_dims(g, axis), axis)
            a._accumulate(full)

    return _result(np.max(a.data, axis=axis), (a,), bwd)


def stack(tensors):
    """Stack same-shape tensors along a new leading axis."""
    shapes = {t.data.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: inconsistent shapes {sorted(shapes)}")

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(g[i])

    return _result(np.stack([t.data for t in tensors]), tuple(tensors), bwd)


# ---- similarity ------------------------------------------------------------


def cosine_similarity(a, b):
    """cos(a, b) for 1-D vectors, clamped to [-1, 1]. Zero vectors are rejected."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise DimensionError(f"cosine: need matching 1-D vectors, got {a.data.shape} vs {b.data.shape}")
    na = np.linalg.norm(a.data)
    nb = np.linalg.norm(b.data)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    dot = float(a.data @ b.data)
    c = dot / (na * nb)
    clamped = min(1.0, max(-1.0, c))

    def bwd(g):
        g = float(g)
        if a.requires_grad:
            a._accumulate(g * (b.data / (na * nb) - c * a.data / (na * na)))
        if b.requires_grad:
            b._accumulate(g * (a.data / (na * nb) - c * b.data / (nb * nb)))

    return _result(np.asarray(clamped), (a, b), bwd)


# ---- parameter containers --------------------------------------------------


class Linear:
    """Affine map along the last axis; census = d_in*d_out + d_out."""

    def __init__(self, w, bias):
        w = w if isinstance(w, Tensor) else Tensor(w)
        bias = bias if isinstance(bias, Tensor) else Tensor(bias)
        if w.data.ndim != 2 or bias.data.ndim != 1 or bias.data.shape[0] != w.data.shape[1]:
            raise DimensionError(f"linear params: w {w.data.shape}, bias {bias.data.shape}")
        self.w = w
        self.bias = bias

    @classmethod
    def init(cls, d_in, d_out, rng, scale=None, requires_grad=True):
        scale = scale if scale is not None else 1.0 / np.sqrt(d_in)
        w = Tensor(rng.standard_normal((d_in, d_out)) * scale, requires_grad=requires_grad)
        b = Tensor(np.zeros(d_out), requires_grad=requires_grad)
        return cls(w, b)

    @property
    def d_in(self):
        return self.w.data.shape[0]

    @property
    def d_out(self):
        return self.w.data.shape[1]

    def param_count(self):
        return self.d_in * self.d_out + self.d_out

    def parameters(self):
        return [self.w, self.bias]

    def __call__(self, x):
        if x.data.shape[-1] != self.d_in:
            raise DimensionError(
                f"linear: input trailing dim {x.data.shape} vs weight {self.w.data.shape}")
        lead = x.data.shape[:-1]
        flat = reshape(x, (-1, self.d_in)) if x.data.ndim != 2 else x
        out = add_bias(matmul(flat, self.w), self.bias)
        if x.data.ndim != 2:
            out = reshape(out, lead + (self.d_out,))
        return out


def linear(x, w, bias):
    return Linear(w, bias)(x)


def sgd_momentum_step(params, velocities, lr, momentum):
    """Classic momentum update: v = mu*v + grad; w -= lr*v. In-place on leaves."""
    for p, v in zip(params, velocities):
        if p.grad is None:
            continue
        v *= momentum
        v += p.grad
        p.data -= lr * v
        p.grad = None
