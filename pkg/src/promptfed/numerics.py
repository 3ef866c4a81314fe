"""Dense float64 kernels with hand-written vector-Jacobian products.

Tensors are plain C-contiguous ``numpy.float64`` arrays. Differentiation goes
through :class:`Tape`: every op records its inputs and a VJP closure, and
:meth:`Tape.backward` replays them in reverse. Leaves are either trainable
(they receive a gradient, zero if unreachable) or frozen (never touched).
Only branches that lead to a trainable leaf are differentiated, so frozen
backbone weights cost nothing in the backward pass.
"""

from __future__ import annotations

import numpy as np

from . import _backend

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input for which the operation is undefined (e.g. a zero-norm vector)."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


# ---------------------------------------------------------------------------
# Standalone kernels (value + VJP), used directly by tests and small callers.
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_vjp(a, b, g):
    a, b, g = as_tensor(a), as_tensor(b), as_tensor(g)
    return g @ b.T, a.T @ g


def softmax_rows(x):
    x = as_tensor(x)
    shape = x.shape
    return _backend.kernels.softmax_fwd(x.reshape(-1, shape[-1])).reshape(shape)


def softmax_rows_vjp(x, g):
    x, g = as_tensor(x), as_tensor(g)
    y = softmax_rows(x)
    n = x.shape[-1]
    return _backend.kernels.softmax_bwd(y.reshape(-1, n), g.reshape(-1, n)).reshape(x.shape)


def layer_norm(x, gamma, beta, eps=1e-5):
    x = as_tensor(x)
    n = x.shape[-1]
    y, _, _ = _backend.kernels.layer_norm_fwd(
        np.ascontiguousarray(x.reshape(-1, n)), as_tensor(gamma), as_tensor(beta), float(eps)
    )
    return y.reshape(x.shape)


def layer_norm_vjp(x, gamma, beta, g, eps=1e-5):
    """Returns (dx, dgamma, dbeta)."""
    x, g = as_tensor(x), as_tensor(g)
    n = x.shape[-1]
    k = _backend.kernels
    _, xhat, rstd = k.layer_norm_fwd(x.reshape(-1, n), as_tensor(gamma), as_tensor(beta), float(eps))
    gx, gg, gb = k.layer_norm_bwd(g.reshape(-1, n), xhat, rstd, as_tensor(gamma))
    return gx.reshape(x.shape), gg, gb


def gelu(x):
    """Tanh-approximate GELU: 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3)))."""
    return _backend.kernels.gelu_fwd(as_tensor(x))


def gelu_vjp(x, g):
    return _backend.kernels.gelu_bwd(as_tensor(x), as_tensor(g))


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label: int) -> float:
    logits = as_tensor(logits)
    if not 0 <= label < logits.shape[-1]:
        raise IndexError(f"label {label} out of range for {logits.shape[-1]} classes")
    return float(-_log_softmax(logits)[label])


def cross_entropy_grad(logits, label: int):
    logits = as_tensor(logits)
    if not 0 <= label < logits.shape[-1]:
        raise IndexError(f"label {label} out of range for {logits.shape[-1]} classes")
    g = np.exp(_log_softmax(logits))
    g[label] -= 1.0
    return g


def _norms(x):
    n = np.sqrt((x * x).sum(axis=-1))
    if np.any(n == 0.0):
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return n


def cosine_similarity(a, b):
    """Cosine along the last axis; broadcasts leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine: last dims differ {a.shape} vs {b.shape}")
    c = (a * b).sum(axis=-1) / (_norms(a) * _norms(b))
    return float(c) if c.ndim == 0 else c


def cosine_similarity_vjp(a, b, g=1.0):
    """Returns (d/da, d/db) of g * cos(a, b)."""
    a, b = as_tensor(a), as_tensor(b)
    na, nb = _norms(a)[..., None], _norms(b)[..., None]
    c = (a * b).sum(axis=-1, keepdims=True) / (na * nb)
    g = np.asarray(g, dtype=DTYPE)[..., None] if np.ndim(g) else g
    ga = g * (b / (na * nb) - c * a / (na * na))
    gb = g * (a / (na * nb) - c * b / (nb * nb))
    return ga, gb


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Var:
    __slots__ = ("value", "grad", "requires_grad", "name", "trainable")

    def __init__(self, value, requires_grad=False, name=None, trainable=False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or ''}{list(self.value.shape)})"


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Records kernel applications for one forward pass."""

    def __init__(self):
        self._nodes = []
        self._leaves = []

    # leaves -------------------------------------------------------------
    def leaf(self, value, trainable=False, name=None) -> Var:
        v = Var(as_tensor(value), requires_grad=trainable, name=name, trainable=trainable)
        self._leaves.append(v)
        return v

    def const(self, value) -> Var:
        return Var(as_tensor(value))

    def trainable_leaves(self):
        return [v for v in self._leaves if v.trainable]

    def frozen_leaves(self):
        return [v for v in self._leaves if not v.trainable]

    def _emit(self, value, inputs, vjp) -> Var:
        req = any(x.requires_grad for x in inputs)
        out = Var(value, requires_grad=req)
        if req:
            self._nodes.append((out, inputs, vjp))
        return out

    def backward(self, loss: Var):
        if loss.value.size != 1:
            raise DimensionError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for out, inputs, vjp in reversed(self._nodes):
            if out.grad is None:
                continue
            grads = vjp(out.grad)
            for x, gx in zip(inputs, grads):
                if gx is None or not x.requires_grad:
                    continue
                x.grad = gx if x.grad is None else x.grad + gx
        for v in self._leaves:
            if v.trainable and v.grad is None:
                v.grad = np.zeros_like(v.value)

    # elementwise / structural ops --------------------------------------
    def add(self, a: Var, b: Var) -> Var:
        sa, sb = a.shape, b.shape
        return self._emit(
            a.value + b.value,
            (a, b),
            lambda g: (
                _unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None,
            ),
        )

    def mul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        return self._emit(
            av * bv,
            (a, b),
            lambda g: (
                _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
            ),
        )

    def scale(self, a: Var, c: float) -> Var:
        return self._emit(a.value * c, (a,), lambda g: (g * c,))

    def matmul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
            raise DimensionError(f"matmul: cannot multiply {av.shape} by {bv.shape}")

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(bv, -1, -2)) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                if bv.ndim == 2 and av.ndim > 2:
                    gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
            return ga, gb

        return self._emit(np.matmul(av, bv), (a, b), vjp)

    def reshape(self, a: Var, shape) -> Var:
        old = a.shape
        return self._emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def transpose(self, a: Var, axes) -> Var:
        inv = np.argsort(axes)
        return self._emit(
            np.ascontiguousarray(a.value.transpose(axes)),
            (a,),
            lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        )

    def broadcast_to(self, a: Var, shape) -> Var:
        old = a.shape
        return self._emit(
            np.ascontiguousarray(np.broadcast_to(a.value, shape)),
            (a,),
            lambda g: (_unbroadcast(g, old),),
        )

    def concat(self, parts, axis) -> Var:
        parts = tuple(parts)
        sizes = [p.shape[axis] for p in parts]
        bounds = np.cumsum([0] + sizes)

        def vjp(g):
            out = []
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    out.append(np.ascontiguousarray(g[tuple(idx)]))
                else:
                    out.append(None)
            return tuple(out)

        return self._emit(np.concatenate([p.value for p in parts], axis=axis), parts, vjp)

    def slice(self, a: Var, key) -> Var:
        shape = a.shape

        def vjp(g):
            full = np.zeros(shape)
            full[key] = g
            return (full,)

        return self._emit(np.ascontiguousarray(a.value[key]), (a,), vjp)

    def gather(self, a: Var, index) -> Var:
        """Rows of ``a`` along axis 0 picked by an integer index array."""
        index = np.asarray(index, dtype=np.intp)
        shape = a.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return self._emit(a.value[index], (a,), vjp)

    def mean(self, a: Var, axis=None) -> Var:
        shape = a.shape
        n = a.value.size if axis is None else shape[axis]

        def vjp(g):
            gg = g if axis is None else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape) / n,)

        return self._emit(np.asarray(a.value.mean(axis=axis)), (a,), vjp)

    # kernels ------------------------------------------------------------
    def layer_norm(self, x: Var, gamma: Var, beta: Var, eps=1e-5) -> Var:
        n = x.shape[-1]
        k = _backend.kernels
        y, xhat, rstd = k.layer_norm_fwd(x.value.reshape(-1, n), gamma.value, beta.value, float(eps))

        def vjp(g):
            gx, gg, gb = k.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, n)), xhat, rstd, gamma.value)
            return gx.reshape(x.shape), gg, gb

        return self._emit(y.reshape(x.shape), (x, gamma, beta), vjp)

    def gelu(self, x: Var) -> Var:
        k = _backend.kernels
        xv = x.value
        return self._emit(k.gelu_fwd(xv), (x,), lambda g: (k.gelu_bwd(xv, g),))

    def softmax_rows(self, x: Var) -> Var:
        n = x.shape[-1]
        k = _backend.kernels
        y = k.softmax_fwd(x.value.reshape(-1, n))

        def vjp(g):
            return (k.softmax_bwd(y, np.ascontiguousarray(g.reshape(-1, n))).reshape(x.shape),)

        return self._emit(y.reshape(x.shape), (x,), vjp)

    def attention(self, q: Var, k: Var, v: Var) -> Var:
        """Scaled dot-product attention on (N, L, dh) stacks."""
        kern = _backend.kernels
        out, p = kern.attention_fwd(q.value, k.value, v.value)

        def vjp(g):
            return kern.attention_bwd(q.value, k.value, v.value, p, np.ascontiguousarray(g))

        return self._emit(out, (q, k, v), vjp)

    def cross_entropy(self, logits: Var, labels) -> Var:
        """Mean cross-entropy over a batch of (B, C) logits."""
        labels = np.asarray(labels, dtype=np.intp)
        B, C = logits.shape
        if labels.shape != (B,) or np.any(labels < 0) or np.any(labels >= C):
            raise IndexError("labels out of range")
        logp = _log_softmax(logits.value)
        loss = -logp[np.arange(B), labels].mean()

        def vjp(g):
            gl = np.exp(logp)
            gl[np.arange(B), labels] -= 1.0
            return (gl * (g / B),)

        return self._emit(np.asarray(loss), (logits,), vjp)

    def cosine(self, a: Var, b: Var) -> Var:
        """Row-wise cosine of two (B, n) operands -> (B,)."""
        av, bv = a.value, b.value
        val = cosine_similarity(av, bv)
        val = np.atleast_1d(np.asarray(val))

        def vjp(g):
            ga, gb = cosine_similarity_vjp(av, bv, g)
            return (ga if a.requires_grad else None, gb if b.requires_grad else None)

        return self._emit(val, (a, b), vjp)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` at array ``x`` (x is restored)."""
    x = np.asarray(x)
    g = np.zeros_like(x, dtype=DTYPE)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(analytic, numeric, floor=1e-8):
    """max |a - n| / max(|a|, |n|, floor) taken over the whole block."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)
