"""Dense tensor with reverse-mode automatic differentiation.

Values are numpy arrays (float32 by default, float64 for gradient checks).
Every operation that receives a tensor requiring grad records a node holding
references to its parents and a closure computing the parent gradients; the
node graph is the tape. ``Tensor.backward()`` walks it once in reverse
topological order and then releases it, so graphs are rebuilt on every
forward pass.

Broadcasting follows the trailing-dimension rule everywhere. Any op whose
result contains NaN/Inf raises ``NonFiniteResult`` instead of propagating.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import (
    NonDeterministicFunction,
    NonFiniteResult,
    NotScalar,
    ShapeMismatch,
)

DEFAULT_DTYPE = np.float32

# log/div operands are clamped away from zero by this much
DOMAIN_EPS = 1e-12


class DisconnectedGraphWarning(UserWarning):
    pass


class _Node:
    """Tape entry: parents of one op plus the closure producing their grads."""

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of trailing-dim broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteResult(f"non-finite values produced by op '{op}'")


class Tensor:
    """N-dimensional array of reals with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype if dtype is not None else DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        _check_finite(self.data, "tensor")

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def astype(self, dtype):
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- graph plumbing --------------------------------------------------------

    @staticmethod
    def _result(data, op, parents, backward):
        """Wrap op output; record a tape node if any parent needs grad."""
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._node = _Node(op, parents, backward) if out.requires_grad else None
        return out

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self):
        """Reverse-mode sweep from a scalar; fills ``grad`` on every leaf.

        The node graph is released afterwards, so each forward pass supports
        exactly one backward pass.
        """
        if self.size != 1:
            raise NotScalar(f"backward requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            warnings.warn(
                "backward on a tensor with no graph; all gradients are zero",
                DisconnectedGraphWarning,
            )
            return
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if id(p) not in visited:
                        stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            node = t._node
            if node is None:
                continue
            t._node = None  # release the tape as we go
            if t.grad is None:
                continue  # no gradient reached this node
            grads = node.backward(t.grad)
            for p, g in zip(node.parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p._accumulate(g)
            if t is not self:
                t.grad = None

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise binary ---------------------------------------------------------


def add(a, b):
    _broadcast_shape(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(out, "add", (a, b), backward)


def sub(a, b):
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(out, "sub", (a, b), backward)


def mul(a, b):
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return Tensor._result(out, "mul", (a, b), backward)


def div(a, b, eps=DOMAIN_EPS):
    """a / b with the denominator clamped to |b| >= eps (sign preserved)."""
    _broadcast_shape(a, b, "div")
    sign = np.where(b.data < 0, -1.0, 1.0)
    bsafe = sign * np.maximum(np.abs(b.data), eps)
    out = a.data / bsafe
    ad = a.data

    def backward(g):
        ga = g / bsafe
        gb = -g * ad / (bsafe * bsafe)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(out, "div", (a, b), backward)


# -- elementwise unary ----------------------------------------------------------


def neg(a):
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def texp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")
    return Tensor._result(out, "exp", (a,), lambda g: (g * out,))


def tlog(a, eps=DOMAIN_EPS):
    """log with the operand clamped to >= eps."""
    safe = np.maximum(a.data, eps)
    out = np.log(safe)
    return Tensor._result(out, "log", (a,), lambda g: (g / safe,))


def sigmoid(a):
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, "sigmoid", (a,), backward)


def elu(a):
    x = a.data
    ex = np.exp(np.minimum(x, 0.0))
    out = np.where(x > 0, x, ex - 1.0)

    def backward(g):
        return (g * np.where(x > 0, 1.0, ex),)

    return Tensor._result(out, "elu", (a,), backward)


def silu(a):
    x = a.data
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def backward(g):
        return (g * (sig + x * sig * (1.0 - sig)),)

    return Tensor._result(out, "silu", (a,), backward)


def softplus(a):
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 1.0 / (1.0 + np.exp(-x))
    return Tensor._result(out, "softplus", (a,), lambda g: (g * sig,))


def tsqrt(a, eps=DOMAIN_EPS):
    safe = np.maximum(a.data, eps)
    out = np.sqrt(safe)
    return Tensor._result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def clamp(a, lo, hi):
    """Clamp values into [lo, hi]; gradient passes only where not clamped."""
    x = a.data
    out = np.clip(x, lo, hi)
    inside = (x > lo) & (x < hi)

    def backward(g):
        return (g * inside,)

    return Tensor._result(out, "clamp", (a,), backward)


ELEMENTWISE_UNARY = {
    "neg": neg,
    "exp": texp,
    "log": tlog,
    "elu": elu,
    "silu": silu,
    "sigmoid": sigmoid,
}

ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op, a, b=None):
    """Dispatch by op name; binary ops require b."""
    if op in ELEMENTWISE_BINARY:
        if b is None:
            raise ShapeMismatch(f"{op} requires two operands")
        return ELEMENTWISE_BINARY[op](a, b)
    if op in ELEMENTWISE_UNARY:
        return ELEMENTWISE_UNARY[op](a)
    raise ValueError(f"unknown elementwise op '{op}'")


# -- contractions / reductions ---------------------------------------------------


def matmul(a, b):
    """Batched matrix product of [.., m, k] x [.., k, n]; batch dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} x {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeMismatch(f"matmul batch dims do not broadcast: {a.shape} x {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._result(out, "matmul", (a, b), backward)


def softmax(a, axis=-1):
    """Numerically stable softmax; slices along `axis` sum to one."""
    x = a.data
    axis = axis if axis >= 0 else x.ndim + axis
    if axis < 0 or axis >= x.ndim:
        raise ShapeMismatch(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._result(out, "softmax", (a,), backward)


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out), "sum", (a,), backward)


def tmean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor._result(np.asarray(out), "mean", (a,), backward)


def cumsum(a, axis):
    out = np.cumsum(a.data, axis=axis)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return Tensor._result(out, "cumsum", (a,), backward)


# -- shape ops -------------------------------------------------------------------


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    out = a.data.reshape(shape)
    return Tensor._result(out, "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return Tensor._result(out, "transpose", (a,), backward)


def broadcast_to(a, shape):
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} to {shape}") from exc

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return Tensor._result(out, "broadcast_to", (a,), backward)


def linear_recurrence(decay, inject, axis=1):
    """Sequential scan h_k = decay_k * h_{k-1} + inject_k along `axis`.

    Single tape node: the backward pass reverses the recurrence instead of
    unrolling per-step graph nodes, which keeps long scans cheap.
    """
    _broadcast_shape(decay, inject, "linear_recurrence")
    d = np.moveaxis(decay.data, axis, 0)
    b = np.moveaxis(inject.data, axis, 0)
    n = d.shape[0]
    h = np.empty_like(b)
    acc = np.zeros_like(b[0])
    for k in range(n):
        acc = d[k] * acc + b[k]
        h[k] = acc
    out = np.moveaxis(h, 0, axis).copy()

    def backward(g):
        gm = np.moveaxis(g, axis, 0)
        gd = np.empty_like(d)
        gb = np.empty_like(b)
        carry = np.zeros_like(gm[0])
        for k in range(n - 1, -1, -1):
            carry = carry + gm[k]
            gb[k] = carry
            prev = h[k - 1] if k > 0 else np.zeros_like(h[0])
            gd[k] = carry * prev
            carry = carry * d[k]
        return (
            np.moveaxis(gd, 0, axis).copy(),
            np.moveaxis(gb, 0, axis).copy(),
        )

    return Tensor._result(out, "linear_recurrence", (decay, inject), backward)


def topk_row_mean(a, k, exclude_diag=True):
    """Mean of the k largest entries per row of [.., N, N] matrices.

    With ``exclude_diag`` the diagonal never participates (self matches are
    not evidence of duplication). Gradient flows only into selected entries.
    """
    x = a.data
    n = x.shape[-1]
    if x.shape[-2] != n:
        raise ShapeMismatch(f"topk_row_mean expects square trailing dims, got {x.shape}")
    limit = n - 1 if exclude_diag else n
    if not 1 <= k <= limit:
        from .errors import KOutOfRange

        raise KOutOfRange(f"k={k} out of range [1, {limit}] for N={n}")
    work = x.copy()
    if exclude_diag:
        idx = np.arange(n)
        work[..., idx, idx] = -np.inf
    sel = np.argpartition(work, -k, axis=-1)[..., -k:]
    out = np.take_along_axis(work, sel, axis=-1).mean(axis=-1)

    def backward(g):
        gx = np.zeros_like(x)
        np.put_along_axis(
            gx, sel, np.broadcast_to((g / k)[..., None], sel.shape), axis=-1
        )
        # put_along_axis overwrites; selected indices are unique per row, so
        # overwrite and accumulate coincide here
        return (gx,)

    return Tensor._result(out, "topk_row_mean", (a,), backward)


# -- gradient checking -----------------------------------------------------------


class GradCheckReport:
    """Per-coordinate comparison of analytic and central-difference gradients."""

    def __init__(self, max_rel_err, max_abs_err, n_checked, passed):
        self.max_rel_err = max_rel_err
        self.max_abs_err = max_abs_err
        self.n_checked = n_checked
        self.passed = passed

    def __repr__(self):
        return (
            f"GradCheckReport(passed={self.passed}, max_rel_err={self.max_rel_err:.3e}, "
            f"max_abs_err={self.max_abs_err:.3e}, n={self.n_checked})"
        )


def grad_check(f, x, h=1e-5, tol=1e-4, sample=None, rng=None, abs_floor=1e-7):
    """Compare analytic gradients of scalar ``f(x)`` against central differences.

    ``x`` must be float64 for the differences to resolve at tol 1e-4.
    ``sample`` limits the number of coordinates checked (all by default).
    A coordinate passes if the relative error is within ``tol`` or the
    absolute difference is below ``abs_floor`` (covers true-zero gradients).
    """
    if x.dtype != np.float64:
        raise ValueError("grad_check requires a float64 input tensor")
    y0 = f(x)
    y1 = f(x)
    if y0.data.tobytes() != y1.data.tobytes():
        raise NonDeterministicFunction("two forward passes disagree bit-for-bit")
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    n = flat.size
    if sample is not None and sample < n:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=sample, replace=False)
    else:
        coords = np.arange(n)

    max_rel = 0.0
    max_abs = 0.0
    ga = analytic.reshape(-1)
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        fp = f(x).item()
        flat[c] = orig - h
        fm = f(x).item()
        flat[c] = orig
        num = (fp - fm) / (2 * h)
        diff = abs(ga[c] - num)
        denom = max(abs(ga[c]), abs(num))
        rel = 0.0 if diff <= abs_floor else diff / max(denom, 1e-300)
        max_rel = max(max_rel, rel)
        max_abs = max(max_abs, diff)
    return GradCheckReport(max_rel, max_abs, len(coords), max_rel <= tol)
