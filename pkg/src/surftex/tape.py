"""Minimal reverse-mode autodiff over numpy arrays, real and complex.

The operation vocabulary is deliberately closed: elementwise arithmetic,
complex algebra (conj / modulus / phase), channel matmuls, two-operand
einsums, reductions, softmax, gather/scatter and a few pointwise
activations. That is everything the networks in this package need, and
keeping the vocabulary small keeps every backward rule hand-checkable
against finite differences.

Gradient convention for complex tensors: for a real scalar loss L and a
complex leaf z = x + iy, ``z.grad == dL/dx + 1j * dL/dy``. With this
convention the backward rule for a holomorphic op ``w = f(z)`` is
``g_z = conj(f'(z)) * g_w``, and for a general op ``w = f(z, conj(z))``
it is ``g_z = conj(dw/dz) * g_w + (dw/dconj(z)) * conj(g_w)``. Gradients
accumulated into real tensors take the real part, which is the correct
projection of the same rule.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_complex(self):
        return np.iscomplexobj(self.data)

    def item(self):
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-accumulate gradients from this scalar real loss."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if self.is_complex:
            raise ValueError("backward() requires a real-valued loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accumulate(t: Tensor, g: np.ndarray):
    """Add g into t.grad, projecting complex→real where t is real."""
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.data.shape)
    if not t.is_complex and np.iscomplexobj(g):
        g = g.real
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _make(data, parents, backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise arithmetic
#
# Python-number operands stay raw scalars so they never promote float32 /
# complex64 tensors (0-d float64 arrays would).


def add(a, b) -> Tensor:
    if isinstance(b, (int, float, complex)) and not isinstance(b, Tensor):
        a = as_tensor(a)
        return _make(a.data + b, (a,), lambda g: _accumulate(a, g))
    if isinstance(a, (int, float, complex)) and not isinstance(a, Tensor):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float, complex)) and not isinstance(b, Tensor):
        a = as_tensor(a)
        return _make(a.data - b, (a,), lambda g: _accumulate(a, g))
    if isinstance(a, (int, float, complex)) and not isinstance(a, Tensor):
        b = as_tensor(b)
        return _make(a - b.data, (b,), lambda g: _accumulate(b, -g))
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(out_data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bw)


def mul(a, b) -> Tensor:
    """Elementwise product. Holomorphic in each factor."""
    if isinstance(b, (int, float, complex)) and not isinstance(b, Tensor):
        a = as_tensor(a)
        return _make(a.data * b, (a,), lambda g: _accumulate(a, g * np.conj(b)))
    if isinstance(a, (int, float, complex)) and not isinstance(a, Tensor):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        _accumulate(a, g * np.conj(b.data))
        _accumulate(b, g * np.conj(a.data))

    return _make(out_data, (a, b), bw)


def div(a, b) -> Tensor:
    if isinstance(b, (int, float, complex)) and not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bw(g):
        inv = 1.0 / b.data
        _accumulate(a, g * np.conj(inv))
        _accumulate(b, -g * np.conj(a.data * inv * inv))

    return _make(out_data, (a, b), bw)


# ---------------------------------------------------------------------------
# complex algebra


def conj(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, np.conj(g))

    return _make(np.conj(a.data), (a,), bw)


def creal(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g.astype(a.data.dtype) if a.is_complex else g)

    return _make(a.data.real.copy(), (a,), bw)


def cimag(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, 1j * g)

    return _make(a.data.imag.copy(), (a,), bw)


def as_complex(re, im) -> Tensor:
    """Assemble a complex tensor from two real tensors."""
    re, im = as_tensor(re), as_tensor(im)
    out_data = re.data + 1j * im.data

    def bw(g):
        _accumulate(re, g.real)
        _accumulate(im, g.imag)

    return _make(out_data, (re, im), bw)


def cabs2(a) -> Tensor:
    """Squared modulus, real output. d|z|^2 -> g_z = 2 g |z| direction."""
    a = as_tensor(a)
    out_data = (a.data * np.conj(a.data)).real

    def bw(g):
        _accumulate(a, 2.0 * g * a.data)

    return _make(out_data, (a,), bw)


def cabs(a, floor=1e-30) -> Tensor:
    """Modulus of a complex tensor (real output), gradient clamped at 0."""
    a = as_tensor(a)
    out_data = np.abs(a.data)

    def bw(g):
        denom = np.maximum(out_data, floor)
        _accumulate(a, g * a.data / denom)

    return _make(out_data, (a,), bw)


def phase_unit(a, floor=1e-30) -> Tensor:
    """z / |z| with the convention that the phase of 0 is 1."""
    a = as_tensor(a)
    mag = np.abs(a.data)
    safe = np.maximum(mag, floor)
    u = a.data / safe
    u = np.where(mag == 0.0, np.ones_like(u), u)

    def bw(g):
        _accumulate(a, (g - u * u * np.conj(g)) / (2.0 * safe))

    return _make(u, (a,), bw)


# ---------------------------------------------------------------------------
# real pointwise functions


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return _make(a.data * mask, (a,), bw)


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = _sigmoid(a.data)
    out_data = a.data * sig

    def bw(g):
        _accumulate(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out_data, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * np.conj(out_data))

    return _make(out_data, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g * np.conj(1.0 / a.data))

    return _make(np.log(a.data), (a,), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        _accumulate(a, g * np.conj(0.5 / out_data))

    return _make(out_data, (a,), bw)


def absval(a) -> Tensor:
    """|x| for real tensors (subgradient 0 at the kink)."""
    a = as_tensor(a)
    s = np.sign(a.data)

    def bw(g):
        _accumulate(a, g * s)

    return _make(np.abs(a.data), (a,), bw)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _make(y, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul_last(x, w) -> Tensor:
    """Channel matmul: out[..., i] = sum_j x[..., j] * w[i, j]."""
    x, w = as_tensor(x), as_tensor(w)
    out_data = x.data @ w.data.T

    def bw(g):
        _accumulate(x, g @ np.conj(w.data))
        gw = np.matmul(g.reshape(-1, g.shape[-1]).T,
                       np.conj(x.data.reshape(-1, x.data.shape[-1])))
        _accumulate(w, gw)

    return _make(out_data, (x, w), bw)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)

    def bw(g):
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def bmm(a, b) -> Tensor:
    """Batched matmul over the last two axes (BLAS-backed)."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        _accumulate(a, np.matmul(g, np.conj(b.data).swapaxes(-1, -2)))
        _accumulate(b, np.matmul(np.conj(a.data).swapaxes(-1, -2), g))

    return _make(out_data, (a, b), bw)


def einsum2(spec: str, a, b) -> Tensor:
    """Two-operand einsum. Every label of each input must appear in the
    output or in the other input (no unsummed diagonals)."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_l = spec.split("->")
    a_l, b_l = ins.split(",")
    out_data = np.einsum(spec, a.data, b.data)

    def bw(g):
        _accumulate(a, np.einsum(f"{out_l},{b_l}->{a_l}", g, np.conj(b.data)))
        _accumulate(b, np.einsum(f"{out_l},{a_l}->{b_l}", g, np.conj(a.data)))

    return _make(out_data, (a, b), bw)


# ---------------------------------------------------------------------------
# reductions and shaping


def rsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), bw)


def rmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(rsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _make(out_data, tuple(tensors), bw)


def take_columns(a, idx: np.ndarray) -> Tensor:
    """Select columns of the last axis by unique indices."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if len(np.unique(idx)) != idx.size:
        raise ValueError("take_columns requires unique indices")

    def bw(g):
        full = np.zeros_like(a.data)
        full[..., idx] = g
        _accumulate(a, full)

    return _make(a.data[..., idx].copy(), (a,), bw)


def slice_axis(a, axis, start, stop) -> Tensor:
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bw(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accumulate(a, full)

    return _make(a.data[sl].copy(), (a,), bw)


# ---------------------------------------------------------------------------
# gather / scatter


@dataclass(frozen=True)
class ScatterPlan:
    """Precomputed sort plan so gather's backward is a segment sum."""

    order: np.ndarray
    starts: np.ndarray
    targets: np.ndarray
    n_rows: int


def make_scatter_plan(idx: np.ndarray, n_rows: int) -> ScatterPlan:
    flat = np.asarray(idx).reshape(-1)
    order = np.argsort(flat, kind="stable")
    sorted_idx = flat[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    targets = sorted_idx[starts]
    return ScatterPlan(order=order, starts=starts, targets=targets, n_rows=n_rows)


def segment_sum(flat_values: np.ndarray, plan: ScatterPlan) -> np.ndarray:
    out = np.zeros((plan.n_rows,) + flat_values.shape[1:], dtype=flat_values.dtype)
    if plan.order.size:
        out[plan.targets] = np.add.reduceat(flat_values[plan.order], plan.starts, axis=0)
    return out


def gather_rows(x, idx: np.ndarray, plan: ScatterPlan | None = None) -> Tensor:
    """out = x[idx] over axis 0; idx may have any shape."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    local_plan = plan if plan is not None else make_scatter_plan(idx, x.data.shape[0])
    if local_plan.n_rows != x.data.shape[0]:
        raise ValueError("scatter plan does not match tensor row count")

    def bw(g):
        flat = g.reshape((idx.size,) + x.data.shape[1:])
        _accumulate(x, segment_sum(flat, local_plan))

    return _make(x.data[idx], (x,), bw)


def scatter_sum(x, idx: np.ndarray, n_rows: int) -> Tensor:
    """out[j] = sum over rows i with idx[i] == j; backward is a gather."""
    x = as_tensor(x)
    idx = np.asarray(idx).reshape(-1)
    if idx.shape[0] != x.data.shape[0]:
        raise ValueError("scatter index must match the leading axis")
    plan = make_scatter_plan(idx, n_rows)
    out_data = segment_sum(x.data, plan)

    def bw(g):
        _accumulate(x, g[idx])

    return _make(out_data, (x,), bw)


# ---------------------------------------------------------------------------
# gradient checking


def numeric_gradient(loss_fn, params, step=1e-4):
    """Central finite differences of a scalar loss over parameter tensors.

    Complex parameters are perturbed component-wise through a float view,
    so the returned arrays follow the same dL/dx + i dL/dy convention as
    the tape.
    """
    grads = []
    for p in params:
        view = p.data.view(np.float64) if p.data.dtype == np.complex128 else (
            p.data.view(np.float32) if p.data.dtype == np.complex64 else p.data)
        g = np.zeros_like(view)
        flat_v = view.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + step
            hi = float(loss_fn().data)
            flat_v[i] = orig - step
            lo = float(loss_fn().data)
            flat_v[i] = orig
            flat_g[i] = (hi - lo) / (2.0 * step)
        if np.iscomplexobj(p.data):
            g = g.reshape(view.shape).view(p.data.dtype).reshape(p.data.shape)
        grads.append(g)
    return grads


def check_gradients(loss_fn, params, step=1e-4, rtol=1e-3, atol=1e-7):
    """Compare tape gradients against central differences.

    Returns the worst relative error across all parameter components.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = numeric_gradient(loss_fn, params, step=step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol / rtol)
        worst = max(worst, float((diff / scale).max()) if diff.size else 0.0)
    return worst
