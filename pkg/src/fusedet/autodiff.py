"""Minimal reverse-mode automatic differentiation over numpy arrays.

The detector, its training losses and every attack objective are expressed
as small graphs of `Var` nodes.  Gradients are exact (up to float64
rounding), which is what makes the finite-difference checks in the test
suite meaningful.

Design notes:
  - no batch dimension anywhere; the model processes one scene at a time,
  - a node only records backward closures for parents that can reach a
    gradient-requiring leaf, so forward-only evaluation inside `no_grad()`
    carries almost no overhead,
  - `backward()` may be called once per graph; closures are released as
    the sweep passes through them.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward-only evaluation)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Var:
    """A numpy array plus the closures needed to backpropagate into its parents."""

    __slots__ = ("data", "grad", "needs_grad", "_pgrads")

    def __init__(self, data, pgrads=(), needs_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self._pgrads = pgrads
        self.needs_grad = needs_grad or bool(pgrads)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def backward(self):
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        order = _toposort(self)
        for node in reversed(order):
            if node.grad is None:
                node._pgrads = ()
                continue
            g = node.grad
            for parent, fn in node._pgrads:
                contrib = fn(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib
            node._pgrads = ()

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, needs_grad={self.needs_grad})"


def param(data) -> Var:
    """Leaf that accumulates a gradient."""
    return Var(np.asarray(data), needs_grad=True)


def const(data) -> Var:
    """Leaf without a gradient."""
    if isinstance(data, Var):
        return data
    return Var(np.asarray(data))


def _toposort(root):
    out = []
    seen = {id(root)}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            out.append(node)
            continue
        stack.append((node, True))
        for parent, _ in node._pgrads:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, False))
    return out


def _node(data, *pairs):
    """Create a Var; keep backward closures only for grad-requiring parents."""
    if _GRAD_ENABLED[-1]:
        kept = tuple((p, fn) for p, fn in pairs if p.needs_grad)
        if kept:
            return Var(data, pgrads=kept)
    return Var(data)


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------

def add(a, b):
    a, b = const(a), const(b)
    out = a.data + b.data
    return _node(
        out,
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    )


def mul(a, b):
    a, b = const(a), const(b)
    out = a.data * b.data
    return _node(
        out,
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    )


def matmul(a, b):
    a, b = const(a), const(b)
    out = a.data @ b.data
    return _node(
        out,
        (a, lambda g: g @ b.data.swapaxes(-1, -2)),
        (b, lambda g: a.data.swapaxes(-1, -2) @ g),
    )


def vsum(x, axis=None):
    x = const(x)
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return np.broadcast_to(g, x.data.shape).copy()
        gx = np.expand_dims(g, axis)
        return np.broadcast_to(gx, x.data.shape).copy()

    return _node(out, (x, back))


def vmean(x, axis=None):
    x = const(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(vsum(x, axis=axis), 1.0 / n)


def reshape(x, shape):
    x = const(x)
    return _node(x.data.reshape(shape), (x, lambda g: g.reshape(x.data.shape)))


def transpose(x, axes):
    x = const(x)
    inv = np.argsort(axes)
    return _node(x.data.transpose(axes), (x, lambda g: g.transpose(inv)))


def concat(parts, axis=0):
    parts = [const(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_back(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(out, *[(p, make_back(i)) for i, p in enumerate(parts)])


def gather(x, idx, axis=0):
    """Select rows/entries along `axis`; backward scatter-adds."""
    x = const(x)
    idx = np.asarray(idx)
    out = np.take(x.data, idx, axis=axis)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return gx

    return _node(out, (x, back))


# -- elementwise nonlinearities ----------------------------------------

def leaky_relu(x, alpha=0.1):
    x = const(x)
    pos = x.data > 0
    out = np.where(pos, x.data, alpha * x.data)
    return _node(out, (x, lambda g: g * np.where(pos, 1.0, alpha)))


def sigmoid(x):
    x = const(x)
    s = _sigmoid(x.data)
    return _node(s, (x, lambda g: g * s * (1.0 - s)))


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def exp(x):
    x = const(x)
    out = np.exp(x.data)
    return _node(out, (x, lambda g: g * out))


def log(x):
    x = const(x)
    return _node(np.log(x.data), (x, lambda g: g / x.data))


def clip(x, lo, hi):
    """Clip with pass-through gradient strictly inside (lo, hi)."""
    x = const(x)
    inside = (x.data > lo) & (x.data < hi)
    out = np.clip(x.data, lo, hi)
    return _node(out, (x, lambda g: g * inside))


def maximum(a, b):
    """Elementwise max; ties route the gradient to `a`."""
    a, b = const(a), const(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _node(
        out,
        (a, lambda g: _unbroadcast(g * take_a, a.data.shape)),
        (b, lambda g: _unbroadcast(g * ~take_a, b.data.shape)),
    )


def l2norm(x):
    """Euclidean norm of all entries; subgradient 0 at the origin."""
    x = const(x)
    n = float(np.sqrt((x.data ** 2).sum()))

    def back(g):
        if n == 0.0:
            return np.zeros_like(x.data)
        return g * (x.data / n)

    return _node(np.asarray(n), (x, back))


# -- softmax / losses ---------------------------------------------------

def log_softmax(x):
    """Log-softmax along the last axis, numerically stable."""
    x = const(x)
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def back(g):
        return g - np.exp(out) * g.sum(axis=-1, keepdims=True)

    return _node(out, (x, back))


def softmax(x):
    x = const(x)
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return s * (g - (g * s).sum(axis=-1, keepdims=True))

    return _node(s, (x, back))


def bce_with_logits(logits, targets):
    """Per-element binary cross-entropy from logits; targets are constants."""
    x = const(logits)
    t = np.asarray(targets, dtype=x.data.dtype)
    z = x.data
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return _node(out, (x, lambda g: g * (_sigmoid(z) - t)))


def smooth_l1(x):
    """Elementwise Huber penalty with transition at |x| = 1."""
    x = const(x)
    a = np.abs(x.data)
    small = a < 1.0
    out = np.where(small, 0.5 * x.data ** 2, a - 0.5)
    return _node(out, (x, lambda g: g * np.where(small, x.data, np.sign(x.data))))


# -- structured ops -----------------------------------------------------

def conv2d(x, w, b, stride=1, pad=1):
    """2-d convolution on a (C,H,W) map with an (O,C,kh,kw) kernel."""
    x, w, b = const(x), const(w), const(b)
    xd, wd = x.data, w.data
    cout, cin, kh, kw = wd.shape
    cols, ho, wo = _im2col(xd, kh, kw, stride, pad)
    out = (wd.reshape(cout, -1) @ cols + b.data[:, None]).reshape(cout, ho, wo)

    def back_x(g):
        gcols = wd.reshape(cout, -1).T @ g.reshape(cout, -1)
        return _col2im(gcols, xd.shape, kh, kw, stride, pad, ho, wo)

    def back_w(g):
        return (g.reshape(cout, -1) @ cols.T).reshape(wd.shape)

    def back_b(g):
        return g.sum(axis=(1, 2))

    return _node(out, (x, back_x), (w, back_w), (b, back_b))


def _im2col(x, kh, kw, stride, pad):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, ho, wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(gcols, xshape, kh, kw, stride, pad, ho, wo):
    c, h, w = xshape
    gxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    g6 = gcols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += g6[:, i, j]
    if pad:
        return gxp[:, pad:pad + h, pad:pad + w]
    return gxp


def interp2d(x, ay, ax):
    """Separable linear resampling of a (C,H,W) map: out = ay @ x @ ax.T.

    `ay` (P,H) and `ax` (Q,W) are constant interpolation-weight matrices;
    the same primitive implements bilinear resizing and ROI cropping.
    """
    x = const(x)
    ay = np.asarray(ay)
    ax = np.asarray(ax)
    t = x.data @ ax.T           # (C,H,Q)
    out = np.matmul(ay, t)      # (C,P,Q)

    def back(g):
        return np.matmul(ay.T, g) @ ax

    return _node(out, (x, back))


def interp_matrix(n_out, n_in, centers=None):
    """Row-stochastic bilinear weight matrix mapping n_in samples to n_out.

    With `centers=None` the output grid follows the half-pixel convention
    (out pixel i samples input coordinate (i+0.5)*n_in/n_out - 0.5, clamped
    to the valid range).  Passing explicit `centers` (in input-index units)
    builds an ROI sampling matrix instead.  When n_out == n_in and centers
    is None the matrix is exactly the identity.
    """
    if centers is None:
        centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    centers = np.clip(np.asarray(centers, dtype=np.float64), 0.0, n_in - 1.0)
    lo = np.floor(centers).astype(np.int64)
    lo = np.minimum(lo, n_in - 2) if n_in > 1 else np.zeros_like(lo)
    frac = centers - lo
    m = np.zeros((len(centers), n_in))
    rows = np.arange(len(centers))
    m[rows, lo] = 1.0 - frac
    m[rows, np.minimum(lo + 1, n_in - 1)] += frac
    return m


def paste(base, patch, y0, x0):
    """Replace base[y0:y0+ph, x0:x0+pw] with `patch`.

    Both operands may carry gradients: the window's gradient flows to
    `patch` and everything outside the window flows to `base`, so pastes
    can be chained to stamp several disjoint regions.
    """
    base = const(base)
    patch = const(patch)
    ph, pw = patch.data.shape[:2]
    out = np.array(base.data, copy=True)
    out[y0:y0 + ph, x0:x0 + pw] = patch.data

    def back_base(g):
        gb = np.array(g, copy=True)
        gb[y0:y0 + ph, x0:x0 + pw] = 0.0
        return gb

    return _node(out, (base, back_base),
                 (patch, lambda g: g[y0:y0 + ph, x0:x0 + pw].copy()))
