"""Reverse-mode automatic differentiation on dense arrays.

A Tensor wraps a NumPy array and records the op that produced it; backward()
walks the graph in reverse topological order and accumulates gradients into
every reachable tensor with requires_grad set. Graphs are only recorded when
some input requires a gradient, so inference builds no graph at all.

Convolution and pooling dispatch to the kernel backend (compiled or NumPy,
chosen at import in gazedistill._kernels).
"""

from __future__ import annotations

import numpy as np

from . import _kernels as K


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class GraphError(ValueError):
    """Graph-level contract violation (e.g. backward from a non-scalar)."""


def _as_array(value, dtype=None):
    arr = np.asarray(value)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    # ascontiguousarray would promote 0-d arrays to shape (1,); keep them 0-d
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        backward(self)

    # arithmetic sugar; the module-level functions do the work
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"


class Parameter(Tensor):
    """Trainable tensor with a stable name (used for checkpoints)."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(_as_array(value, dtype))


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gdim, sdim) in enumerate(zip(g.shape, shape)) if sdim == 1 and gdim != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_op(a, b, forward, grad_a, grad_b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    try:
        data = forward(a.data, b.data)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            a._accum(_sum_to(grad_a(g, a.data, b.data), a.data.shape))
        if b.requires_grad:
            b._accum(_sum_to(grad_b(g, a.data, b.data), b.data.shape))

    return _make(data, (a, b), bw)


def add(a, b):
    return _broadcast_op(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _broadcast_op(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _broadcast_op(
        a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def div(a, b):
    return _broadcast_op(
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def matmul(a, b):
    """Matrix product with NumPy batch broadcasting; operands must be >= 2-d."""
    a = _wrap(a)
    b = _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul batch dims disagree: {a.shape} @ {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            a._accum(_sum_to(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            b._accum(_sum_to(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _make(data, (a, b), bw)


def conv2d(x, w, stride=1):
    """3x3 convolution, zero padding 1, stride 1 or 2 (kernel backend)."""
    x = _wrap(x)
    w = _wrap(w)
    data = K.conv3x3_forward(x.data, w.data, stride)

    def bw(g):
        gx, gw = K.conv3x3_backward(x.data, w.data, np.ascontiguousarray(g), stride)
        if x.requires_grad:
            x._accum(gx)
        if w.requires_grad:
            w._accum(gw)

    return _make(data, (x, w), bw)


def avg_pool2d(x, k, stride):
    """Average pooling; stride 1 is same-size (zero pad), stride > 1 unpadded."""
    x = _wrap(x)
    data = K.avgpool2d_forward(x.data, k, stride)
    shape = x.data.shape

    def bw(g):
        x._accum(K.avgpool2d_backward(np.ascontiguousarray(g), shape, k, stride))

    return _make(data, (x,), bw)


def global_avg_pool(x):
    """(N,C,H,W) -> (N,C) spatial mean."""
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    return mean(x, axis=(2, 3))


def relu(x):
    x = _wrap(x)
    data = np.maximum(x.data, 0)

    def bw(g):
        x._accum(g * (x.data > 0))

    return _make(data, (x,), bw)


def sigmoid(x):
    x = _wrap(x)
    # split by sign to keep exp() off large positive arguments
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        x._accum(g * out * (1.0 - out))

    return _make(out, (x,), bw)


def softmax(x, axis=-1):
    """Softmax along one axis, stabilized by max subtraction."""
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        x._accum(p * (g - inner))

    return _make(p, (x,), bw)


def log(x):
    x = _wrap(x)
    data = np.log(x.data)

    def bw(g):
        x._accum(g / x.data)

    return _make(data, (x,), bw)


def sqrt(x):
    x = _wrap(x)
    data = np.sqrt(x.data)

    def bw(g):
        # subgradient 0 at the origin; sqrt feeds norms and overlap scores
        # where that is the correct one-sided limit
        denom = 2.0 * data
        safe = np.where(denom > 0.0, denom, 1.0)
        x._accum(np.where(denom > 0.0, g / safe, 0.0))

    return _make(data, (x,), bw)


def exp(x):
    x = _wrap(x)
    data = np.exp(x.data)

    def bw(g):
        x._accum(g * data)

    return _make(data, (x,), bw)


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    """Sum over the given axes (all axes when None)."""
    x = _wrap(x)
    axes = _normalize_axes(axis, x.data.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    kept = list(x.data.shape)
    for a in axes:
        kept[a] = 1

    def bw(g):
        x._accum(np.broadcast_to(g.reshape(kept), x.data.shape))

    return _make(data, (x,), bw)


def tmean(x, axis=None, keepdims=False):
    x = _wrap(x)
    axes = _normalize_axes(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# aliases matching the public op vocabulary
sum = tsum  # noqa: A001 - deliberate shadow, module-local
mean = tmean


def l2_norm(x, axis=None, keepdims=False):
    """Euclidean norm over the given axes (composite op)."""
    return sqrt(tsum(mul(x, x), axis=axis, keepdims=keepdims))


def reshape(x, shape):
    x = _wrap(x)
    old = x.data.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {shape}") from None

    def bw(g):
        x._accum(g.reshape(old))

    return _make(data, (x,), bw)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat shapes incompatible along axis {axis}: {shapes}") from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _make(data, tensors, bw)


def backward(loss):
    """Backpropagate from a scalar loss through the recorded graph.

    Gradients accumulate across fan-out; tensors outside the graph are left
    untouched (their .grad stays None, read as zero by the optimizer).
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params):
    for p in params:
        p.grad = None


def grad_check(fn, params, eps=1e-6, max_coords_per_param=None, rng=None):
    """Compare analytic gradients with central finite differences.

    fn is a closure over params returning a scalar Tensor. Returns the worst
    relative error |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|) over the
    checked coordinates. With max_coords_per_param set, a seeded subset of
    coordinates per parameter is checked instead of every one.

    eps trades two failure modes against each other. A large step can
    straddle a relu kink when some pre-activation sits near zero, and the
    blended one-sided slopes then disagree with the subgradient. A small
    step amplifies cancellation noise in f_plus - f_minus, which swamps
    the relative error on coordinates whose gradient is much smaller than
    the loss value. Callers should pick the step for the conditioning of
    their graph; the default favours kink safety.
    """
    params = list(params)
    zero_grads(params)
    loss = fn()
    backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g_ad.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        for i in coords:
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = fn().item()
            flat[i] = saved - eps
            f_minus = fn().item()
            flat[i] = saved
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(gflat[i] - g_fd) / max(1e-12, abs(gflat[i]) + abs(g_fd))
            worst = max(worst, err)
    return worst
