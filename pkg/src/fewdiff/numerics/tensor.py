"""Reverse-mode autodiff over dense numpy arrays.

The op set is the minimal closure needed by a token/transformer pipeline:
matrix multiply, elementwise add/mul/scale, softmax over the last axis,
layer normalization, GELU, shape ops (reshape/transpose/gather/concat),
reductions (sum/mean) and L2 normalization. Every op's analytic gradient
is checked against central finite differences in the test suite and by
the ``gradcheck`` CLI command.

Tensors are immutable values once produced. A graph is built on the fly
while ops execute; ``Tensor.backward()`` (scalar outputs only) runs the
tape in reverse topological order and accumulates ``.grad`` on every
tensor created with ``requires_grad=True``.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes incompatible for an op. Names the op and shapes."""

    def __init__(self, op, *shapes, detail=""):
        msg = f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class NonFiniteError(FloatingPointError):
    """A tensor entered the NaN/Inf error state."""


_grad_enabled = True


class no_grad:
    """Context manager: ops inside do not record the tape."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_shared_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._shared_grad = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None
        self._shared_grad = False

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{what} contains NaN/Inf")
        return self

    def backward(self):
        """Reverse-mode pass from a scalar output."""
        if self.data.size != 1:
            raise ShapeError("backward", self.shape, detail="loss must be scalar")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
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
            if node._backward is not None:
                node._backward(node.grad)
                # break closure cycles so the tape frees promptly
                node._backward = None
                node._parents = ()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def param(data, dtype=None):
    """A trainable tensor (leaf with requires_grad)."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def constant(data, dtype=None):
    return Tensor(data, dtype=dtype)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _node(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._shared_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _acc(t, g):
    """Accumulate gradient into t, copy-on-write for the first (possibly
    aliased) contribution so later in-place adds cannot corrupt other nodes."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._shared_grad = True
    elif t._shared_grad:
        t.grad = t.grad + g
        t._shared_grad = False
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    data = a.data + b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    data = a.data - b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward)


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)
        data = a.data * s

        def backward_scale(g):
            _acc(a, g * s)

        return _node(data, (a,), backward_scale)
    b = _wrap(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    data = a.data * b.data

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def exp(a):
    data = np.exp(a.data)

    def backward(g):
        _acc(a, g * data)

    return _node(data, (a,), backward)


def gelu(a):
    """GELU in its tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715 x^3)))."""
    data, tcache = kernels.gelu_fwd(a.data)

    def backward(g):
        _acc(a, kernels.gelu_bwd(a.data, tcache, g))

    return _node(data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = np.matmul(a.data, b.data)

    def backward(g):
        _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _acc(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(data, (a, b), backward)


def linear(x, w, b=None):
    """x @ w (+ b) with x of shape (..., K), w (K, N). Hot path: one 2-D GEMM."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    k, n = w.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, k)
    y2 = x2 @ w.data
    if b is not None:
        y2 += b.data
    data = y2.reshape(*lead, n)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, n)
        _acc(x, (g2 @ w.data.T).reshape(x.shape))
        _acc(w, x2.T @ g2)
        if b is not None:
            _acc(b, g2.sum(axis=0))

    return _node(data, parents, backward)


def softmax(x):
    """Softmax over the last axis (numerically stable)."""
    data = kernels.softmax_fwd(x.data)

    def backward(g):
        _acc(x, kernels.softmax_bwd(data, g))

    return _node(data, (x,), backward)


def log_softmax(x):
    m = x.data.max(axis=-1, keepdims=True)
    s = x.data - m
    lse = np.log(np.sum(np.exp(s), axis=-1, keepdims=True))
    data = s - lse

    def backward(g):
        _acc(x, g - np.exp(data) * g.sum(axis=-1, keepdims=True))

    return _node(data, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis to zero mean/unit variance, then affine."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    data, mean, rstd = kernels.layernorm_fwd(x.data, gamma.data, beta.data, eps)

    def backward(g):
        gx, dgamma, dbeta = kernels.layernorm_bwd(x.data, gamma.data, mean, rstd, g)
        _acc(x, gx)
        _acc(gamma, dgamma)
        _acc(beta, dbeta)

    return _node(data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x, shape):
    data = x.data.reshape(shape)

    def backward(g):
        _acc(x, g.reshape(x.shape))

    return _node(data, (x,), backward)


def transpose(x, axes):
    data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        _acc(x, np.transpose(g, inv))

    return _node(data, (x,), backward)


def swap_last2(x):
    return transpose(x, tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2))


def broadcast_to(x, shape):
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None

    def backward(g):
        _acc(x, _unbroadcast(g, x.shape))

    return _node(data, (x,), backward)


def concat(tensors, axis):
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(t, g[tuple(idx)])

    return _node(data, tuple(tensors), backward)


def embedding(table, ids):
    """Row lookup: table (V, D), ids int array of any shape -> ids.shape + (D,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape, detail="index out of range")
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _acc(table, gt)

    return _node(data, (table,), backward)


def gather_tokens(x, idx):
    """Per-row token gather: x (B, L, D), idx (B, V) -> (B, V, D)."""
    idx = np.asarray(idx)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError("gather_tokens", x.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError("gather_tokens", x.shape, idx.shape, detail="index out of range")
    rows = np.arange(x.shape[0])[:, None]
    data = x.data[rows, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        _acc(x, gx)

    return _node(data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g, x.shape).copy())

    return _node(np.asarray(data), (x,), backward)


def mean_(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def l2norm(x, axis=-1, keepdims=True):
    data = np.sqrt(np.sum(np.square(x.data), axis=axis, keepdims=keepdims))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
            d = np.expand_dims(data, axis)
        else:
            d = data
        _acc(x, g * x.data / d)

    return _node(data, (x,), backward)


def l2_normalize(x, axis=-1):
    """x / ||x||_2 along `axis`. Zero-norm rows are a degenerate error."""
    n = np.sqrt(np.sum(np.square(x.data), axis=axis, keepdims=True))
    if not np.all(n > 0):
        raise NonFiniteError("l2_normalize: zero-norm input")
    data = x.data / n

    def backward(g):
        dot = np.sum(g * data, axis=axis, keepdims=True)
        _acc(x, (g - data * dot) / n)

    return _node(data, (x,), backward)


def forward_backward(fn, *inputs):
    """Run fn over Tensors built from `inputs`, backprop the scalar output.

    Returns (output tensor, list of input gradients).
    """
    ts = [t if isinstance(t, Tensor) else Tensor(t, requires_grad=True) for t in inputs]
    for t in ts:
        t.zero_grad()
        t.requires_grad = True
    out = fn(*ts)
    out.backward()
    return out, [t.grad for t in ts]
