"""Dense tensors with a tape-based reverse-mode gradient engine.

Only the operations the model needs are provided. Every op records a node on
its output when at least one input requires a gradient; ``backward`` linearises
the recorded graph into a :class:`Tape` and replays it once in reverse.
"""
import contextlib
import math

import numpy as np

from . import kernels
from .errors import DimensionError, NonFiniteError, SelectionError, UsageError, ConfigError

_CHECKED = False
_GRAD_ENABLED = True


def set_checked(flag):
    """Turn NaN/Inf detection on every op output (and gradient) on or off."""
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked():
    return _CHECKED


@contextlib.contextmanager
def checked(flag=True):
    previous = _CHECKED
    set_checked(flag)
    try:
        yield
    finally:
        set_checked(previous)


@contextlib.contextmanager
def no_grad():
    """Disable recording; forward passes inside build no graph."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class _Node:
    __slots__ = ("name", "inputs", "backward")

    def __init__(self, name, inputs, backward):
        self.name = name
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim and min(arr.shape) < 1:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None
        if _CHECKED:
            _check(arr, "tensor")

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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def tensor(data, requires_grad=False, dtype=np.float64):
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check(arr, name):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} produced non-finite values")


def _make(out, name, inputs, backward_fn):
    if _CHECKED:
        _check(out, name)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._node = None
    t.requires_grad = False
    if _GRAD_ENABLED and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t._node = _Node(name, inputs, backward_fn)
    return t


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- tape / backward

class Tape:
    """Recorded primitive ops in topological order (inputs before outputs)."""

    def __init__(self, entries):
        self.entries = entries

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @classmethod
    def from_output(cls, out):
        order = []
        seen = set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t._node.inputs:
                if parent._node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring a gradient."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise UsageError("backward() needs a scalar loss tensor")
    if not loss.requires_grad:
        raise UsageError("loss was not produced from any tensor requiring a gradient")
    tape = Tape.from_output(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.entries):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
        grads = t._node.backward(g)
        for parent, pg in zip(t._node.inputs, grads):
            if pg is None or not parent.requires_grad:
                continue
            if _CHECKED:
                _check(pg, f"gradient of {t._node.name}")
            if parent._node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
    return tape


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, "add", (a, b), bw)


def neg(a):
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, "scale", (a,), lambda g: (g * c,))
    a = _as_tensor(a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return _make(a.data * b.data, "mul", (a, b), bw)


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh-approximated GELU."""
    u = x.data
    inner = _GELU_C * (u + 0.044715 * u ** 3)
    th = np.tanh(inner)
    out = 0.5 * u * (1.0 + th)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * u ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * u * (1.0 - th ** 2) * d_inner),)

    return _make(out, "gelu", (x,), bw)


def swish(x):
    return mul(x, sigmoid(x))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product; 3-D inputs are treated as equal-sized batches of matrices."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, "matmul", (a, b), bw)


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx):
    shape = x.shape
    dtype = x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), "getitem", (x,), bw)


def take_rows(x, indices):
    """Gather rows ``x[indices]`` along axis 0."""
    idx = np.asarray(indices, dtype=np.int64)
    return getitem(x, idx)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tuple(tensors), bw)


def prepend_row(row, x):
    """``[row; x]`` for row of shape [D] and x of shape [T, D]."""
    return concat([reshape(row, (1, row.shape[-1])), x], axis=0)


# ---------------------------------------------------------------- reductions

def sum_all(x):
    shape = x.shape
    return _make(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x):
    shape, n = x.shape, x.size
    return _make(np.asarray(x.data.mean()), "mean", (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def softmax(x, axis=-1):
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), bw)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (x,), bw)


def cross_entropy(logits, label):
    """Negative log-likelihood of integer ``label`` under a 1-D logit vector."""
    return neg(getitem(log_softmax(logits), int(label)))


def layer_norm(x, gamma, beta, eps=1e-5):
    if x.shape[-1] < 2:
        raise DimensionError("layer_norm needs at least 2 features")
    u = x.data
    mu = u.mean(axis=-1, keepdims=True)
    xc = u - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = u.shape[-1]
    sg, sb = gamma.shape, beta.shape

    def bw(g):
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, sg), _unbroadcast(g, sb)

    return _make(out, "layer_norm", (x, gamma, beta), bw)


# ---------------------------------------------------------------- convolutions

def _check_odd(width):
    if width % 2 == 0:
        raise ConfigError(f"kernel width must be odd, got {width}")


def conv1d_same(signal, kernel):
    """Zero-padded, length-preserving correlation of a 1-D signal with an odd kernel."""
    signal, kernel = _as_tensor(signal), _as_tensor(kernel)
    _check_odd(kernel.shape[0])
    if signal.ndim != 1 or kernel.ndim != 1:
        raise DimensionError("conv1d_same expects 1-D signal and kernel")
    x2, k2 = signal.data[:, None], kernel.data[:, None]
    out = kernels.depthwise_conv_fwd(x2, k2)[:, 0]

    def bw(g):
        gx, gk = kernels.depthwise_conv_bwd(g[:, None], x2, k2)
        return gx[:, 0], gk[:, 0]

    return _make(out, "conv1d_same", (signal, kernel), bw)


def depthwise_conv(x, kernel, bias=None):
    """Per-channel same convolution of ``x[T, C]`` with ``kernel[w, C]`` along T."""
    _check_odd(kernel.shape[0])
    if x.ndim != 2 or kernel.ndim != 2 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"depthwise_conv shape mismatch: {x.shape} with kernel {kernel.shape}")
    xd, kd = x.data, kernel.data
    out = kernels.depthwise_conv_fwd(xd, kd).astype(xd.dtype, copy=False)

    def bw(g):
        gx, gk = kernels.depthwise_conv_bwd(g, xd, kd)
        return gx.astype(xd.dtype, copy=False), gk.astype(kd.dtype, copy=False)

    y = _make(out, "depthwise_conv", (x, kernel), bw)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- selection

def topk_indices(x, k):
    """Indices of the k largest entries, lowest index first on ties, returned ascending."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    arr = np.ascontiguousarray(arr, dtype=np.float64).reshape(-1)
    if not 1 <= k <= arr.shape[0]:
        raise SelectionError(f"cannot select {k} of {arr.shape[0]} entries")
    return [int(i) for i in kernels.topk_indices(arr, int(k))]
