"""Dense tensors with reverse-mode automatic differentiation.

Every op computes its result eagerly with numpy and, when gradients are
enabled, records a closure that routes the output gradient back to its
inputs.  ``Tensor.backward()`` walks the recorded graph once in reverse
topological order, accumulating into ``.grad``.

Training runs in float32 by default; ``use_dtype(np.float64)`` switches new
tensors to double precision for finite-difference checking.  Broadcasting is
supported for elementwise add/sub/mul over size-1 (or missing leading) axes
only; gradients are summed back over the broadcast axes.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, ShapeError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = False


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily change the dtype given to newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops inside produce constant tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_finite_checks(enabled):
    """When on, every op verifies its output is free of NaN/Inf."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _coerce(data, dtype):
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=_DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_velocity")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None
        self._velocity = None

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
        return float(self.data.reshape(()))

    def detach(self):
        """A view of the same values severed from the graph."""
        return Tensor(self.data, requires_grad=False)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate ``.grad`` of every reachable tensor that requires it."""
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss tensor")
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
            for parent in node._prev:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # operator sugar; full op set lives at module level
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype.type if like is not None else None
    return Tensor(value, dtype=dtype)


def _result(data, parents):
    """Build an op output; record parents only when a gradient can flow."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise ContractError("op produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out._prev = tuple(parents) if out.requires_grad else ()
    out._backward = None
    out._velocity = None
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.data.shape))
        out._backward = _bw
    return out


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")
    out = _result(a.data - b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-out.grad, b.data.shape))
        out._backward = _bw
    return out


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.data.shape))
        out._backward = _bw
    return out


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = _result(a.data @ b.data, (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(out.grad @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ out.grad)
        out._backward = _bw
    return out


def transpose2d(x):
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {x.data.shape}")
    out = _result(x.data.T, (x,))
    if out.requires_grad:
        def _bw():
            x._accum(out.grad.T)
        out._backward = _bw
    return out


def reshape(x, shape):
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.data.shape} to {tuple(shape)}") from None
    out = _result(data, (x,))
    if out.requires_grad:
        def _bw():
            x._accum(out.grad.reshape(x.data.shape))
        out._backward = _bw
    return out


def reverse(x, axis=-1):
    """Reverse a tensor along one axis (used to realign flipped maps)."""
    out = _result(np.flip(x.data, axis=axis).copy(), (x,))
    if out.requires_grad:
        def _bw():
            x._accum(np.flip(out.grad, axis=axis))
        out._backward = _bw
    return out


def relu(x):
    out = _result(np.maximum(x.data, 0), (x,))
    if out.requires_grad:
        mask = x.data > 0  # subgradient 0 at the kink
        def _bw():
            x._accum(out.grad * mask)
        out._backward = _bw
    return out


def sigmoid(x):
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _result(y, (x,))
    if out.requires_grad:
        def _bw():
            x._accum(out.grad * y * (1.0 - y))
        out._backward = _bw
    return out


def softmax(x, axis):
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, (x,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))
        out._backward = _bw
    return out


def log(x):
    out = _result(np.log(x.data), (x,))
    if out.requires_grad:
        def _bw():
            x._accum(out.grad / x.data)
        out._backward = _bw
    return out


def clip(x, lo, hi):
    """Clamp values; gradient is passed only where no clamping happened."""
    out = _result(np.clip(x.data, lo, hi), (x,))
    if out.requires_grad:
        mask = (x.data > lo) & (x.data < hi)
        def _bw():
            x._accum(out.grad * mask)
        out._backward = _bw
    return out


def tsum(x, axis=None, keepdims=False):
    out = _result(x.data.sum(axis=axis, keepdims=keepdims), (x,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accum(np.broadcast_to(g, x.data.shape))
        out._backward = _bw
    return out


def tmean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def channel_mean(x, axis=0):
    """Mean over one axis; the channel-collapse step of attention maps."""
    return tmean(x, axis=axis)


def elementwise_max(inputs):
    """Elementwise maximum of same-shape tensors.

    The gradient goes to the first input attaining the maximum (lowest
    index on ties).
    """
    inputs = list(inputs)
    if not inputs:
        raise ContractError("elementwise_max needs at least one input")
    shape = inputs[0].data.shape
    for t in inputs[1:]:
        if t.data.shape != shape:
            raise ShapeError(f"elementwise_max: shape {t.data.shape} != {shape}")
    stacked = np.stack([t.data for t in inputs])
    out = _result(stacked.max(axis=0), tuple(inputs))
    if out.requires_grad:
        winner = stacked.argmax(axis=0)  # first max wins ties
        def _bw():
            for i, t in enumerate(inputs):
                if t.requires_grad:
                    t._accum(out.grad * (winner == i))
        out._backward = _bw
    return out


def mse(a, b):
    """Mean of squared elementwise differences, reduced to a scalar."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shapes {a.data.shape} and {b.data.shape} differ")
    diff = a.data - b.data
    out = _result(np.asarray((diff * diff).mean(), dtype=a.data.dtype), (a, b))
    if out.requires_grad:
        scale = 2.0 / diff.size
        def _bw():
            g = out.grad * scale * diff
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(-g)
        out._backward = _bw
    return out


def _smooth_l1_core(diff):
    adiff = np.abs(diff)
    near = adiff < 1.0
    vals = np.where(near, 0.5 * diff * diff, adiff - 0.5)
    grads = np.where(near, diff, np.sign(diff))
    return vals, grads


def smooth_l1_map(pred, target):
    """Elementwise smooth-L1: 0.5 d^2 below |d|=1, |d|-0.5 above."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"smooth_l1: shapes {pred.data.shape} and {target.data.shape} differ")
    vals, grads = _smooth_l1_core(pred.data - target.data)
    out = _result(vals, (pred, target))
    if out.requires_grad:
        def _bw():
            g = out.grad * grads
            if pred.requires_grad:
                pred._accum(g)
            if target.requires_grad:
                target._accum(-g)
        out._backward = _bw
    return out


def smooth_l1(pred, target):
    """Smooth-L1 reduced by mean over all elements."""
    return tmean(smooth_l1_map(pred, target))


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-d cross-correlation of one image: x[C,H,W] * w[O,C,k,k] -> [O,Ho,Wo]."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects x[C,H,W], w[O,C,k,k]; got {x.data.shape}, {w.data.shape}")
    cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin_w != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {cin_w}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {kh}x{kw}")
    k, s, p = kh, int(stride), int(pad)
    ho = (h + 2 * p - k) // s + 1
    wo = (wdt + 2 * p - k) // s + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be {ho}x{wo} for input {h}x{wdt}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::s, ::s]                    # [C, Ho, Wo, k, k]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, ho * wo)
    cols = np.ascontiguousarray(cols)
    w2 = w.data.reshape(cout, cin * k * k)
    res = w2 @ cols
    if b is not None:
        res = res + b.data[:, None]
    out = _result(res.reshape(cout, ho, wo), (x, w) if b is None else (x, w, b))
    if out.requires_grad:
        def _bw():
            gflat = out.grad.reshape(cout, ho * wo)
            if b is not None and b.requires_grad:
                b._accum(gflat.sum(axis=1))
            if w.requires_grad:
                w._accum((gflat @ cols.T).reshape(w.data.shape))
            if x.requires_grad:
                dcols = (w2.T @ gflat).reshape(cin, k, k, ho, wo)
                dxp = np.zeros((cin, h + 2 * p, wdt + 2 * p), dtype=x.data.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
                x._accum(dxp[:, p:p + h, p:p + wdt] if p else dxp)
        out._backward = _bw
    return out


def maxpool2d(x):
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2d expects x[C,H,W], got {x.data.shape}")
    c, h, w = x.data.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool2d input {h}x{w} too small")
    tiles = x.data[:, :ho * 2, :wo * 2].reshape(c, ho, 2, wo, 2)
    tiles = tiles.transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    out = _result(tiles.max(axis=3), (x,))
    if out.requires_grad:
        winner = tiles.argmax(axis=3)
        def _bw():
            dtile = np.zeros_like(tiles)
            np.put_along_axis(dtile, winner[..., None], out.grad[..., None], axis=3)
            dx = np.zeros_like(x.data)
            dx[:, :ho * 2, :wo * 2] = (
                dtile.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho * 2, wo * 2)
            )
            x._accum(dx)
        out._backward = _bw
    return out


def sgd_step(params, lr, momentum=0.9, weight_decay=0.0005):
    """One SGD update with classic momentum and L2 weight decay.

    v <- momentum * v + grad + weight_decay * theta;  theta <- theta - lr * v.
    Gradients are cleared afterwards.
    """
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        if p._velocity is None:
            p._velocity = np.zeros_like(p.data)
        p._velocity = momentum * p._velocity + g
        p.data = p.data - lr * p._velocity
        p.grad = None
