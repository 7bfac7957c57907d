"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray and records the operations that produced it.
Calling backward() on a scalar Tensor walks the graph in reverse
topological order and accumulates gradients into every Tensor created
with requires_grad=True.  Only the operations needed by the scorer
network are provided.
"""

import numpy as np


def _unbroadcast(grad, shape):
    # Sum the gradient of a broadcast result back down to `shape`.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        arr = np.asarray(data)
        # float32 is preserved (for 32-bit inference), everything else is
        # promoted to float64 so gradients stay full precision by default.
        self.data = arr if arr.dtype == np.float32 else arr.astype(np.float64, copy=False)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo = []
        seen = set()
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
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- arithmetic ----

    def __add__(self, other):
        other = _wrap(other)
        out = Tensor(self.data + other.data, parents=(self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))
        out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        out = Tensor(self.data * other.data, parents=(self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        out = Tensor(self.data / other.data, parents=(self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape)
                )

        out._backward = bw
        return out

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __pow__(self, exponent):
        e = float(exponent)
        out = Tensor(self.data ** e, parents=(self,))
        out._backward = lambda g: self._accumulate(g * e * self.data ** (e - 1.0))
        return out

    def __matmul__(self, other):
        other = _wrap(other)
        out = Tensor(np.matmul(self.data, other.data), parents=(self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(
                    _unbroadcast(np.matmul(g, np.swapaxes(other.data, -1, -2)), self.data.shape)
                )
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(np.matmul(np.swapaxes(self.data, -1, -2), g), other.data.shape)
                )

        out._backward = bw
        return out

    # ---- shape ----

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = Tensor(self.data.reshape(shape), parents=(self,))
        out._backward = lambda g: self._accumulate(g.reshape(old))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        out = Tensor(self.data.transpose(axes), parents=(self,))
        out._backward = lambda g: self._accumulate(g.transpose(inv))
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], parents=(self,))

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        out._backward = bw
        return out

    # ---- reductions ----

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape).copy())

        out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _elementwise(x, value, local_grad_fn, parents=None):
    x = _wrap(x)
    out = Tensor(value, parents=(x,) if parents is None else parents)
    out._backward = lambda g: x._accumulate(g * local_grad_fn())
    return out


def relu(x):
    x = _wrap(x)
    return _elementwise(x, np.maximum(x.data, 0.0), lambda: (x.data > 0.0).astype(np.float64))


def leaky_relu(x, alpha=0.01):
    x = _wrap(x)
    pos = x.data > 0.0
    return _elementwise(
        x, np.where(pos, x.data, alpha * x.data), lambda: np.where(pos, 1.0, alpha)
    )


def elu(x, alpha=1.0):
    x = _wrap(x)
    neg = alpha * (np.exp(np.minimum(x.data, 0.0)) - 1.0)
    val = np.where(x.data > 0.0, x.data, neg)
    return _elementwise(x, val, lambda: np.where(x.data > 0.0, 1.0, neg + alpha))


def tanh(x):
    x = _wrap(x)
    t = np.tanh(x.data)
    return _elementwise(x, t, lambda: 1.0 - t * t)


def sigmoid(x):
    x = _wrap(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _elementwise(x, s, lambda: s * (1.0 - s))


def softplus(x):
    # log(1 + exp(x)) in the overflow-safe form.
    x = _wrap(x)
    val = np.logaddexp(0.0, x.data)
    return _elementwise(x, val, lambda: 1.0 / (1.0 + np.exp(-x.data)))


def exp(x):
    x = _wrap(x)
    e = np.exp(x.data)
    return _elementwise(x, e, lambda: e)


def log(x):
    x = _wrap(x)
    return _elementwise(x, np.log(x.data), lambda: 1.0 / x.data)


def sqrt(x):
    x = _wrap(x)
    r = np.sqrt(x.data)
    return _elementwise(x, r, lambda: 0.5 / r)


def absolute(x):
    x = _wrap(x)
    return _elementwise(x, np.abs(x.data), lambda: np.sign(x.data))


def clamp(x, lo, hi):
    x = _wrap(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _elementwise(x, np.clip(x.data, lo, hi), lambda: inside.astype(np.float64))


def maximum(a, b):
    # Elementwise max; ties send the gradient to the first argument.
    a, b = _wrap(a), _wrap(b)
    take_a = a.data >= b.data
    out = Tensor(np.where(take_a, a.data, b.data), parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(take_a, g, 0.0), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(take_a, 0.0, g), b.data.shape))

    out._backward = bw
    return out


def concat(tensors, axis):
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    out._backward = bw
    return out


def softmax(x, axis):
    # Subtracting the (detached) max is exact: the shift cancels analytically.
    x = _wrap(x)
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution, x (B,C,H,W), w (O,C,kh,kw), optional bias (O,)."""
    x, w = _wrap(x), _wrap(w)
    kh, kw = w.data.shape[2], w.data.shape[3]
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win[:, :, ::stride, ::stride]  # (B,C,Ho,Wo,kh,kw)
    val = np.einsum("bcxykl,ockl->boxy", cols, w.data, optimize=True)
    parents = (x, w)
    if b is not None:
        b = _wrap(b)
        val = val + b.data[None, :, None, None]
        parents = (x, w, b)
    out = Tensor(val, parents=parents)

    def bw(g):
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            w._accumulate(np.einsum("bcxykl,boxy->ockl", cols, g, optimize=True))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            ho, wo = g.shape[2], g.shape[3]
            for k in range(kh):
                for l in range(kw):
                    patch = np.einsum("boxy,oc->bcxy", g, w.data[:, :, k, l], optimize=True)
                    gxp[:, :, k : k + ho * stride : stride, l : l + wo * stride : stride] += patch
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(gxp)

    out._backward = bw
    return out


def bilinear_gather(feat, xs, ys, mask=None):
    """Sample feat (B,C,H,W) at continuous (xs, ys) of shape (B, ...).

    Returns (B, C, ...).  Coordinates are plain arrays, never
    differentiated through.  Samples under a False mask come out zero.
    """
    feat = _wrap(feat)
    bsz, ch, h, w = feat.data.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    tail = xs.shape[1:]
    if mask is None:
        mask = np.ones(xs.shape, dtype=bool)
    inside = mask & (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.where(inside, xs, 0.0)
    yc = np.where(inside, ys, 0.0)
    x0 = np.clip(np.floor(xc).astype(int), 0, w - 2) if w > 1 else np.zeros_like(xc, dtype=int)
    y0 = np.clip(np.floor(yc).astype(int), 0, h - 2) if h > 1 else np.zeros_like(yc, dtype=int)
    fx = xc - x0
    fy = yc - y0
    bidx = np.arange(bsz).reshape((bsz,) + (1,) * len(tail))
    bidx = np.broadcast_to(bidx, xs.shape)
    weights = [
        ((1 - fx) * (1 - fy), y0, x0),
        (fx * (1 - fy), y0, np.minimum(x0 + 1, w - 1)),
        ((1 - fx) * fy, np.minimum(y0 + 1, h - 1), x0),
        (fx * fy, np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)),
    ]
    m = inside.astype(np.float64)
    val = np.zeros((bsz, ch) + tail)
    for wgt, yi, xi in weights:
        val += (wgt * m)[:, None] * feat.data[bidx, :, yi, xi].transpose(
            (0, len(tail) + 1) + tuple(range(1, len(tail) + 1))
        )
    out = Tensor(val, parents=(feat,))

    def bw(g):
        gf = np.zeros_like(feat.data)
        for wgt, yi, xi in weights:
            contrib = (g * (wgt * m)[:, None]).transpose(
                (0,) + tuple(range(2, 2 + len(tail))) + (1,)
            )
            np.add.at(gf, (bidx, slice(None), yi, xi), contrib)
        feat._accumulate(gf)

    out._backward = bw
    return out


def upsample2x(x):
    """Bilinear 2x upsampling of (B,C,H,W) with half-pixel alignment."""
    b, c, h, w = x.data.shape
    ys = (np.arange(2 * h) + 0.5) / 2.0 - 0.5
    xs = (np.arange(2 * w) + 0.5) / 2.0 - 0.5
    gy, gx = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing="ij")
    gx = np.broadcast_to(gx, (b, 2 * h, 2 * w))
    gy = np.broadcast_to(gy, (b, 2 * h, 2 * w))
    return bilinear_gather(x, gx, gy)
