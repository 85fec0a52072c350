"""Minimal f64 tensor library with reverse-mode autodiff.

Only the operations the MAGA block and the matting network need are provided.
Every differentiable primitive is a :class:`Function` subclass and registers
itself in :data:`OPS`, which the gradient checker walks to make sure nothing
goes unchecked.

Tensors are immutable: ``data`` is a read-only float64 array.  Gradients are
never stored on tensors; :func:`grad` returns them.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

OPS: dict[str, type[Function]] = {}


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An operation was configured with invalid hyperparameters."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_ctx", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._ctx = None  # (Function, output index) for non-leaf tensors
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One node of the autodiff graph.

    Subclasses implement ``forward(*arrays, **kw)`` returning an array (or a
    tuple of arrays for multi-output ops) and ``backward(*out_grads)`` returning
    one gradient array (or None) per tensor input.
    """

    name = ""
    n_outputs = 1

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        if cls.name:
            OPS[cls.name] = cls

    @classmethod
    def apply(cls, *inputs, **kw):
        inputs = tuple(as_tensor(x) for x in inputs)
        fn = cls()
        out = fn.forward(*(t.data for t in inputs), **kw)
        outs = out if cls.n_outputs > 1 else (out,)
        tensors = tuple(Tensor(o) for o in outs)
        if any(t.requires_grad for t in inputs):
            fn.parents = inputs
            fn.out_shapes = tuple(t.shape for t in tensors)
            for i, t in enumerate(tensors):
                t.requires_grad = True
                t._ctx = (fn, i)
        return tensors if cls.n_outputs > 1 else tensors[0]

    def forward(self, *arrays, **kw):
        raise NotImplementedError

    def backward(self, *grads):
        raise NotImplementedError


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

class Add(Function):
    name = "add"

    def forward(self, a, b):
        _check_broadcast(a, b, "add")
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _check_broadcast(a, b, "sub")
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _check_broadcast(a, b, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return (_unbroadcast(g * self.b, self.a.shape),
                _unbroadcast(g * self.a, self.b.shape))


class Abs(Function):
    name = "abs"

    def forward(self, x):
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, g):
        return (g * self.sign,)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        self.y = expit(x)
        return self.y

    def backward(self, g):
        return (g * self.y * (1.0 - self.y),)


class Relu(Function):
    name = "relu"

    def forward(self, x):
        self.on = x > 0
        return np.where(self.on, x, 0.0)

    def backward(self, g):
        return (np.where(self.on, g, 0.0),)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Gelu(Function):
    """Exact (erf-based) GELU."""

    name = "gelu"

    def forward(self, x):
        self.x = x
        self.cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        return x * self.cdf

    def backward(self, g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * self.x * self.x)
        return (g * (self.cdf + self.x * pdf),)


# ---------------------------------------------------------------- shapes

class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape):
        shape = tuple(shape)
        if int(np.prod(shape)) != x.size:
            raise ShapeError(f"cannot reshape {x.shape} into {shape}")
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.in_shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, x, axes=None):
        self.axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
        return np.transpose(x, self.axes)

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.axes)),)


class Index(Function):
    """Basic (slice/int) indexing."""

    name = "index"

    def forward(self, x, idx):
        self.idx, self.in_shape = idx, x.shape
        return np.array(x[idx])

    def backward(self, g):
        out = np.zeros(self.in_shape)
        out[self.idx] = g
        return (out,)


class Concat(Function):
    name = "concat"

    def forward(self, *xs, axis=0):
        self.axis = axis
        self.splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


class Stack(Function):
    name = "stack"

    def forward(self, *xs, axis=0):
        self.axis = axis
        return np.stack(xs, axis=axis)

    def backward(self, g):
        n = g.shape[self.axis]
        return tuple(np.take(g, i, axis=self.axis) for i in range(n))


# ---------------------------------------------------------------- reductions

class Sum(Function):
    name = "sum"

    def forward(self, x, axis=None):
        self.in_shape, self.axis = x.shape, axis
        return np.sum(x, axis=axis)

    def backward(self, g):
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.in_shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, x, axis=None):
        self.in_shape, self.axis = x.shape, axis
        out = np.mean(x, axis=axis)
        self.count = x.size // max(np.size(out), 1)
        return out

    def backward(self, g):
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g / self.count, self.in_shape).copy(),)


class MaxOverAxis(Function):
    """Maximum along one axis; ties go to the lowest index.

    The gradient is routed only to the selected slot.
    """

    name = "max_over_axis"

    def forward(self, x, axis=0):
        self.axis, self.in_shape = axis, x.shape
        self.argmax = np.argmax(x, axis=axis)
        return np.take_along_axis(x, np.expand_dims(self.argmax, axis), axis).squeeze(axis)

    def backward(self, g):
        out = np.zeros(self.in_shape)
        np.put_along_axis(out, np.expand_dims(self.argmax, self.axis),
                          np.expand_dims(g, self.axis), self.axis)
        return (out,)


# ---------------------------------------------------------------- linear algebra

class Matmul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} x {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ self.b.T, self.a.T @ g


class SoftmaxRows(Function):
    """Softmax over the last axis, stabilised by subtracting the row max."""

    name = "softmax_rows"

    def forward(self, x):
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        self.y = z / z.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


# ---------------------------------------------------------------- normalisation

class InstanceNorm(Function):
    """Per-(sample, channel) standardisation of a B x C x H x W map.

    Returns ``(y, std)`` with ``std = sqrt(var + eps)`` of shape B x C; the
    std output is differentiable so it can feed the reweighting path.
    """

    name = "instance_norm"
    n_outputs = 2

    def forward(self, x, eps=1e-5):
        if x.ndim != 4:
            raise ShapeError(f"instance_norm expects B x C x H x W, got {x.shape}")
        if x.shape[2] * x.shape[3] < 2:
            raise ShapeError("instance_norm needs at least two spatial sites")
        mu = x.mean(axis=(2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(2, 3), keepdims=True)
        std = np.sqrt(var + eps)
        self.y = xc / std
        self.std = std
        self.n = x.shape[2] * x.shape[3]
        return self.y, std[:, :, 0, 0]

    def backward(self, gy, gstd):
        y, n = self.y, self.n
        dx = (gy - gy.mean(axis=(2, 3), keepdims=True)
              - y * (gy * y).mean(axis=(2, 3), keepdims=True)) / self.std
        dx = dx + gstd[:, :, None, None] * y / n
        return (dx,)


class LayerNorm(Function):
    """Normalise over the last axis, then scale and shift."""

    name = "layer_norm"

    def forward(self, x, gamma, beta, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        self.std = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        self.xhat = xc / self.std
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        xhat = self.xhat
        dxhat = g * self.gamma
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / self.std
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


# ---------------------------------------------------------------- convolution

def _pad_hw(x, ph, pw):
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw)))


def _conv_forward(x, w, stride, pad, groups):
    C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    if C != Cg * groups or O % groups:
        raise ShapeError(f"conv: input {x.shape} vs weight {w.shape} with groups={groups}")
    xp = _pad_hw(x, *pad)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    Ho, Wo = win.shape[1], win.shape[2]
    win = win.reshape(groups, Cg, Ho, Wo, kh, kw)
    wg = w.reshape(groups, O // groups, Cg, kh, kw)
    out = np.einsum("gcxyij,gocij->goxy", win, wg, optimize=True)
    return out.reshape(O, Ho, Wo), win


def _conv_backward(g, x_shape, w, win, stride, pad, groups):
    C, H, W = x_shape
    O, Cg, kh, kw = w.shape
    Ho, Wo = g.shape[1:]
    gg = g.reshape(groups, O // groups, Ho, Wo)
    wg = w.reshape(groups, O // groups, Cg, kh, kw)
    dw = np.einsum("goxy,gcxyij->gocij", gg, win, optimize=True).reshape(w.shape)
    ph, pw = pad
    dxp = np.zeros((groups, Cg, H + 2 * ph, W + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("goxy,goc->gcxy", gg, wg[:, :, :, i, j], optimize=True)
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += contrib
    dx = dxp[:, :, ph:ph + H, pw:pw + W].reshape(C, H, W)
    return dx, dw


class Conv2d(Function):
    """Dense cross-correlation of a C x H x W map, optional stride and groups.

    ``padding="same"`` pads by half the kernel extent (odd kernels only).
    """

    name = "conv2d"

    def forward(self, x, w, b=None, stride=1, padding="same", groups=1):
        kh, kw = w.shape[2:]
        if padding == "same":
            if kh % 2 == 0 or kw % 2 == 0:
                raise ConfigError(f"same padding needs odd kernel extents, got {kh}x{kw}")
            padding = (kh // 2, kw // 2)
        elif isinstance(padding, int):
            padding = (padding, padding)
        self.cfg = stride, tuple(padding), groups
        self.x_shape, self.w = x.shape, w
        self.has_bias = b is not None
        out, self.win = _conv_forward(x, w, *self.cfg)
        if b is not None:
            out = out + b[:, None, None]
        return out

    def backward(self, g):
        dx, dw = _conv_backward(g, self.x_shape, self.w, self.win, *self.cfg)
        if self.has_bias:
            return dx, dw, g.sum(axis=(1, 2))
        return dx, dw


class Conv2dSparse(Function):
    """Submanifold convolution: reads and writes only active sites.

    Output at an active site equals the dense same-padded result computed from
    active inputs only; inactive output sites are exactly zero.  With an
    all-active mask this is plain dense convolution.
    """

    name = "conv2d_sparse"

    def forward(self, x, w, mask, groups=1):
        kh, kw = w.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"sparse convolution needs odd kernel extents, got {kh}x{kw}")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape[1:]:
            raise ShapeError(f"mask {mask.shape} does not match map {x.shape[1:]}")
        self.mask = mask
        self.cfg = 1, (kh // 2, kw // 2), groups
        self.x_shape, self.w = x.shape, w
        out, self.win = _conv_forward(np.where(mask, x, 0.0), w, *self.cfg)
        return np.where(mask, out, 0.0)

    def backward(self, g):
        g = np.where(self.mask, g, 0.0)
        dx, dw = _conv_backward(g, self.x_shape, self.w, self.win, *self.cfg)
        return np.where(self.mask, dx, 0.0), dw


class Conv1dChannels(Function):
    """Same-padded 1-D cross-correlation of a length-L sequence."""

    name = "conv1d_channels"

    def forward(self, x, w):
        if x.ndim != 1 or w.ndim != 1:
            raise ShapeError("conv1d_channels expects 1-D input and kernel")
        kc = w.shape[0]
        if kc % 2 == 0:
            raise ConfigError(f"conv1d kernel length must be odd, got {kc}")
        r = kc // 2
        self.win = sliding_window_view(np.pad(x, r), kc)
        self.w, self.r = w, r
        return self.win @ w

    def backward(self, g):
        dw = g @ self.win
        dxp = np.zeros(g.shape[0] + 2 * self.r)
        for j, wj in enumerate(self.w):
            dxp[j:j + g.shape[0]] += wj * g
        return dxp[self.r:self.r + g.shape[0]], dw


# ---------------------------------------------------------------- resampling

class Upsample2xNearest(Function):
    name = "upsample_nearest"

    def forward(self, x):
        return x.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(self, g):
        *lead, H, W = g.shape
        return (g.reshape(*lead, H // 2, 2, W // 2, 2).sum(axis=(-3, -1)),)


def bilinear_matrix(n):
    """(2n x n) interpolation matrix for 2x upsampling with half-pixel centres."""
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        lo = min(int(np.floor(src)), n - 1)
        hi = min(lo + 1, n - 1)
        t = src - lo
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


class Upsample2xBilinear(Function):
    name = "upsample_bilinear"

    def forward(self, x):
        H, W = x.shape[-2:]
        self.uh, self.uw = bilinear_matrix(H), bilinear_matrix(W)
        return np.einsum("ih,...hw,jw->...ij", self.uh, x, self.uw)

    def backward(self, g):
        return (np.einsum("ih,...ij,jw->...hw", self.uh, g, self.uw),)


# ---------------------------------------------------------------- public wrappers

def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def tabs(x):
    return Abs.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def relu(x):
    return Relu.apply(x)


def gelu(x):
    return Gelu.apply(x)


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes=None):
    return Transpose.apply(x, axes=axes)


def index(x, idx):
    return Index.apply(x, idx=idx)


def concat(xs, axis=0):
    return Concat.apply(*xs, axis=axis)


def stack(xs, axis=0):
    return Stack.apply(*xs, axis=axis)


def tsum(x, axis=None):
    return Sum.apply(x, axis=axis)


def mean(x, axis=None):
    return Mean.apply(x, axis=axis)


def max_over_axis(x, axis=0):
    """Return ``(values, argmax)``; argmax is a plain integer array."""
    out = MaxOverAxis.apply(x, axis=axis)
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis) if out._ctx is None else out._ctx[0].argmax
    return out, idx


def matmul(a, b):
    return Matmul.apply(a, b)


def softmax_rows(x):
    return SoftmaxRows.apply(x)


def instance_norm(x, eps=1e-5):
    return InstanceNorm.apply(x, eps=eps)


def layer_norm(x, gamma, beta, eps=1e-5):
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def conv2d(x, w, b=None, stride=1, padding="same", groups=1):
    if b is None:
        return Conv2d.apply(x, w, stride=stride, padding=padding, groups=groups)
    return Conv2d.apply(x, w, b, stride=stride, padding=padding, groups=groups)


def conv2d_sparse(x, w, mask, groups=1):
    return Conv2dSparse.apply(x, w, mask=mask, groups=groups)


def conv1d_channels(x, w):
    return Conv1dChannels.apply(x, w)


def upsample_nearest(x):
    return Upsample2xNearest.apply(x)


def upsample_bilinear(x):
    return Upsample2xBilinear.apply(x)


# ---------------------------------------------------------------- backward pass

def _topo_order(root_fn):
    order, seen = [], set()
    stack = [(root_fn, False)]
    while stack:
        fn, expanded = stack.pop()
        if expanded:
            order.append(fn)
            continue
        if id(fn) in seen:
            continue
        seen.add(id(fn))
        stack.append((fn, True))
        for p in fn.parents:
            if p._ctx is not None and id(p._ctx[0]) not in seen:
                stack.append((p._ctx[0], False))
    return order


def grad(loss, wrt):
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. each tensor in ``wrt``.

    Tensors the loss does not depend on get zero gradients.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(t): np.zeros(t.shape) for t in wrt}
    if loss._ctx is None:
        if id(loss) in grads:
            grads[id(loss)] = np.ones(())
        return [grads[id(t)] for t in wrt]

    pending = {id(loss._ctx[0]): [None] * loss._ctx[0].n_outputs}
    pending[id(loss._ctx[0])][loss._ctx[1]] = np.ones(())
    for fn in reversed(_topo_order(loss._ctx[0])):
        outs = pending.pop(id(fn), None)
        if outs is None:
            continue
        outs = [np.zeros(s) if o is None else o for o, s in zip(outs, fn.out_shapes)]
        in_grads = fn.backward(*outs)
        for p, g in zip(fn.parents, in_grads):
            if g is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + g
            if p._ctx is not None:
                pfn, k = p._ctx
                slot = pending.setdefault(id(pfn), [None] * pfn.n_outputs)
                slot[k] = g if slot[k] is None else slot[k] + g
    return [grads[id(t)] for t in wrt]


def backward(loss, leaves):
    """Dict form of :func:`grad`: ``{leaf name or index: gradient}``."""
    gs = grad(loss, leaves)
    return {(t.name if t.name is not None else i): g for i, (t, g) in enumerate(zip(leaves, gs))}
