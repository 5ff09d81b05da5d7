"""Reverse-mode automatic differentiation over dense float64 arrays.

Every network operation in this package is built from the primitive set
defined here.  The engine is taped dynamically: applying a primitive to
tensors that require gradients records the inputs and a vector-Jacobian
closure on the output tensor, and ``backward`` replays the resulting graph
in reverse topological order.  All math is 64-bit so that central
finite-difference checks at step 1e-5 are meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a primitive."""


class DomainError(ValueError):
    """Raised when operand values lie outside a primitive's domain."""


class UnknownPrimitiveError(ValueError):
    """Raised by ``apply_primitive`` for an unregistered primitive id."""


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``grad`` is populated by ``backward`` for every leaf (a tensor not
    produced by a recorded primitive) with ``requires_grad`` set.  Repeated
    backward passes accumulate into ``grad`` until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = None

    # -- shape info ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._bad_item()

    def _bad_item(self):
        raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Constant view of this tensor's values (no graph edge)."""
        return Tensor(self.data)

    def is_leaf(self):
        return self._vjp is None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes=axes, keepdims=keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes=axes, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, vjp):
    """Build an output tensor, recording the primitive when grads are needed."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------

PRIMITIVES = {}


def _register(name):
    def deco(fn):
        PRIMITIVES[name] = fn
        return fn

    return deco


def apply_primitive(name, inputs, attrs=None):
    """Apply a primitive by id to a list of tensors with an attribute map."""
    fn = PRIMITIVES.get(name)
    if fn is None:
        raise UnknownPrimitiveError(f"unknown primitive {name!r}; known: {sorted(PRIMITIVES)}")
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

@_register("add")
def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), vjp)


@_register("sub")
def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, "sub", (a, b), vjp)


@_register("mul")
def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), vjp)


@_register("div")
def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "div", (a, b), vjp)


@_register("scalar_mul")
def scalar_mul(a, c):
    a = _wrap(a)
    c = float(c)
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return _make(out, "scalar_mul", (a,), vjp)


# ---------------------------------------------------------------------------
# transcendental / activation primitives
# ---------------------------------------------------------------------------

@_register("exp")
def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, "exp", (a,), vjp)


@_register("log")
def log(a):
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(out, "log", (a,), vjp)


@_register("tanh")
def tanh(a):
    a = _wrap(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, "tanh", (a,), vjp)


@_register("sigmoid")
def sigmoid(a):
    a = _wrap(a)
    out = expit(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (a,), vjp)


@_register("softplus")
def softplus(a):
    a = _wrap(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        return (g * expit(a.data),)

    return _make(out, "softplus", (a,), vjp)


@_register("silu")
def silu(a):
    a = _wrap(a)
    s = expit(a.data)
    out = a.data * s

    def vjp(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _make(out, "silu", (a,), vjp)


@_register("sin")
def sin(a):
    a = _wrap(a)
    out = np.sin(a.data)

    def vjp(g):
        return (g * np.cos(a.data),)

    return _make(out, "sin", (a,), vjp)


@_register("cos")
def cos(a):
    a = _wrap(a)
    out = np.cos(a.data)

    def vjp(g):
        return (-g * np.sin(a.data),)

    return _make(out, "cos", (a,), vjp)


_POWER_EPS = 1e-12


@_register("power")
def power(a, exponent):
    """Elementwise ``a ** exponent`` for a fixed real exponent, base >= 0.

    The gradient at base 0 with exponent < 1 is kept finite by an epsilon
    under the base; power-law magnitude compression hits exact zeros.
    """
    a = _wrap(a)
    p = float(exponent)
    if np.any(a.data < 0):
        raise DomainError("power: base must be nonnegative")
    out = np.power(a.data, p)

    def vjp(g):
        if p >= 1.0:
            base = np.power(a.data, p - 1.0)
        else:
            base = np.power(a.data + _POWER_EPS, p - 1.0)
        return (g * p * base,)

    return _make(out, "power", (a,), vjp)


@_register("prelu")
def prelu(a, slope, axis=None):
    """PReLU with a learnable slope.

    ``slope`` is either a scalar tensor or a 1-D tensor laid out along
    ``axis`` of the input.
    """
    a, slope = _wrap(a), _wrap(slope)
    if slope.ndim not in (0, 1):
        raise ShapeError(f"prelu: slope must be scalar or 1-D, got shape {slope.shape}")
    if slope.ndim == 1:
        if axis is None:
            raise ShapeError("prelu: per-channel slope requires an axis")
        if a.shape[axis] != slope.shape[0]:
            raise ShapeError(
                f"prelu: slope length {slope.shape[0]} does not match input axis "
                f"{axis} extent {a.shape[axis]}")
        bshape = [1] * a.ndim
        bshape[axis] = slope.shape[0]
        s = slope.data.reshape(bshape)
    else:
        s = slope.data
    neg = np.minimum(a.data, 0.0)
    out = np.maximum(a.data, 0.0) + s * neg

    def vjp(g):
        ga = g * np.where(a.data > 0, 1.0, s)
        gs = _unbroadcast(g * neg, s.shape).reshape(slope.shape)
        return ga, gs

    return _make(out, "prelu", (a, slope), vjp)


@_register("atan2")
def atan2(y, x):
    """Two-argument arctangent, elementwise; range (-pi, pi]."""
    y, x = _wrap(y), _wrap(x)
    _check_broadcast("atan2", y, x)
    out = np.arctan2(y.data, x.data)

    def vjp(g):
        d = x.data * x.data + y.data * y.data
        d = np.where(d == 0.0, 1.0, d)
        return _unbroadcast(g * x.data / d, y.shape), _unbroadcast(-g * y.data / d, x.shape)

    return _make(out, "atan2", (y, x), vjp)


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

@_register("matmul")
def matmul(a, b):
    """Matrix product with numpy batch broadcasting on leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have >= 2 axes, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ (a has {a.shape[-1]} columns, "
            f"b has {b.shape[-2]} rows; a {a.shape}, b {b.shape})")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, "matmul", (a, b), vjp)


@_register("softmax")
def softmax(a):
    """Softmax along the last axis, numerically stable and memory-frugal."""
    a = _wrap(a)
    t = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(t, out=t)
    t /= t.sum(axis=-1, keepdims=True)
    out = t

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, "softmax", (a,), vjp)


@_register("layer_norm")
def layer_norm(a, gamma, beta, eps=1e-10):
    """Layer normalization over the last axis with learnable scale/shift."""
    a, gamma, beta = _wrap(a), _wrap(gamma), _wrap(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: scale/shift must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        return gx, ggamma, gbeta

    return _make(out, "layer_norm", (a, gamma, beta), vjp)


@_register("instance_norm")
def instance_norm(a, gamma, beta, eps=1e-5):
    """Instance normalization of an (N, C, H, W) tensor over H x W per channel."""
    a, gamma, beta = _wrap(a), _wrap(gamma), _wrap(beta)
    if a.ndim != 4:
        raise ShapeError(f"instance_norm: expected (N, C, H, W) input, got {a.shape}")
    c = a.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"instance_norm: scale/shift must have shape ({c},), got {gamma.shape} and {beta.shape}")
    axes = (2, 3)
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gb = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gb + beta.data.reshape(1, c, 1, 1)

    def vjp(g):
        gxhat = g * gb
        m = gxhat.mean(axis=axes, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (gxhat - m - xhat * m2)
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        return gx, ggamma, gbeta

    return _make(out, "instance_norm", (a, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------

@_register("concat")
def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                i != axis % len(ref) and t.shape[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tuple(tensors), vjp)


@_register("reshape")
def reshape(a, shape):
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make(out, "reshape", (a,), vjp)


@_register("transpose")
def transpose(a, axes):
    a = _wrap(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} are not a permutation of {a.ndim} axes")
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(out, "transpose", (a,), vjp)


@_register("flip")
def flip(a, axis):
    a = _wrap(a)
    out = np.flip(a.data, axis=axis).copy()

    def vjp(g):
        return (np.flip(g, axis=axis),)

    return _make(out, "flip", (a,), vjp)


@_register("slice")
def slice_(a, key):
    """Basic slicing; ``key`` is a slice or tuple of slices/ints."""
    a = _wrap(a)
    out = a.data[key]

    def vjp(g):
        gx = np.zeros(a.shape)
        gx[key] = g
        return (gx,)

    return _make(out, "slice", (a,), vjp)


@_register("reduce_sum")
def reduce_sum(a, axes=None, keepdims=False):
    a = _wrap(a)
    if axes is not None and not isinstance(axes, tuple):
        axes = (int(axes),)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy() if g.shape != a.shape else g,)

    return _make(out, "reduce_sum", (a,), vjp)


@_register("reduce_mean")
def reduce_mean(a, axes=None, keepdims=False):
    a = _wrap(a)
    if axes is not None and not isinstance(axes, tuple):
        axes = (int(axes),)
    out = a.data.mean(axis=axes, keepdims=keepdims)
    count = a.data.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))

    def vjp(g):
        g = np.asarray(g) / count
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy() if g.shape != a.shape else g,)

    return _make(out, "reduce_mean", (a,), vjp)


# ---------------------------------------------------------------------------
# convolution primitives
# ---------------------------------------------------------------------------

def _pad4(x, pad):
    (pt, pb), (pl, pr) = pad
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _patches(xp, kh, kw, stride, dilation):
    """Strided view of padded (N, C, H, W) input: (N, Ho, Wo, C, kh, kw)."""
    n, c, h, w = xp.shape
    sh, sw = stride
    dh, dw = dilation
    ho = (h - dh * (kh - 1) - 1) // sh + 1
    wo = (w - dw * (kw - 1) - 1) // sw + 1
    sn, sc, shh, sww = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, shh * sh, sww * sw, sc, shh * dh, sww * dw),
        writeable=False,
    )
    return view, ho, wo


def _conv2d_fwd(xp, w, stride, dilation):
    cout, cin, kh, kw = w.shape
    view, ho, wo = _patches(xp, kh, kw, stride, dilation)
    n = xp.shape[0]
    cols = view.reshape(n * ho * wo, cin * kh * kw)
    out = cols @ w.reshape(cout, cin * kh * kw).T
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)


def _conv2d_gw(xp, g, kshape, stride, dilation):
    cout, cin, kh, kw = kshape
    view, ho, wo = _patches(xp, kh, kw, stride, dilation)
    n = xp.shape[0]
    cols = view.reshape(n * ho * wo, cin * kh * kw)
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    return (gm.T @ cols).reshape(kshape)


def _conv2d_gx(g, w, xp_shape, stride, dilation):
    """Adjoint of _conv2d_fwd with respect to the padded input."""
    cout, cin, kh, kw = w.shape
    n, _, h, w_ = xp_shape
    sh, sw = stride
    dh, dw = dilation
    ho, wo = g.shape[2], g.shape[3]
    gcols = np.matmul(g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout),
                      w.reshape(cout, cin * kh * kw))
    gcols = gcols.reshape(n, ho, wo, cin, kh, kw)
    gx = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i * dh:i * dh + sh * ho:sh, j * dw:j * dw + sw * wo:sw] += (
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    return gx


@_register("conv2d")
def conv2d(x, w, b=None, stride=(1, 1), padding=((0, 0), (0, 0)), dilation=(1, 1)):
    """2-D convolution of (N, C_in, H, W) with (C_out, C_in, kH, kW) weights.

    ``padding`` is ((top, bottom), (left, right)) so causal time padding is
    expressible directly.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape[1]} do not match weight channels {w.shape[1]}")
    stride = tuple(stride)
    dilation = tuple(dilation)
    pad = tuple(tuple(p) for p in padding)
    xp = _pad4(x.data, pad)
    kh, kw = w.shape[2], w.shape[3]
    if xp.shape[2] < dilation[0] * (kh - 1) + 1 or xp.shape[3] < dilation[1] * (kw - 1) + 1:
        raise ShapeError(
            f"conv2d: padded spatial extent {xp.shape[2:]} smaller than effective kernel")
    out = _conv2d_fwd(xp, w.data, stride, dilation)
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        out = out + b.data.reshape(1, -1, 1, 1)
        parents.append(b)
    xp_shape = xp.shape

    def vjp(g):
        gxp = _conv2d_gx(g, w.data, xp_shape, stride, dilation)
        (pt, _pb), (pl, _pr) = pad
        gx = gxp[:, :, pt:pt + x.shape[2], pl:pl + x.shape[3]]
        xp2 = _pad4(x.data, pad)
        gw = _conv2d_gw(xp2, g, w.shape, stride, dilation)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, "conv2d", tuple(parents), vjp)


@_register("conv_transpose2d")
def conv_transpose2d(x, w, b=None, stride=(1, 1)):
    """2-D transposed convolution; weight layout (C_in, C_out, kH, kW).

    Output spatial extent is (H-1)*stride + kernel, the exact adjoint of an
    unpadded strided convolution, so a stride-2 kernel-3 deconvolution maps
    100 frequency bins back to 201.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(
            f"conv_transpose2d: need 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"conv_transpose2d: input channels {x.shape[1]} do not match weight "
            f"in-channels {w.shape[0]}")
    stride = tuple(stride)
    dilation = (1, 1)
    cin, cout, kh, kw = w.shape
    n, _, h, w_ = x.shape
    out_shape = (n, cout, (h - 1) * stride[0] + kh, (w_ - 1) * stride[1] + kw)
    # the forward pass is exactly the input-gradient scatter of a strided conv
    # whose weight reads the (C_in, C_out, kh, kw) layout as (cout, cin, kh, kw)
    out = _conv2d_gx(x.data, w.data, out_shape, stride, dilation)
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        out = out + b.data.reshape(1, -1, 1, 1)
        parents.append(b)

    def vjp(g):
        gx = _conv2d_fwd(g, w.data, stride, dilation)
        gw = _conv2d_gw(g, x.data, w.shape, stride, dilation)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, "conv_transpose2d", tuple(parents), vjp)


@_register("conv1d")
def conv1d(x, w, b=None, stride=1, padding=(0, 0), groups=1):
    """1-D convolution along the last axis of (N, C, L).

    ``groups=1`` mixes channels; ``groups=C`` is per-channel (depthwise),
    the form used by the causal convolution inside the scan layer.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: need (N, C, L) input and (C_out, C_in/g, K) weight, "
                         f"got {x.shape} and {w.shape}")
    n, c, length = x.shape
    cout, cing, k = w.shape
    if groups not in (1, c):
        raise ShapeError(f"conv1d: groups must be 1 or {c}, got {groups}")
    if cing != c // groups:
        raise ShapeError(f"conv1d: weight in-channels {cing} incompatible with "
                         f"{c} input channels at groups={groups}")
    x4 = x.data[:, :, None, :]
    w4 = w.data[:, :, None, :]
    pad = ((0, 0), tuple(padding))
    if groups == 1:
        xp = _pad4(x4, pad)
        out = _conv2d_fwd(xp, w4, (1, stride), (1, 1))[:, :, 0, :]
    else:
        if cout != c:
            raise ShapeError(f"conv1d: depthwise needs C_out == C ({cout} != {c})")
        xp = np.pad(x.data, ((0, 0), (0, 0), tuple(padding)))
        lo = (xp.shape[2] - k) // stride + 1
        out = np.zeros((n, c, lo))
        for t in range(k):
            out += w.data[:, 0, t][None, :, None] * xp[:, :, t:t + stride * lo:stride]
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        out = out + b.data.reshape(1, -1, 1)
        parents.append(b)

    def vjp(g):
        pl, _pr = padding
        if groups == 1:
            xp2 = _pad4(x4, pad)
            g4 = g[:, :, None, :]
            gxp = _conv2d_gx(g4, w4, xp2.shape, (1, stride), (1, 1))
            gx = gxp[:, :, 0, pl:pl + length]
            gw = _conv2d_gw(xp2, g4, w4.shape, (1, stride), (1, 1))[:, :, 0, :]
        else:
            xp2 = np.pad(x.data, ((0, 0), (0, 0), tuple(padding)))
            lo = g.shape[2]
            gxp = np.zeros_like(xp2)
            gw = np.zeros_like(w.data)
            for t in range(k):
                seg = xp2[:, :, t:t + stride * lo:stride]
                gw[:, 0, t] = (g * seg).sum(axis=(0, 2))
                gxp[:, :, t:t + stride * lo:stride] += w.data[:, 0, t][None, :, None] * g
            gx = gxp[:, :, pl:pl + length]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return _make(out, "conv1d", tuple(parents), vjp)


# ---------------------------------------------------------------------------
# framing primitives (linear pieces of the STFT round trip)
# ---------------------------------------------------------------------------

@_register("frame")
def frame(x, win, hop):
    """Slice a 1-D signal into overlapping frames: (T, win)."""
    x = _wrap(x)
    if x.ndim != 1:
        raise ShapeError(f"frame: expected 1-D signal, got shape {x.shape}")
    n = x.shape[0]
    if n < win:
        raise ShapeError(f"frame: signal length {n} shorter than window {win}")
    t = (n - win) // hop + 1
    idx0 = np.arange(t) * hop
    s = x.data.strides[0]
    view = np.lib.stride_tricks.as_strided(x.data, shape=(t, win), strides=(s * hop, s),
                                           writeable=False)
    out = view.copy()

    def vjp(g):
        gx = np.zeros(x.shape)
        for i in range(t):
            gx[idx0[i]:idx0[i] + win] += g[i]
        return (gx,)

    return _make(out, "frame", (x,), vjp)


@_register("overlap_add")
def overlap_add(frames, hop, length):
    """Overlap-add (T, win) frames into a signal of the given length."""
    frames = _wrap(frames)
    if frames.ndim != 2:
        raise ShapeError(f"overlap_add: expected (T, win) frames, got {frames.shape}")
    t, win = frames.shape
    need = (t - 1) * hop + win
    if length < need:
        raise ShapeError(f"overlap_add: length {length} shorter than span {need}")
    out = np.zeros(length)
    for i in range(t):
        out[i * hop:i * hop + win] += frames.data[i]

    def vjp(g):
        gf = np.empty((t, win))
        for i in range(t):
            gf[i] = g[i * hop:i * hop + win]
        return (gf,)

    return _make(out, "overlap_add", (frames,), vjp)


# ---------------------------------------------------------------------------
# selective scan primitive
# ---------------------------------------------------------------------------

@_register("selective_scan")
def selective_scan(x, delta, b, c, a_diag):
    """Input-dependent diagonal state-space scan.

    Shapes (optionally with one leading batch axis G):
      x, delta : (..., L, K)
      b, c     : (..., L, N)
      a_diag   : (N, K), strictly negative for a stable system

    Recurrence with h_0 = 0:
      h_i = exp(delta_i * A) ⊙ h_{i-1} + outer(b_i, delta_i ⊙ x_i)
      y_i = sum_n c_{i,n} h_{i,n,:}

    Forward and backward are explicit loops over L with the per-step state
    kept; this is the reference sequential scan the benchmarks measure.
    """
    x, delta, b, c, a_diag = map(_wrap, (x, delta, b, c, a_diag))
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    dd = delta.data[None] if squeeze else delta.data
    bd = b.data[None] if squeeze else b.data
    cd = c.data[None] if squeeze else c.data
    if xd.ndim != 3 or bd.ndim != 3 or a_diag.ndim != 2:
        raise ShapeError("selective_scan: expected (L, K) or (G, L, K) inputs")
    g_, l_, k_ = xd.shape
    n_ = bd.shape[-1]
    if dd.shape != (g_, l_, k_):
        raise ShapeError(f"selective_scan: delta shape {delta.shape} does not match x {x.shape}")
    if cd.shape != (g_, l_, n_):
        raise ShapeError(f"selective_scan: c shape {c.shape} does not match b {b.shape}")
    if a_diag.shape != (n_, k_):
        raise ShapeError(
            f"selective_scan: a_diag shape {a_diag.shape} should be ({n_}, {k_})")
    ad = a_diag.data

    if l_ == 0:
        out = np.zeros((l_, k_)) if squeeze else np.zeros((g_, l_, k_))
        return _make(out, "selective_scan", (x, delta, b, c, a_diag), lambda g: (
            np.zeros(x.shape), np.zeros(delta.shape), np.zeros(b.shape),
            np.zeros(c.shape), np.zeros(a_diag.shape)))

    hs = np.empty((g_, l_, n_, k_))
    abar = np.exp(dd[:, :, None, :] * ad[None, None])  # (G, L, N, K)
    u = dd * xd                                        # (G, L, K)
    h = np.zeros((g_, n_, k_))
    y = np.empty((g_, l_, k_))
    for i in range(l_):
        h = abar[:, i] * h + bd[:, i, :, None] * u[:, i, None, :]
        hs[:, i] = h
        y[:, i] = np.einsum("gn,gnk->gk", cd[:, i], h)
    out = y[0] if squeeze else y

    def vjp(g):
        gy = g[None] if squeeze else g
        gx = np.zeros((g_, l_, k_))
        gd = np.zeros((g_, l_, k_))
        gb = np.zeros((g_, l_, n_))
        gc = np.zeros((g_, l_, n_))
        ga = np.zeros((n_, k_))
        lam = np.zeros((g_, n_, k_))
        for i in range(l_ - 1, -1, -1):
            gc[:, i] = np.einsum("gnk,gk->gn", hs[:, i], gy[:, i])
            lam = lam + cd[:, i, :, None] * gy[:, i, None, :]
            hprev = hs[:, i - 1] if i > 0 else np.zeros((g_, n_, k_))
            gabar = lam * hprev
            ga += np.einsum("gnk,gnk->nk", gabar, abar[:, i] * dd[:, i, None, :])
            gd[:, i] += (gabar * abar[:, i] * ad[None]).sum(axis=1)
            gu = (lam * bd[:, i, :, None]).sum(axis=1)
            gb[:, i] = (lam * u[:, i, None, :]).sum(axis=2)
            gx[:, i] = gu * dd[:, i]
            gd[:, i] += gu * xd[:, i]
            lam = lam * abar[:, i]
        if squeeze:
            return gx[0], gd[0], gb[0], gc[0], ga
        return gx, gd, gb, gc, ga

    return _make(out, "selective_scan", (x, delta, b, c, a_diag), vjp)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out):
    """Populate ``grad`` on every requires_grad leaf reachable from ``out``.

    ``out`` must be a scalar produced through recorded primitives (or a
    scalar leaf).  Gradients accumulate across repeated calls.
    """
    if not isinstance(out, Tensor):
        raise TypeError("backward expects a Tensor")
    if out.data.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {out.shape}")
    order = _toposort(out)
    grads = {id(out): np.ones(out.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if not (p.requires_grad or p._vjp is not None):
                continue
            pg = np.asarray(pg)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: tuple
    passed: bool
    message: str = ""

    def __bool__(self):
        return self.passed


def grad_check(f, x, step=1e-5, tol=1e-5):
    """Compare backward() gradients of scalar f(x) with central differences.

    The relative error per coordinate is |g_ad - g_fd| / max(1, |g_ad|,
    |g_fd|), reported as the max over all coordinates of ``x``.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    x = _wrap(x)
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if not np.isfinite(out.data).all():
        return GradCheckReport(math.inf, (), False, "f(x) is not finite")
    backward(out)
    g_ad = np.zeros(x.shape) if x.grad is None else x.grad
    flat = x.data.reshape(-1)
    worst = 0.0
    worst_idx = ()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        fp = f(Tensor(x.data)).item()
        flat[i] = keep - step
        fm = f(Tensor(x.data)).item()
        flat[i] = keep
        if not (math.isfinite(fp) and math.isfinite(fm)):
            idx = np.unravel_index(i, x.shape)
            return GradCheckReport(math.inf, idx, False,
                                   f"f not finite at probe for coordinate {idx}")
        g_fd = (fp - fm) / (2.0 * step)
        g_a = g_ad.reshape(-1)[i]
        err = abs(g_a - g_fd) / max(1.0, abs(g_a), abs(g_fd))
        if err > worst:
            worst = err
            worst_idx = np.unravel_index(i, x.shape)
    return GradCheckReport(worst, worst_idx, worst <= tol)


# ---------------------------------------------------------------------------
# parameter construction helpers
# ---------------------------------------------------------------------------

def param_uniform(rng, shape, fan_in):
    """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] init for projection weights."""
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def param_zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def param_const(value):
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
