"""Differentiable operations on :class:`Tensor`.

Broadcasting follows numpy's right-aligned rule but only ever stretches
unit extents (or prepends missing leading ones); gradients are summed
back over the stretched axes.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor

__all__ = [
    "add", "sub", "mul", "div", "scale", "neg", "sigmoid", "relu", "abs", "exp",
    "log", "square", "elementwise", "matmul", "softmax_lastdim", "sum", "mean",
    "l1_distance", "reduce", "reshape", "transpose", "getitem", "concat",
    "pad2d", "resize_nearest", "linear_axis", "conv2d", "cross_entropy",
    "minimum", "maximum",
]


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"shapes {a} and {b} are not broadcastable") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._from_op(out, "div", (a, b), vjp)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return Tensor._from_op(x.data * c, "scale", (x,), lambda g: (g * c,))


def neg(x) -> Tensor:
    return scale(x, -1.0)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return Tensor._from_op(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return Tensor._from_op(x.data * factor, "leaky_relu", (x,), lambda g: (g * factor,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    sign = np.sign(x.data)
    return Tensor._from_op(np.abs(x.data), "abs", (x,), lambda g: (g * sign,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._from_op(out, "exp", (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(x.data * x.data, "square", (x,), lambda g: (2.0 * g * x.data,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties split the gradient evenly."""
    return scale(sub(add(a, b), abs(sub(a, b))), 0.5)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties split the gradient evenly."""
    return scale(add(add(a, b), abs(sub(a, b))), 0.5)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sigmoid": sigmoid,
    "relu": relu,
    "abs": abs,
    "scale": scale,
    "exp": exp,
    "log": log,
    "square": square,
    "neg": neg,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch a pointwise op by name (``scale`` takes a float second argument)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, "matmul", (a, b), vjp)


def linear_axis(x, m: np.ndarray, axis: int) -> Tensor:
    """Apply the constant matrix ``m`` (out x in) along ``axis`` of ``x``."""
    x = as_tensor(x)
    m = np.asarray(m, dtype=np.float64)
    axis = axis % x.ndim
    if x.shape[axis] != m.shape[1]:
        raise DimensionError(f"axis {axis} has extent {x.shape[axis]}, matrix expects {m.shape[1]}")
    out = np.moveaxis(np.tensordot(m, x.data, axes=([1], [axis])), 0, axis)

    def vjp(g):
        return (np.moveaxis(np.tensordot(m.T, g, axes=([1], [axis])), 0, axis),)

    return Tensor._from_op(out, "linear_axis", (x,), vjp)


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(out, "softmax", (x,), vjp)


# -- reductions --------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(out, "sum", (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.sum(axis=axes, keepdims=keepdims) / count

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return Tensor._from_op(out, "mean", (x,), vjp)


def l1_distance(a, b) -> Tensor:
    """Sum of absolute differences of two equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"l1_distance operands differ: {a.shape} vs {b.shape}")
    return sum(abs(sub(a, b)))


def reduce(op: str, *args, **kwargs) -> Tensor:
    if op == "sum":
        return sum(*args, **kwargs)
    if op == "mean":
        return mean(*args, **kwargs)
    if op == "l1_distance":
        return l1_distance(*args)
    raise ValueError(f"unknown reduction {op!r}")


# -- structural --------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return Tensor._from_op(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return Tensor._from_op(np.transpose(x.data, axes), "transpose", (x,),
                           lambda g: (np.transpose(g, inv),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]

    basic = _is_basic(idx)

    def vjp(g):
        full = np.zeros(x.shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.array(out), "getitem", (x,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of nothing")
    axis = axis % ts[0].ndim
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return Tensor._from_op(out, "concat", tuple(ts), vjp)


def pad2d(x, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the last two axes at the bottom/right."""
    x = as_tensor(x)
    if pad_h == 0 and pad_w == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, pad_h), (0, pad_w)]
    h, w = x.shape[-2:]
    return Tensor._from_op(np.pad(x.data, widths), "pad2d", (x,), lambda g: (g[..., :h, :w],))


def resize_nearest(x, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of the last two axes to ``size``."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    oh, ow = size
    if (oh, ow) == (h, w):
        return x
    ri = (np.arange(oh) * h) // oh
    ci = (np.arange(ow) * w) // ow
    out = x.data[..., ri, :][..., :, ci]
    if oh % h == 0 and ow % w == 0:
        fh, fw = oh // h, ow // w
        lead = x.shape[:-2]

        def vjp(g):
            return (g.reshape(lead + (h, fh, w, fw)).sum(axis=(-3, -1)),)

        return Tensor._from_op(out, "resize_nearest", (x,), vjp)

    def vjp(g):
        full = np.zeros(x.shape)
        tmp = np.zeros(x.shape[:-2] + (h, ow))
        np.add.at(tmp, (Ellipsis, ri, slice(None)), g)
        np.add.at(full, (Ellipsis, slice(None), ci), tmp)
        return (full,)

    return Tensor._from_op(out, "resize_nearest", (x,), vjp)


# -- convolution -------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, x: N×C×H×W, w: Co×C×k×k, optional bias Co."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise DimensionError(f"weight {w.shape} incompatible with input {x.shape}")
    if k % 2 == 0:
        raise DimensionError("kernel extent must be odd")
    if pad < 0 or stride < 1:
        raise DimensionError("pad must be >= 0 and stride >= 1")
    span_h, span_w = h + 2 * pad - k, wd + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(f"non-integral output extent for input {x.shape}, k={k}, stride={stride}, pad={pad}")
    oh, ow = span_h // stride + 1, span_w // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # column matrix laid out (C, k, k, N, oh, ow): one strided copy per tap
    xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    cols = np.empty((c, k, k, n, oh, ow))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    cols = cols.reshape(c * k * k, n * oh * ow)
    wmat = w.data.reshape(co, c * k * k)
    out = (wmat @ cols).reshape(co, n, oh, ow).transpose(1, 0, 2, 3)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (co,):
            raise DimensionError(f"bias shape {b.shape} != ({co},)")
        out = out + b.data[None, :, None, None]
        inputs = (x, w, b)

    def vjp(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * oh * ow)
        gw = (gt @ cols.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gt).reshape(c, k, k, n, oh, ow)
            gxt = np.zeros(xt.shape)
            for i in range(k):
                for j in range(k):
                    gxt[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, i, j]
            gx = gxt.transpose(1, 0, 2, 3)
            gx = gx[:, :, pad:pad + h, pad:pad + wd] if pad else gx
            gx = np.ascontiguousarray(gx)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._from_op(np.ascontiguousarray(out), "conv2d", inputs, vjp)


# -- losses ------------------------------------------------------------------

def cross_entropy(logits, labels: np.ndarray, axis: int = 1) -> Tensor:
    """Mean softmax cross-entropy with integer ``labels`` over class ``axis``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    axis = axis % logits.ndim
    z = np.moveaxis(logits.data, axis, -1)
    if z.shape[:-1] != labels.shape:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    k = z.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("label id out of range")
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    count = labels.size
    picked = np.take_along_axis(logp, labels[..., None].astype(np.intp), axis=-1)
    loss = -picked.sum() / count

    def vjp(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[..., None].astype(np.intp), 1.0, axis=-1)
        grad = (p - onehot) * (float(g) / count)
        return (np.moveaxis(grad, -1, axis),)

    return Tensor._from_op(np.array(loss), "cross_entropy", (logits,), vjp)

