"""Differentiable ops over :class:`Tensor`.

Layout is NHWC for images. Convolutions lower to an im2col gather plus a
matmul; im2col and col2im are each other's adjoint, which keeps every
backward expressible in ops that have backwards of their own.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Function, ShapeError, Tensor, record_kink

# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def _reduce_to(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if arr.shape == shape:
        return arr
    lead = arr.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, s in enumerate(shape) if s == 1 and arr.shape[i + lead] != 1)
    out = arr.sum(axis=axes, keepdims=True) if axes else arr
    return out.reshape(shape)


class SumTo(Function):
    name = "sum_to"

    def forward(self, x):
        return _reduce_to(x, self.attrs["shape"])

    def backward(self, g):
        return (broadcast_to(g, self.inputs[0].shape),)


class BroadcastTo(Function):
    name = "broadcast_to"

    def forward(self, x):
        return np.ascontiguousarray(np.broadcast_to(x, self.attrs["shape"]))

    def backward(self, g):
        return (sum_to(g, self.inputs[0].shape),)


def sum_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return SumTo.apply(x, shape=shape)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return BroadcastTo.apply(x, shape=shape)


class Reshape(Function):
    name = "reshape"

    def forward(self, x):
        return x.reshape(self.attrs["shape"])

    def backward(self, g):
        return (reshape(g, self.inputs[0].shape),)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    return Reshape.apply(x, shape=shape)


class Transpose(Function):
    name = "transpose"

    def forward(self, x):
        return np.ascontiguousarray(np.transpose(x, self.attrs["axes"]))

    def backward(self, g):
        axes = self.attrs["axes"]
        inv = tuple(np.argsort(axes)) if axes is not None else None
        return (transpose(g, inv),)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is not None:
        axes = tuple(int(a) for a in axes)
    return Transpose.apply(x, axes=axes)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


class Add(Function):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    name = "div"

    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb


class Neg(Function):
    name = "neg"

    def forward(self, x):
        return -x

    def backward(self, g):
        return (neg(g),)


class Power(Function):
    name = "power"

    def forward(self, x):
        return np.power(x, self.attrs["p"])

    def backward(self, g):
        (x,) = self.inputs
        p = self.attrs["p"]
        if p == 2:
            return (mul(g, x * 2.0),)
        return (mul(g, power(x, p - 1) * float(p)),)


class Exp(Function):
    name = "exp"

    def forward(self, x):
        return np.exp(x)

    def backward(self, g):
        return (mul(g, self.output()),)


class Log(Function):
    name = "log"

    def forward(self, x):
        return np.log(x)

    def backward(self, g):
        return (div(g, self.inputs[0]),)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return Div.apply(a, b)


def neg(x: Tensor) -> Tensor:
    return Neg.apply(x)


def power(x: Tensor, p: float) -> Tensor:
    return Power.apply(x, p=p)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def const(arr, like: Tensor) -> Tensor:
    """Non-differentiable tensor in ``like``'s dtype."""
    return Tensor(np.asarray(arr, dtype=like.dtype))


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------


class Sum(Function):
    name = "sum"

    def forward(self, x):
        return np.asarray(x.sum(axis=self.attrs["axis"], keepdims=self.attrs["keepdims"]))

    def backward(self, g):
        (x,) = self.inputs
        axis = self.attrs["axis"]
        if not self.attrs["keepdims"] and axis is not None:
            axes = (axis,) if isinstance(axis, int) else axis
            kept = list(x.shape)
            for a in axes:
                kept[a % x.ndim] = 1
            g = reshape(g, kept)
        elif axis is None:
            g = reshape(g, (1,) * x.ndim)
        return (broadcast_to(g, x.shape),)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if isinstance(axis, list):
        axis = tuple(axis)
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


class MaxReduce(Function):
    """Max along one axis; ties resolve to the first index."""

    name = "max"

    def forward(self, x):
        axis = self.attrs["axis"]
        idx = np.argmax(x, axis=axis)
        onehot = np.zeros(x.shape, dtype=bool)
        np.put_along_axis(onehot, np.expand_dims(idx, axis), True, axis=axis)
        record_kink(onehot)
        self.mask = onehot
        return np.max(x, axis=axis, keepdims=self.attrs["keepdims"])

    def backward(self, g):
        (x,) = self.inputs
        if not self.attrs["keepdims"]:
            kept = list(x.shape)
            kept[self.attrs["axis"]] = 1
            g = reshape(g, kept)
        return (mul(broadcast_to(g, x.shape), const(self.mask, x)),)


def max_reduce(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return MaxReduce.apply(x, axis=axis, keepdims=keepdims)


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# masking, selection, quantizer plumbing
# ---------------------------------------------------------------------------


class MaskedPass(Function):
    """Multiply by a constant 0/1 mask; the mask is recorded as a kink."""

    name = "masked"

    def forward(self, x):
        return x * self.attrs["mask"]

    def backward(self, g):
        return (mul(g, const(self.attrs["mask"], g)),)


class ReLU(Function):
    name = "relu"

    def forward(self, x):
        # subgradient 0 at exactly 0
        self.mask = x > 0
        record_kink(self.mask)
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, g):
        return (mul(g, const(self.mask, g)),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    def backward(self, g):
        s = self.output()
        return (mul(g, mul(s, 1.0 - s)),)


class Where(Function):
    name = "where"

    def forward(self, a, b):
        return np.where(self.attrs["mask"], a, b).astype(a.dtype)

    def backward(self, g):
        m = self.attrs["mask"]
        a, b = self.inputs
        ga = sum_to(mul(g, const(m, g)), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, const(~m, g)), b.shape) if b.requires_grad else None
        return ga, gb


class StraightThrough(Function):
    """Forward emits precomputed values; backward passes the gradient where
    ``pass_mask`` is set and blocks it elsewhere."""

    name = "ste"

    def forward(self, x):
        record_kink(self.attrs["pass_mask"])
        return np.asarray(self.attrs["values"], dtype=x.dtype)

    def backward(self, g):
        return (mul(g, const(self.attrs["pass_mask"], g)),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    return Where.apply(a, b, mask=np.asarray(mask, dtype=bool))


def straight_through(x: Tensor, values: np.ndarray, pass_mask: np.ndarray) -> Tensor:
    return StraightThrough.apply(x, values=values, pass_mask=np.asarray(pass_mask, dtype=bool))


def masked(x: Tensor, mask: np.ndarray) -> Tensor:
    return MaskedPass.apply(x, mask=np.asarray(mask, dtype=x.dtype))


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data, dtype=x.dtype)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x - const(m, x)
    return log(sum(exp(shifted), axis=axis, keepdims=True)) + const(m, x)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    e = exp(x - const(m, x))
    return e / sum(e, axis=axis, keepdims=True)


def cross_entropy(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean categorical cross-entropy of softmax(logits) against one-hot rows."""
    if logits.shape != np.shape(onehot):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {np.shape(onehot)}")
    lp = log_softmax(logits, axis=-1)
    return neg(sum(lp * const(onehot, logits))) * (1.0 / logits.shape[0])


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Output extent and (before, after) zero padding for one spatial axis.

    "same" gives ceil(size / stride) outputs; odd padding goes after.
    """
    if padding == "valid":
        out = (size - kernel) // stride + 1
        if out < 1:
            raise ShapeError(f"kernel {kernel} larger than input extent {size} with valid padding")
        return out, 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + kernel - size, 0)
        return out, total // 2, total - total // 2
    raise ValueError(f"unknown padding {padding!r}")


class Pad(Function):
    name = "pad"

    def forward(self, x):
        return np.pad(x, self.attrs["widths"])

    def backward(self, g):
        return (crop(g, self.attrs["widths"]),)


class Crop(Function):
    name = "crop"

    def forward(self, x):
        sl = tuple(slice(a, x.shape[i] - b) for i, (a, b) in enumerate(self.attrs["widths"]))
        return np.ascontiguousarray(x[sl])

    def backward(self, g):
        return (pad(g, self.attrs["widths"]),)


def pad(x: Tensor, widths) -> Tensor:
    widths = tuple((int(a), int(b)) for a, b in widths)
    if not any(a or b for a, b in widths):
        return x
    return Pad.apply(x, widths=widths)


def crop(x: Tensor, widths) -> Tensor:
    widths = tuple((int(a), int(b)) for a, b in widths)
    if not any(a or b for a, b in widths):
        return x
    return Crop.apply(x, widths=widths)


def _tap_slices(kh: int, kw: int, stride: int, ho: int, wo: int):
    for i in range(kh):
        for j in range(kw):
            yield i, j, slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride)


class Im2Col(Function):
    """(N, Hp, Wp, C) -> (N, Ho, Wo, kh, kw, C) patches of a padded input."""

    name = "im2col"

    def forward(self, x):
        kh, kw, s = self.attrs["kh"], self.attrs["kw"], self.attrs["stride"]
        n, hp, wp, c = x.shape
        ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
        cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
        for i, j, si, sj in _tap_slices(kh, kw, s, ho, wo):
            cols[:, :, :, i, j, :] = x[:, si, sj, :]
        return cols

    def backward(self, g):
        return (col2im(g, self.inputs[0].shape, self.attrs["stride"]),)


class Col2Im(Function):
    """Adjoint of :class:`Im2Col`: scatter-add patches back to image layout."""

    name = "col2im"

    def forward(self, cols):
        n, ho, wo, kh, kw, c = cols.shape
        s = self.attrs["stride"]
        out = np.zeros(self.attrs["image_shape"], dtype=cols.dtype)
        for i, j, si, sj in _tap_slices(kh, kw, s, ho, wo):
            out[:, si, sj, :] += cols[:, :, :, i, j, :]
        return out

    def backward(self, g):
        _, _, _, kh, kw, _ = self.inputs[0].shape
        return (im2col(g, kh, kw, self.attrs["stride"]),)


def im2col(x: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    return Im2Col.apply(x, kh=kh, kw=kw, stride=stride)


def col2im(cols: Tensor, image_shape, stride: int) -> Tensor:
    return Col2Im.apply(cols, image_shape=tuple(image_shape), stride=stride)


def _check_nhwc(op: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected NHWC input of rank 4, got shape {x.shape}")


def _patches(op: str, x: Tensor, kh: int, kw: int, stride: int, padding: str) -> Tensor:
    _check_nhwc(op, x)
    _, h, w, _ = x.shape
    try:
        _, ph0, ph1 = conv_output_size(h, kh, stride, padding)
        _, pw0, pw1 = conv_output_size(w, kw, stride, padding)
    except ShapeError as err:
        raise ShapeError(f"{op}: {err} (input {x.shape})") from None
    xp = pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    return im2col(xp, kh, kw, stride)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: str = "valid") -> Tensor:
    """kernel: (kh, kw, C_in, C_out)."""
    _check_nhwc("conv2d", x)
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (kh, kw, C_in, C_out), got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[3]} != kernel C_in {cin}")
    n = x.shape[0]
    if kh == 1 and kw == 1 and stride == 1:
        rows = reshape(x, (-1, cin))
        ho, wo = x.shape[1], x.shape[2]
    else:
        cols = _patches("conv2d", x, kh, kw, stride, padding)
        ho, wo = cols.shape[1], cols.shape[2]
        rows = reshape(cols, (n * ho * wo, kh * kw * cin))
    out = matmul(rows, reshape(kernel, (kh * kw * cin, cout)))
    out = reshape(out, (n, ho, wo, cout))
    if bias is not None:
        out = out + bias
    return out


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: str = "valid") -> Tensor:
    """kernel: (kh, kw, C, multiplier); output has C * multiplier channels."""
    _check_nhwc("depthwise_conv2d", x)
    if kernel.ndim != 4:
        raise ShapeError(f"depthwise_conv2d: kernel must be (kh, kw, C, M), got {kernel.shape}")
    kh, kw, c, m = kernel.shape
    if x.shape[3] != c:
        raise ShapeError(f"depthwise_conv2d: input channels {x.shape[3]} != kernel channels {c}")
    cols = _patches("depthwise_conv2d", x, kh, kw, stride, padding)
    n, ho, wo = cols.shape[:3]
    if m == 1:
        out = sum(cols * reshape(kernel, (kh, kw, c)), axis=(3, 4))
    else:
        cols = reshape(cols, (n, ho, wo, kh, kw, c, 1))
        out = reshape(sum(cols * kernel, axis=(3, 4)), (n, ho, wo, c * m))
    if bias is not None:
        out = out + bias
    return out


def separable_conv2d(
    x: Tensor,
    depthwise_kernel: Tensor,
    pointwise_kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: str = "valid",
) -> Tensor:
    """Depthwise conv followed by a 1x1 pointwise conv (bias after pointwise)."""
    mid = depthwise_conv2d(x, depthwise_kernel, None, stride, padding)
    return conv2d(mid, pointwise_kernel, bias, 1, "valid")


def max_pool2d(x: Tensor, pool: int = 2, stride: Optional[int] = None, padding: str = "valid") -> Tensor:
    stride = stride or pool
    cols = _patches("max_pool2d", x, pool, pool, stride, padding)
    n, ho, wo, _, _, c = cols.shape
    return max_reduce(reshape(cols, (n, ho, wo, pool * pool, c)), axis=3)


def avg_pool2d(x: Tensor, pool: int = 2, stride: Optional[int] = None, padding: str = "valid") -> Tensor:
    stride = stride or pool
    cols = _patches("avg_pool2d", x, pool, pool, stride, padding)
    return mean(cols, axis=(3, 4))


def global_avg_pool2d(x: Tensor) -> Tensor:
    _check_nhwc("global_avg_pool2d", x)
    return mean(x, axis=(1, 2))


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"dense: expected (N, D) input, got {x.shape}")
    if weight.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise ShapeError(f"dense: input features {x.shape[1]} != weight rows {weight.shape[0] if weight.ndim else '?'} (weight {weight.shape})")
    out = matmul(x, weight)
    if bias is not None:
        out = out + bias
    return out


BN_EPS = 1e-3
BN_MOMENTUM = 0.99


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Normalizes over every axis but the last. In training mode the batch
    statistics are used and the running arrays are updated in place."""
    c = x.shape[-1]
    if gamma.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but gamma has shape {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = mean(centered * centered, axis=axes, keepdims=True)
        xhat = centered * power(var + eps, -0.5)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.data.reshape(c)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.data.reshape(c)
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x - const(running_mean, x)) * const(inv, x)
    return xhat * gamma + beta


# ---------------------------------------------------------------------------
# row selection
# ---------------------------------------------------------------------------


class TakeRows(Function):
    """x[index] along the batch axis (index may repeat)."""

    name = "take_rows"

    def forward(self, x):
        return x[self.attrs["index"]]

    def backward(self, g):
        return (scatter_rows(g, self.attrs["index"], self.inputs[0].shape[0]),)


class ScatterRows(Function):
    """Adjoint of :class:`TakeRows`: adds row r of the input into output row index[r]."""

    name = "scatter_rows"

    def forward(self, g):
        out = np.zeros((self.attrs["rows"],) + g.shape[1:], dtype=g.dtype)
        np.add.at(out, self.attrs["index"], g)
        return out

    def backward(self, g):
        return (take_rows(g, self.attrs["index"]),)


def take_rows(x: Tensor, index) -> Tensor:
    return TakeRows.apply(x, index=np.asarray(index, dtype=np.int64).reshape(-1))


def scatter_rows(g: Tensor, index, rows: int) -> Tensor:
    return ScatterRows.apply(g, index=np.asarray(index, dtype=np.int64).reshape(-1), rows=rows)


# ---------------------------------------------------------------------------
# dispatch by kind
# ---------------------------------------------------------------------------

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "dense": dense,
    "conv2d": conv2d,
    "depthwise_conv2d": depthwise_conv2d,
    "separable_conv2d": separable_conv2d,
    "batchnorm": batch_norm,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "max_pool2d": max_pool2d,
    "avg_pool2d": avg_pool2d,
    "global_avg_pool2d": global_avg_pool2d,
    "flatten": flatten,
    "exp": exp,
    "log": log,
}


def forward_op(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply the op named ``kind``; attrs are passed as keyword arguments."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **attrs)


def frobenius_sq(x: Tensor) -> Tensor:
    return sum(x * x)


def norm2(arr: np.ndarray) -> float:
    return math.sqrt(float(np.sum(np.square(arr, dtype=np.float64))))
