"""Runtime layers: parameter storage, quantize-on-read forward passes, and the
closed-form squared Frobenius norm of each layer's input-output Jacobian.

Each layer computes ``out = act_quant(act(linear(z_in)))``. The Jacobian of
that map for one sample is ``diag(a') @ L`` where ``L`` is the linear part, so
its squared Frobenius norm is ``sum_rows a'_r^2 * ||L_r||^2``. For the
convolution family ``||L_r||^2`` is a sum of squared kernel taps that land
inside the image, which keeps the term cheap and differentiable in the
(quantized) weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..autodiff import ops
from ..autodiff.ops import BN_EPS, BN_MOMENTUM, conv_output_size
from ..autodiff.tensor import Tensor
from ..quantize import QuantizerSpec, quantization_error, sq_select, ste_mask, ste_quantize
from .spec import LayerSpec

# quantized_relu activation without an explicit quantizer: 4 bits, range [0, 3.75]
DEFAULT_QRELU = QuantizerSpec("quantized_relu", bits=4, integer_bits=2)


@dataclass
class ForwardContext:
    """Per-pass settings plus an optional record of every layer's tensors."""

    training: bool = False
    rng: Optional[np.random.Generator] = None
    # batchnorm uses batch statistics when True; None follows ``training``
    batch_stats: Optional[bool] = None
    sq_ratio: Optional[float] = None
    update_stats: bool = True
    record: bool = False
    records: list["LayerRecord"] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)


@dataclass
class LayerRecord:
    z_in: Tensor
    pre: Tensor  # before the activation
    out: Tensor  # after activation and activation quantizer, before any residual add
    weights: dict[str, Tensor]
    bn_scale: Optional[Tensor] = None


def _in_bounds_taps(h: int, w: int, kernel: int, stride: int, padding: str) -> np.ndarray:
    """(Ho*Wo, k*k) indicator of which kernel taps read real (unpadded) pixels."""
    _, ph0, ph1 = conv_output_size(h, kernel, stride, padding)
    _, pw0, pw1 = conv_output_size(w, kernel, stride, padding)
    ones = np.pad(np.ones((1, h, w, 1)), ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    cols = ops.Im2Col.apply(Tensor(ones, dtype=np.float64), kh=kernel, kw=kernel, stride=stride).data
    return cols.reshape(-1, kernel * kernel)


class Layer:
    def __init__(self, spec: LayerSpec, in_shape: tuple[int, ...], out_shape: tuple[int, ...], final: bool = False):
        self.spec = spec
        self.name = spec.name
        self.kind = spec.kind
        self.in_shape = in_shape
        self.out_shape = out_shape
        # the network emits logits; a trailing softmax is applied by predict()
        self.activation = "linear" if final and spec.activation == "softmax" else spec.activation
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._taps: Optional[np.ndarray] = None

    # -- construction -----------------------------------------------------
    def init(self, rng: np.random.Generator, dtype=np.float32) -> None:
        s = self.spec
        k = s.kernel
        c_in = self.in_shape[-1]

        def he(shape, fan_in):
            if s.kernel_init == "zeros":
                return np.zeros(shape, dtype=dtype)
            limit = math.sqrt(6.0 / fan_in)
            return rng.uniform(-limit, limit, size=shape).astype(dtype)

        if self.kind == "conv2d":
            self._param("kernel", he((k, k, c_in, s.filters), k * k * c_in))
            self._bias(s.filters, dtype)
        elif self.kind == "depthwise_conv2d":
            self._param("kernel", he((k, k, c_in, s.depth_multiplier), k * k))
            self._bias(c_in * s.depth_multiplier, dtype)
        elif self.kind == "separable_conv2d":
            mid = c_in * s.depth_multiplier
            self._param("depthwise_kernel", he((k, k, c_in, s.depth_multiplier), k * k))
            self._param("pointwise_kernel", he((1, 1, mid, s.filters), mid))
            self._bias(s.filters, dtype)
        elif self.kind == "dense":
            self._param("kernel", he((self.in_shape[0], s.units), self.in_shape[0]))
            self._bias(s.units, dtype)
        elif self.kind == "batchnorm":
            c = self.in_shape[-1]
            self._param("gamma", np.ones(c, dtype=dtype))
            self._param("beta", np.zeros(c, dtype=dtype))
            self.buffers["moving_mean"] = np.zeros(c, dtype=dtype)
            self.buffers["moving_var"] = np.ones(c, dtype=dtype)

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=f"{self.name}/{name}", dtype=value.dtype)

    def _bias(self, n: int, dtype) -> None:
        if self.spec.use_bias:
            self._param("bias", np.zeros(n, dtype=dtype))

    @property
    def quantized_params(self) -> tuple[str, ...]:
        """Parameters that pass through the weight quantizer on read."""
        if self.kind == "batchnorm":
            return ()
        return tuple(self.params)

    # -- forward ------------------------------------------------------------
    def read_weights(self, ctx: ForwardContext) -> dict[str, Tensor]:
        q = self.spec.weight_quantizer
        read = {}
        for name, p in self.params.items():
            if name not in self.quantized_params or q.kind == "fp32":
                read[name] = p
                continue
            select = None
            if ctx.training and ctx.sq_ratio is not None and ctx.sq_ratio < 1.0:
                err = quantization_error(q.deterministic(), p.data)
                select = sq_select(err, ctx.sq_ratio, ctx.rng or np.random.default_rng(q.seed))
            read[name] = ste_quantize(q, p, ctx.rng, ctx.training, select)
        return read

    def linear(self, x: Tensor, w: dict[str, Tensor], ctx: ForwardContext) -> tuple[Tensor, Optional[Tensor]]:
        s = self.spec
        k = self.kind
        if k == "conv2d":
            return ops.conv2d(x, w["kernel"], w.get("bias"), s.stride, s.padding), None
        if k == "depthwise_conv2d":
            return ops.depthwise_conv2d(x, w["kernel"], w.get("bias"), s.stride, s.padding), None
        if k == "separable_conv2d":
            return ops.separable_conv2d(x, w["depthwise_kernel"], w["pointwise_kernel"], w.get("bias"), s.stride, s.padding), None
        if k == "dense":
            return ops.dense(x, w["kernel"], w.get("bias")), None
        if k == "batchnorm":
            return self._batch_norm(x, w, ctx)
        if k == "max_pool2d":
            return ops.max_pool2d(x, s.pool, s.stride if s.stride > 1 else s.pool, s.padding), None
        if k == "avg_pool2d":
            return ops.avg_pool2d(x, s.pool, s.stride if s.stride > 1 else s.pool, s.padding), None
        if k == "global_avg_pool2d":
            return ops.global_avg_pool2d(x), None
        if k == "flatten":
            return ops.flatten(x), None
        return x, None  # activation layer

    def _batch_norm(self, x: Tensor, w: dict[str, Tensor], ctx: ForwardContext) -> tuple[Tensor, Tensor]:
        mean_buf, var_buf = self.buffers["moving_mean"], self.buffers["moving_var"]
        if ctx.training if ctx.batch_stats is None else ctx.batch_stats:
            if not ctx.update_stats:
                mean_buf, var_buf = mean_buf.copy(), var_buf.copy()
            out = ops.batch_norm(x, w["gamma"], w["beta"], mean_buf, var_buf, True, BN_EPS, BN_MOMENTUM)
            axes = tuple(range(x.ndim - 1))
            var = np.var(x.data, axis=axes)
        else:
            out = ops.batch_norm(x, w["gamma"], w["beta"], mean_buf, var_buf, False)
            var = self.buffers["moving_var"]
        inv = (1.0 / np.sqrt(var.astype(np.float64) + BN_EPS)).astype(x.dtype)
        return out, w["gamma"] * ops.const(inv, w["gamma"])

    def activate(self, pre: Tensor, ctx: ForwardContext) -> Tensor:
        act = self.activation
        if act == "relu":
            out = ops.relu(pre)
        elif act == "sigmoid":
            out = ops.sigmoid(pre)
        elif act == "softmax":
            out = ops.softmax(pre)
        elif act == "quantized_relu":
            return ste_quantize(self.qrelu_spec, pre, ctx.rng, ctx.training)
        else:
            out = pre
        aq = self.spec.activation_quantizer
        if aq is not None and aq.kind != "fp32":
            out = ste_quantize(aq, out, ctx.rng, ctx.training)
        return out

    @property
    def qrelu_spec(self) -> QuantizerSpec:
        aq = self.spec.activation_quantizer
        return aq if aq is not None and aq.kind == "quantized_relu" else DEFAULT_QRELU

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        w = self.read_weights(ctx)
        pre, bn_scale = self.linear(x, w, ctx)
        out = self.activate(pre, ctx)
        if ctx.record:
            ctx.records.append(LayerRecord(z_in=x, pre=pre, out=out, weights=w, bn_scale=bn_scale))
        return out

    # -- Jacobian norm --------------------------------------------------------
    def act_grad_sq(self, pre: Tensor, out: Tensor) -> Optional[Tensor]:
        """Squared activation derivative per output element (None = all ones).

        ``pre``/``out`` are single-sample slices of the recorded tensors.
        """
        act = self.activation
        if act == "linear":
            d = None
        elif act == "relu":
            d = ops.const((pre.data > 0).astype(pre.dtype), pre)
        elif act == "sigmoid":
            sg = ops.sigmoid(pre)
            deriv = sg * (1.0 - sg)
            d = deriv * deriv
        elif act == "quantized_relu":
            return ops.const(ste_mask(self.qrelu_spec, pre.data).astype(pre.dtype), pre)
        else:
            raise ValueError(f"layer {self.name}: no closed-form Jacobian for activation {act!r}")
        aq = self.spec.activation_quantizer
        if aq is not None and aq.kind != "fp32":
            # STE mask is evaluated on the activation output, i.e. before quantization
            act_out = pre if act == "linear" else (ops.relu(pre) if act == "relu" else ops.sigmoid(pre))
            mask = ops.const(ste_mask(aq, act_out.data).astype(pre.dtype), pre)
            d = mask if d is None else d * mask
        return d

    def taps(self) -> np.ndarray:
        if self._taps is None:
            s = self.spec
            size = s.pool if self.kind in ("max_pool2d", "avg_pool2d") else s.kernel
            stride = (s.stride if s.stride > 1 else s.pool) if self.kind in ("max_pool2d", "avg_pool2d") else s.stride
            self._taps = _in_bounds_taps(self.in_shape[0], self.in_shape[1], size, stride, s.padding)
        return self._taps

    def frob_sq(self, rec: LayerRecord, sample: int) -> Tensor:
        """||d out / d z_in||_F^2 for one sample of a recorded pass.

        Differentiable in the layer's weights (and, for sigmoid, in the
        pre-activation, hence in earlier layers' weights too).
        """
        pre = ops.take_rows(rec.pre, [sample])
        out = ops.take_rows(rec.out, [sample])
        d = self.act_grad_sq(pre, out)
        k = self.kind
        w = rec.weights
        if k in ("conv2d", "depthwise_conv2d", "separable_conv2d"):
            taps = self.taps()
            n_taps = taps.shape[1]
            rows = out.shape[1] * out.shape[2]
            ch = out.shape[3]
            if d is None:
                spread = ops.const(np.broadcast_to(taps.sum(axis=0)[:, None], (n_taps, ch)).copy(), pre)
            else:
                spread = ops.const(taps.T.copy(), pre) @ ops.reshape(d, (rows, ch))
            if k == "conv2d":
                weight_sq = ops.sum(ops.square(w["kernel"]), axis=2)
                return ops.sum(spread * ops.reshape(weight_sq, (n_taps, ch)))
            if k == "depthwise_conv2d":
                return ops.sum(spread * ops.reshape(ops.square(w["kernel"]), (n_taps, ch)))
            dk = ops.reshape(ops.square(w["depthwise_kernel"]), (n_taps, -1))
            pk = ops.reshape(ops.square(w["pointwise_kernel"]), (dk.shape[1], ch))
            return ops.sum(spread * (dk @ pk))
        if k == "dense":
            col_sq = ops.sum(ops.square(w["kernel"]), axis=0)
            return ops.sum(col_sq) if d is None else ops.sum(ops.reshape(d, col_sq.shape) * col_sq)
        if k == "batchnorm":
            scale_sq = ops.square(rec.bn_scale)
            if d is None:
                return ops.sum(scale_sq) * float(np.prod(self.out_shape[:-1]))
            return ops.sum(d * scale_sq)
        rows = ops.const(self.row_norms_sq(rec.z_in.data[sample]), pre)
        return ops.sum(rows) if d is None else ops.sum(ops.reshape(d, rows.shape) * rows)

    def row_norms_sq(self, z_in: np.ndarray) -> np.ndarray:
        """Squared row norms of the (weightless) linear part for one sample."""
        k = self.kind
        if k in ("activation", "flatten"):
            return np.ones(self.out_shape)
        if k == "global_avg_pool2d":
            h, w = self.in_shape[0], self.in_shape[1]
            return np.full(self.out_shape, 1.0 / (h * w))
        taps = self.taps()
        ho, wo, c = self.out_shape
        if k == "avg_pool2d":
            per_row = taps.sum(axis=1) / float(self.spec.pool**4)
            return np.broadcast_to(per_row.reshape(ho, wo, 1), (ho, wo, c)).copy()
        # max pool: the winning tap carries gradient 1 unless it is padding
        s = self.spec
        stride = s.stride if s.stride > 1 else s.pool
        _, ph0, ph1 = conv_output_size(self.in_shape[0], s.pool, stride, s.padding)
        _, pw0, pw1 = conv_output_size(self.in_shape[1], s.pool, stride, s.padding)
        padded = np.pad(z_in[None], ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
        cols = ops.Im2Col.apply(Tensor(padded, dtype=z_in.dtype), kh=s.pool, kw=s.pool, stride=stride).data
        win = cols.reshape(ho * wo, s.pool * s.pool, c).argmax(axis=1)
        hit = np.take_along_axis(np.broadcast_to(taps[:, :, None], (ho * wo, s.pool * s.pool, c)), win[:, None, :], axis=1)
        return hit.reshape(ho, wo, c)
