"""Declarative model description and its JSON file format.

A model file is a UTF-8 JSON object::

    {
      "name": "toy",
      "input_shape": [8, 8, 1],
      "layers": [
        {"kind": "conv2d", "filters": 4, "kernel": 3, "stride": 1,
         "padding": "same", "activation": "relu",
         "weight_quantizer": {"kind": "stochastic_ternary"},
         "activation_quantizer": {"kind": "uniform", "bits": 8, "integer_bits": 2}},
        {"kind": "flatten"},
        {"kind": "dense", "units": 2, "activation": "softmax"}
      ],
      "residual": [[0, 2]]
    }

Layer kinds: conv2d, depthwise_conv2d, separable_conv2d, dense, batchnorm,
activation, max_pool2d, avg_pool2d, global_avg_pool2d, flatten.
Activations: linear, relu, sigmoid, quantized_relu, and softmax on the final
layer only (the network's logits are taken before it). A residual pair
``[i, j]`` adds the output of layer ``i`` (``-1`` = model input) to the
output of layer ``j``. Quantizers accept the object form above or a scheme
name such as ``"stq"`` or ``"8-bit"``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..autodiff.ops import conv_output_size
from ..autodiff.tensor import ShapeError
from ..quantize import QuantizerSpec

LAYER_KINDS = (
    "conv2d",
    "depthwise_conv2d",
    "separable_conv2d",
    "dense",
    "batchnorm",
    "activation",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool2d",
    "flatten",
)
WEIGHTED_KINDS = ("conv2d", "depthwise_conv2d", "separable_conv2d", "dense")
ACTIVATIONS = ("linear", "relu", "sigmoid", "softmax", "quantized_relu")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    filters: Optional[int] = None
    units: Optional[int] = None
    kernel: int = 3
    stride: int = 1
    padding: str = "valid"
    pool: int = 2
    depth_multiplier: int = 1
    use_bias: bool = True
    activation: str = "linear"
    kernel_init: str = "he_uniform"
    weight_quantizer: QuantizerSpec = field(default_factory=QuantizerSpec)
    activation_quantizer: Optional[QuantizerSpec] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"layer {self.name or self.kind}: unknown activation {self.activation!r}")
        if self.padding not in ("same", "valid"):
            raise SpecError(f"layer {self.name or self.kind}: padding must be 'same' or 'valid'")
        if self.kernel_init not in ("he_uniform", "zeros"):
            raise SpecError(f"layer {self.name or self.kind}: kernel_init must be he_uniform or zeros")
        if self.kind in ("conv2d", "separable_conv2d") and not self.filters:
            raise SpecError(f"layer {self.name or self.kind}: {self.kind} needs 'filters'")
        if self.kind == "dense" and not self.units:
            raise SpecError(f"layer {self.name or self.kind}: dense needs 'units'")
        if min(self.kernel, self.stride, self.pool, self.depth_multiplier) < 1:
            raise SpecError(f"layer {self.name or self.kind}: kernel/stride/pool/depth_multiplier must be >= 1")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind, "name": self.name}
        default = LayerSpec(kind="flatten")
        for f in fields(self):
            if f.name in ("kind", "name", "weight_quantizer", "activation_quantizer"):
                continue
            v = getattr(self, f.name)
            if v != getattr(default, f.name):
                d[f.name] = v
        if self.weight_quantizer.kind != "fp32":
            d["weight_quantizer"] = self.weight_quantizer.to_dict()
        if self.activation_quantizer is not None:
            d["activation_quantizer"] = self.activation_quantizer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, index: int = 0) -> "LayerSpec":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise SpecError(f"layer {index}: unknown fields {sorted(extra)}")
        if "kind" not in d:
            raise SpecError(f"layer {index}: missing 'kind'")
        d.setdefault("name", f"{d['kind']}_{index}")
        try:
            d["weight_quantizer"] = QuantizerSpec.from_dict(d.get("weight_quantizer"))
            if d.get("activation_quantizer") is not None:
                d["activation_quantizer"] = QuantizerSpec.from_dict(d["activation_quantizer"])
        except ValueError as err:
            raise SpecError(f"layer {index} ({d['name']}): {err}") from None
        return cls(**d)


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    residual: tuple[tuple[int, int], ...] = ()
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "residual", tuple((int(a), int(b)) for a, b in self.residual))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise SpecError("layer names must be unique")
        for i, layer in enumerate(self.layers):
            if layer.activation == "softmax" and i != len(self.layers) - 1:
                raise SpecError(f"layer {layer.name}: softmax is only allowed on the final layer")

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "residual": [list(p) for p in self.residual],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        extra = set(d) - {"name", "input_shape", "layers", "residual"}
        if extra:
            raise SpecError(f"unknown model fields {sorted(extra)}")
        if "input_shape" not in d or "layers" not in d:
            raise SpecError("model spec needs 'input_shape' and 'layers'")
        layers = tuple(LayerSpec.from_dict(ld, i) for i, ld in enumerate(d["layers"]))
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=layers,
            residual=tuple(tuple(p) for p in d.get("residual", ())),
            name=d.get("name", "model"),
        )

    @classmethod
    def load(cls, path) -> "ModelSpec":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise SpecError(f"{path}: invalid JSON ({err})") from None
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    # -- derived -------------------------------------------------------
    def with_weight_quantizer(self, q: QuantizerSpec) -> "ModelSpec":
        """Same graph with every weighted layer switched to quantizer ``q``."""
        layers = tuple(replace(layer, weight_quantizer=q) if layer.kind in WEIGHTED_KINDS else layer for layer in self.layers)
        return replace(self, layers=layers)

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer (batch axis excluded); validates the
        graph, including residual compatibility."""
        shapes: list[tuple[int, ...]] = []
        cur = self.input_shape
        for layer in self.layers:
            cur = layer_output_shape(layer, cur)
            shapes.append(cur)
        n = len(self.layers)
        for a, b in self.residual:
            if not (-1 <= a < b < n):
                raise SpecError(f"residual link ({a}, {b}) must satisfy -1 <= from < to < {n}")
            src = self.input_shape if a == -1 else shapes[a]
            if src != shapes[b]:
                raise SpecError(
                    f"residual link ({a}, {b}): shape {src} of "
                    f"{'input' if a == -1 else self.layers[a].name} does not match {shapes[b]} of {self.layers[b].name}"
                )
        return shapes

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1] if self.layers else self.input_shape

    def param_counts(self) -> list[tuple[int, int]]:
        """(trainable, non-trainable) per layer."""
        out = []
        cur = self.input_shape
        for layer in self.layers:
            out.append(layer_param_count(layer, cur))
            cur = layer_output_shape(layer, cur)
        return out

    @property
    def trainable_params(self) -> int:
        return sum(t for t, _ in self.param_counts())

    @property
    def non_trainable_params(self) -> int:
        return sum(n for _, n in self.param_counts())


def _spatial(layer: LayerSpec, shape: tuple[int, ...], kernel: int, stride: int, padding: str) -> tuple[int, int]:
    if len(shape) != 3:
        raise SpecError(f"layer {layer.name}: {layer.kind} needs an (H, W, C) input, got {shape}")
    try:
        ho, _, _ = conv_output_size(shape[0], kernel, stride, padding)
        wo, _, _ = conv_output_size(shape[1], kernel, stride, padding)
    except ShapeError as err:
        raise SpecError(f"layer {layer.name}: {err}") from None
    return ho, wo


def layer_output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    k = layer.kind
    if k == "conv2d":
        ho, wo = _spatial(layer, shape, layer.kernel, layer.stride, layer.padding)
        return (ho, wo, layer.filters)
    if k == "depthwise_conv2d":
        ho, wo = _spatial(layer, shape, layer.kernel, layer.stride, layer.padding)
        return (ho, wo, shape[2] * layer.depth_multiplier)
    if k == "separable_conv2d":
        ho, wo = _spatial(layer, shape, layer.kernel, layer.stride, layer.padding)
        return (ho, wo, layer.filters)
    if k in ("max_pool2d", "avg_pool2d"):
        ho, wo = _spatial(layer, shape, layer.pool, layer.stride if layer.stride > 1 else layer.pool, layer.padding)
        return (ho, wo, shape[2])
    if k == "global_avg_pool2d":
        if len(shape) != 3:
            raise SpecError(f"layer {layer.name}: global_avg_pool2d needs (H, W, C), got {shape}")
        return (shape[2],)
    if k == "dense":
        if len(shape) != 1:
            raise SpecError(f"layer {layer.name}: dense needs a flat input, got {shape}; add a flatten layer")
        return (layer.units,)
    if k == "flatten":
        return (int(np.prod(shape)),)
    return shape  # batchnorm, activation


def layer_param_count(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, int]:
    k = layer.kind
    kk = layer.kernel * layer.kernel
    if k == "conv2d":
        return kk * shape[2] * layer.filters + (layer.filters if layer.use_bias else 0), 0
    if k == "depthwise_conv2d":
        c = shape[2] * layer.depth_multiplier
        return kk * c + (c if layer.use_bias else 0), 0
    if k == "separable_conv2d":
        c = shape[2] * layer.depth_multiplier
        return kk * c + c * layer.filters + (layer.filters if layer.use_bias else 0), 0
    if k == "dense":
        return shape[0] * layer.units + (layer.units if layer.use_bias else 0), 0
    if k == "batchnorm":
        c = shape[-1]
        return 2 * c, 2 * c
    return 0, 0
