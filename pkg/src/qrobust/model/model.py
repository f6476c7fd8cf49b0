"""Instantiated models: full-precision shadow weights, batchnorm statistics,
and quantize-on-read forward passes."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from ..autodiff import ops
from ..autodiff.checkpoint import load_checkpoint, save_checkpoint
from ..autodiff.tensor import ShapeError, Tensor, no_grad
from .layers import ForwardContext, Layer
from .spec import ModelSpec, SpecError


class Model:
    def __init__(self, spec: ModelSpec, layers: list[Layer]):
        self.spec = spec
        self.layers = layers
        self._residual_in: dict[int, list[int]] = defaultdict(list)
        for src, dst in spec.residual:
            self._residual_in[dst].append(src)

    # -- parameters -----------------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for layer in self.layers:
            for name, p in layer.params.items():
                yield f"{layer.name}/{name}", p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for layer in self.layers:
            for name, b in layer.buffers.items():
                yield f"{layer.name}/{name}", b

    @property
    def trainable_params(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def non_trainable_params(self) -> int:
        return sum(b.size for _, b in self.named_buffers())

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    @property
    def num_classes(self) -> int:
        return int(np.prod(self.spec.output_shape))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(expected) | set(buffers)) - set(state)
        unknown = set(state) - set(expected) - set(buffers)
        if missing or unknown:
            raise SpecError(f"checkpoint does not match model: missing {sorted(missing)}, unexpected {sorted(unknown)}")
        for name, arr in state.items():
            target = expected[name].data if name in expected else buffers[name]
            if target.shape != arr.shape:
                raise SpecError(f"checkpoint block {name}: shape {arr.shape} != model {target.shape}")
            target[...] = arr

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path) -> "Model":
        self.load_state_dict(load_checkpoint(path))
        return self

    def copy(self, dtype=None) -> "Model":
        """Independent model with the same spec and state (optionally cast)."""
        dtype = np.dtype(dtype) if dtype is not None else self.dtype
        twin = build(self.spec, dtype=dtype)
        twin.load_state_dict({k: v.astype(dtype) for k, v in self.state_dict().items()})
        return twin

    # -- evaluation -----------------------------------------------------------
    def _check_input(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"model {self.spec.name}: expected input (N, {', '.join(map(str, self.spec.input_shape))}), got {x.shape}")

    def forward(self, x: Tensor, ctx: Optional[ForwardContext] = None) -> Tensor:
        """Logits (pre-softmax outputs) of a batch."""
        ctx = ctx or ForwardContext()
        self._check_input(x)
        outputs: list[Tensor] = []
        h = x
        for i, layer in enumerate(self.layers):
            h = layer.forward(h, ctx)
            for src in self._residual_in.get(i, ()):
                h = h + (x if src == -1 else outputs[src])
            outputs.append(h)
        ctx.outputs = outputs
        return h

    __call__ = forward

    def logits(self, x, batch_size: int = 512) -> np.ndarray:
        """Inference-mode logits as an array; no graph is recorded."""
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.spec.input_shape:
            raise ShapeError(f"model {self.spec.name}: expected input (N, {', '.join(map(str, self.spec.input_shape))}), got {x.shape}")
        chunks = []
        with no_grad():
            for start in range(0, max(len(x), 1), batch_size):
                part = x[start : start + batch_size]
                if len(part) == 0:
                    break
                chunks.append(self.forward(Tensor(part, dtype=self.dtype)).data)
        if not chunks:
            return np.zeros((0, self.num_classes), dtype=self.dtype)
        return np.concatenate(chunks)

    def predict(self, x, batch_size: int = 512) -> np.ndarray:
        """Class probabilities, softmax of the logits row by row."""
        z = self.logits(x, batch_size)
        with no_grad():
            return ops.softmax(Tensor(z, dtype=z.dtype), axis=-1).data

    def accuracy(self, x, onehot) -> float:
        """Top-1 accuracy in percent."""
        if len(x) == 0:
            return 0.0
        return 100.0 * float(np.mean(np.argmax(self.logits(x), axis=1) == np.argmax(onehot, axis=1)))

    def read_weights(self) -> dict[str, np.ndarray]:
        """Inference-time (deterministically quantized) weights of every layer."""
        ctx = ForwardContext(training=False)
        out = {}
        with no_grad():
            for layer in self.layers:
                for name, t in layer.read_weights(ctx).items():
                    out[f"{layer.name}/{name}"] = t.data.copy()
        return out


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Validate ``spec`` and initialize a model (He-uniform kernels, zero
    biases, unit batchnorm scale)."""
    shapes = spec.shapes()
    rng = np.random.default_rng(seed)
    layers = []
    in_shape = spec.input_shape
    for i, (ls, out_shape) in enumerate(zip(spec.layers, shapes)):
        layer = Layer(ls, in_shape, out_shape, final=i == len(spec.layers) - 1)
        if ls.activation == "quantized_relu" and ls.activation_quantizer is not None and ls.activation_quantizer.kind != "quantized_relu":
            raise SpecError(f"layer {ls.name}: quantized_relu activation needs a quantized_relu activation_quantizer")
        layer.init(rng, dtype)
        layers.append(layer)
        in_shape = out_shape
    model = Model(spec, layers)
    declared = (spec.trainable_params, spec.non_trainable_params)
    if (model.trainable_params, model.non_trainable_params) != declared:
        raise SpecError(f"built parameter counts {model.trainable_params}/{model.non_trainable_params} != declared {declared}")
    return model


def load_model(spec_path, checkpoint: Optional[str | Path] = None, dtype=np.float32) -> Model:
    model = build(ModelSpec.load(spec_path), dtype=dtype)
    if checkpoint is not None:
        model.load(checkpoint)
    return model
