"""Input-output Jacobians of a model's logits, their squared Frobenius norms
(the JR penalty), per-layer variants, and distance-ratio diagnostics.

Jacobians are taken with respect to the pre-softmax logits. Full Jacobians use
batch replication: the input is copied once per output row and a single
backward pass with an identity seed recovers every row. This requires the
model in inference mode (no batch coupling through batchnorm).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, grad, no_grad
from .model import ForwardContext, Model

# points sampled on [x_i, x_p] when checking the mean-value bound
SEGMENT_POINTS = 16
BOUND_TOLERANCE = 1e-3


def _as_sample(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    if x.shape == model.spec.input_shape:
        return x
    if x.shape == (1,) + model.spec.input_shape:
        return x[0]
    raise ValueError(f"expected one sample of shape {model.spec.input_shape}, got {x.shape}")


def jacobian_full(model: Model, x) -> np.ndarray:
    """(K, D) matrix: row k is the gradient of logit k w.r.t. the flattened input."""
    return jacobian_batch(model, _as_sample(model, x)[None])[0]


def jacobian_batch(model: Model, xs) -> np.ndarray:
    """(N, K, D) Jacobians for a batch of samples."""
    xs = np.asarray(xs, dtype=model.dtype)
    n = len(xs)
    k = model.num_classes
    d = int(np.prod(model.spec.input_shape))
    rep = Tensor(np.repeat(xs, k, axis=0), requires_grad=True, dtype=model.dtype)
    z = model.forward(rep, ForwardContext(training=False))
    seed = np.tile(np.eye(k, dtype=model.dtype), (n, 1))
    (g,) = grad(z, rep, seed)
    if g is None:
        return np.zeros((n, k, d), dtype=model.dtype)
    return g.data.reshape(n, k, d)


def jr_term(model: Model, x) -> float:
    """||J(x)||_F^2 for one sample."""
    return float(np.sum(np.square(jacobian_full(model, x), dtype=np.float64)))


def mean_jr(model: Model, xs, chunk: int = 32) -> float:
    """Mean ||J(x)||_F^2 over a probe set."""
    xs = np.asarray(xs, dtype=model.dtype)
    if len(xs) == 0:
        return 0.0
    total = 0.0
    for start in range(0, len(xs), chunk):
        jac = jacobian_batch(model, xs[start : start + chunk])
        total += float(np.sum(np.square(jac, dtype=np.float64)))
    return total / len(xs)


def jr_full_loss(model: Model, xs, ctx: Optional[ForwardContext] = None) -> Tensor:
    """Differentiable mean ||J(x)||_F^2 over ``xs`` via double backward.

    ``ctx`` controls weight quantization; batchnorm is forced to running
    statistics so the replicated samples stay independent.
    """
    xs = np.asarray(xs, dtype=model.dtype)
    n = len(xs)
    k = model.num_classes
    base = ctx or ForwardContext()
    jr_ctx = ForwardContext(training=base.training, rng=base.rng, batch_stats=False, sq_ratio=base.sq_ratio)
    rep = Tensor(np.repeat(xs, k, axis=0), requires_grad=True, dtype=model.dtype)
    z = model.forward(rep, jr_ctx)
    seed = np.tile(np.eye(k, dtype=model.dtype), (n, 1))
    (g,) = grad(z, rep, seed, create_graph=True)
    if g is None:
        return Tensor(np.zeros((), dtype=model.dtype))
    return ops.sum(g * g) * (1.0 / n)


# ---------------------------------------------------------------------------
# per-layer terms
# ---------------------------------------------------------------------------


def jacobian_layer(model: Model, layer_index: int, z_prev) -> np.ndarray:
    """(out_dim, in_dim) Jacobian of layer ``layer_index`` (without any
    residual add) at one input ``z_prev``, in inference mode."""
    layer = model.layers[layer_index]
    z_prev = np.asarray(z_prev, dtype=model.dtype)
    if z_prev.shape == (1,) + layer.in_shape:
        z_prev = z_prev[0]
    if z_prev.shape != layer.in_shape:
        raise ValueError(f"layer {layer.name} expects input {layer.in_shape}, got {z_prev.shape}")
    out_dim = int(np.prod(layer.out_shape))
    in_dim = int(np.prod(layer.in_shape))
    rep = Tensor(np.repeat(z_prev[None], out_dim, axis=0), requires_grad=True, dtype=model.dtype)
    out = layer.forward(rep, ForwardContext(training=False))
    seed = np.eye(out_dim, dtype=model.dtype).reshape((out_dim,) + layer.out_shape)
    (g,) = grad(out, rep, seed)
    if g is None:
        return np.zeros((out_dim, in_dim), dtype=model.dtype)
    return g.data.reshape(out_dim, in_dim)


def layer_inputs(model: Model, x) -> list[np.ndarray]:
    """Input to every layer for a batch, in inference mode."""
    ctx = ForwardContext(training=False, record=True)
    with no_grad():
        model.forward(Tensor(np.asarray(x, dtype=model.dtype), dtype=model.dtype), ctx)
    return [r.z_in.data for r in ctx.records]


def per_layer_terms(model: Model, ctx: ForwardContext, rng: np.random.Generator) -> list[Tensor]:
    """||J_l||_F^2 for each layer of a recorded pass, each at its own random sample."""
    if len(ctx.records) != len(model.layers):
        raise ValueError("per-layer JR needs a forward pass run with record=True")
    n = ctx.records[0].z_in.shape[0]
    picks = rng.integers(0, n, size=len(model.layers))
    return [layer.frob_sq(rec, int(i)) for layer, rec, i in zip(model.layers, ctx.records, picks)]


def per_layer_jr(model: Model, batch, rng: np.random.Generator, ctx: Optional[ForwardContext] = None) -> Tensor:
    """Sum over layers of ||J_l(z_{l-1}(x_i))||_F^2, with an independent
    uniformly drawn sample index per layer."""
    batch = np.asarray(batch, dtype=model.dtype)
    if len(batch) == 0:
        raise ValueError("per-layer JR needs a nonempty batch")
    ctx = ctx or ForwardContext(training=False)
    ctx.record = True
    ctx.records = []
    model.forward(Tensor(batch, dtype=model.dtype), ctx)
    terms = per_layer_terms(model, ctx, rng)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def per_layer_jr_mean(model: Model, batch) -> float:
    """Batch mean of the per-layer sum, i.e. the expectation of
    :func:`per_layer_jr` over its index draws."""
    batch = np.asarray(batch, dtype=model.dtype)
    ctx = ForwardContext(training=False, record=True)
    with no_grad():
        model.forward(Tensor(batch, dtype=model.dtype), ctx)
        return float(
            sum(layer.frob_sq(rec, i).item() for layer, rec in zip(model.layers, ctx.records) for i in range(len(batch))) / len(batch)
        )


# ---------------------------------------------------------------------------
# distance ratios
# ---------------------------------------------------------------------------


@dataclass
class SensitivityReport:
    input_ratio: Optional[float]
    output_ratio: Optional[float]
    per_layer_ratios: list[Optional[float]]
    lhs: Optional[float]  # ||z(x_p) - z(x_i)||^2 / ||x_p - x_i||^2
    frob_bound: float  # max ||J||_F^2 over points on the segment [x_i, x_p]
    bound_holds: Optional[bool]
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)

    CSV_FIELDS = ("input_ratio", "output_ratio", "lhs", "frob_bound", "bound_holds", "flags")

    def csv_row(self) -> list:
        return [self.input_ratio, self.output_ratio, self.lhs, self.frob_bound, self.bound_holds, ";".join(self.flags)]


def _ratio(num: float, den: float, label: str, flags: list[str]) -> Optional[float]:
    if den == 0.0:
        flags.append(f"zero_denominator:{label}")
        return None
    return num / den


def sensitivity_probe(model: Model, x_i, x_c, x_p, points: int = SEGMENT_POINTS) -> SensitivityReport:
    """Distance ratios between a reference input ``x_i``, a nearby clean input
    ``x_c`` and a perturbed input ``x_p``, at the logits and after every
    layer, plus a check of ||dz||^2 / ||dx||^2 <= max ||J||_F^2 on the segment."""
    x_i, x_c, x_p = (_as_sample(model, v) for v in (x_i, x_c, x_p))
    flags: list[str] = []

    ctx = ForwardContext(training=False)
    with no_grad():
        model.forward(Tensor(np.stack([x_i, x_c, x_p]), dtype=model.dtype), ctx)
    outs = [o.data.astype(np.float64).reshape(3, -1) for o in ctx.outputs]

    def dist(a, b):
        return float(np.linalg.norm((np.asarray(a, np.float64) - np.asarray(b, np.float64)).ravel()))

    input_ratio = _ratio(dist(x_p, x_i), dist(x_c, x_i), "input", flags)
    z = outs[-1]
    output_ratio = _ratio(dist(z[2], z[0]), dist(z[1], z[0]), "output", flags)
    per_layer = [_ratio(dist(o[2], o[0]), dist(o[1], o[0]), f"layer{i}", flags) for i, o in enumerate(outs)]

    dx = dist(x_p, x_i)
    lhs = _ratio(dist(z[2], z[0]) ** 2, dx**2, "segment", flags)
    ts = np.linspace(0.0, 1.0, points)
    segment = np.stack([x_i + t * (x_p - x_i) for t in ts]).astype(model.dtype)
    jac = jacobian_batch(model, segment)
    frob_bound = float(np.max(np.sum(np.square(jac, dtype=np.float64), axis=(1, 2))))
    holds = None if lhs is None else bool(lhs <= frob_bound * (1.0 + BOUND_TOLERANCE))
    return SensitivityReport(input_ratio, output_ratio, per_layer, lhs, frob_bound, holds, flags)
