"""Quantization-aware training: quantize-on-read forward, straight-through
backward, optional stochastic gradient quantization, Adamax on the
full-precision shadow weights, cosine-annealed learning rate, and a
cross-entropy loss with an optional Jacobian penalty."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import ops
from .autodiff.tensor import NonFiniteError, Tensor, backward
from .data import Dataset
from .jacobian import jr_full_loss, mean_jr, per_layer_terms
from .model import ForwardContext, Model
from .quantize import SqSchedule, quantize_gradient, sq_ratio

JR_MODES = ("off", "full", "per_layer")
# shadow weights of these quantizers are kept inside the STE pass range
CLIPPED_KINDS = ("binary", "stochastic_binary", "ternary", "stochastic_ternary")


class TrainConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr_min: float = 1e-6
    lr_max: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    lambda_jr: float = 0.0
    jr_mode: str = "off"
    # samples per batch that enter the double-backward penalty in "full" mode
    jr_samples: int = 8
    grad_quant_bits: Optional[int] = None
    sq_schedule: Optional[SqSchedule] = None
    clip_shadow: bool = True
    # samples used for the per-epoch mean ||J||_F^2 log column (0 disables it)
    jr_probe_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.lr_min <= self.lr_max:
            raise TrainConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.lambda_jr < 0:
            raise TrainConfigError(f"lambda_jr must be >= 0, got {self.lambda_jr}")
        if self.jr_mode not in JR_MODES:
            raise TrainConfigError(f"jr_mode must be one of {JR_MODES}, got {self.jr_mode!r}")
        if self.grad_quant_bits is not None and not 2 <= self.grad_quant_bits <= 16:
            raise TrainConfigError(f"grad_quant_bits must lie in [2, 16], got {self.grad_quant_bits}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise TrainConfigError("adamax needs 0 <= beta1, beta2 < 1 and eps > 0")
        if self.jr_samples < 1:
            raise TrainConfigError("jr_samples must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sq_schedule"] = asdict(self.sq_schedule) if self.sq_schedule else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise TrainConfigError(f"unknown train fields {sorted(extra)}")
        if d.get("sq_schedule") is not None:
            try:
                d["sq_schedule"] = SqSchedule(**d["sq_schedule"])
            except (TypeError, ValueError) as err:
                raise TrainConfigError(f"sq_schedule: {err}") from None
        try:
            return cls(**d)
        except TypeError as err:
            raise TrainConfigError(str(err)) from None


def cosine_lr(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch <= max(config.epochs, 0):
        raise TrainConfigError(f"epoch {epoch} outside [0, {config.epochs}]")
    if config.epochs == 0:
        return config.lr_max
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + math.cos(math.pi * epoch / config.epochs))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamaxState:
    m: list[np.ndarray]
    u: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    @classmethod
    def zeros_like(cls, params: list[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-7) -> "AdamaxState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, beta1, beta2, eps)


def adamax_step(state: AdamaxState, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> AdamaxState:
    """One Adamax update applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    state.t += 1
    step = lr / (1.0 - state.beta1**state.t)
    for p, g, m, u in zip(params, grads, state.m, state.u):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p -= (step * m / (u + state.eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass
class LossTerms:
    total: Tensor
    ce: Tensor
    jr: Optional[Tensor]
    logits: Tensor


def loss_terms(
    model: Model,
    x,
    y,
    lambda_jr: float = 0.0,
    jr_mode: str = "off",
    ctx: Optional[ForwardContext] = None,
    rng: Optional[np.random.Generator] = None,
    jr_samples: int = 8,
) -> LossTerms:
    if lambda_jr < 0:
        raise TrainConfigError(f"lambda_jr must be >= 0, got {lambda_jr}")
    if jr_mode not in JR_MODES:
        raise TrainConfigError(f"jr_mode must be one of {JR_MODES}, got {jr_mode!r}")
    use_jr = lambda_jr > 0 and jr_mode != "off"
    ctx = ctx or ForwardContext(training=False)
    rng = rng or np.random.default_rng(0)
    x = np.asarray(x, dtype=model.dtype)
    ctx.record = use_jr and jr_mode == "per_layer"
    ctx.records = []
    logits = model.forward(Tensor(x, dtype=model.dtype), ctx)
    ce = ops.cross_entropy(logits, np.asarray(y, dtype=model.dtype))
    if not use_jr:
        return LossTerms(ce, ce, None, logits)
    if jr_mode == "per_layer":
        terms = per_layer_terms(model, ctx, rng)
        jr = terms[0]
        for t in terms[1:]:
            jr = jr + t
    else:
        pick = rng.choice(len(x), size=min(jr_samples, len(x)), replace=False)
        jr = jr_full_loss(model, x[np.sort(pick)], ctx)
    return LossTerms(ce + jr * lambda_jr, ce, jr, logits)


def joint_loss(model: Model, x, y, lambda_jr: float = 0.0, jr_mode: str = "off", **kwargs) -> Tensor:
    """Cross-entropy plus ``lambda_jr`` times the Jacobian penalty."""
    return loss_terms(model, x, y, lambda_jr, jr_mode, **kwargs).total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    jr: Optional[float]
    lr: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0

    CSV_FIELDS = ("epoch", "loss", "acc", "jr", "lr")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for r in self.records:
            w.writerow([r.epoch, repr(r.loss), repr(r.accuracy), "" if r.jr is None else repr(r.jr), repr(r.lr)])
        return buf.getvalue()

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "epochs": len(self.records),
            "final_loss": last.loss if last else None,
            "final_accuracy": last.accuracy if last else None,
            "final_jr": last.jr if last else None,
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def batch_order(config: TrainConfig, n: int, epoch: int) -> np.ndarray:
    """Sample order of one epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([config.seed, 0, epoch]).permutation(n)


def _clip_shadow(model: Model) -> None:
    for layer in model.layers:
        if layer.spec.weight_quantizer.kind in CLIPPED_KINDS:
            for name in layer.quantized_params:
                np.clip(layer.params[name].data, -1.0, 1.0, out=layer.params[name].data)


BatchHook = Callable[[int, int, np.ndarray, float], None]


def train(
    model: Model,
    dataset: Dataset,
    config: TrainConfig,
    probe: Optional[np.ndarray] = None,
    validation: Optional[Dataset] = None,
    on_batch: Optional[BatchHook] = None,
) -> TrainLog:
    """Train ``model`` in place and return the per-epoch log.

    Accuracy is measured on ``validation`` when given, otherwise on the
    training set; the JR column is the mean ||J||_F^2 over ``probe`` (default:
    the first ``jr_probe_size`` training samples). ``on_batch`` is called as
    ``(epoch, batch, indices, loss)`` before each update.
    """
    x_all = np.asarray(dataset.inputs, dtype=model.dtype)
    y_all = np.asarray(dataset.labels, dtype=model.dtype)
    if x_all.shape[1:] != model.spec.input_shape:
        raise TrainConfigError(f"dataset inputs {x_all.shape[1:]} do not match model input {model.spec.input_shape}")
    if y_all.shape[1] != model.num_classes:
        raise TrainConfigError(f"dataset has {y_all.shape[1]} classes, model emits {model.num_classes}")
    if probe is None and config.jr_probe_size > 0:
        probe = x_all[: config.jr_probe_size]
    eval_set = validation if validation is not None else dataset

    params = model.parameters()
    state = AdamaxState.zeros_like([p.data for p in params], config.beta1, config.beta2, config.eps)
    quant_rng = np.random.default_rng([config.seed, 1])
    jr_rng = np.random.default_rng([config.seed, 2])
    grad_rng = np.random.default_rng([config.seed, 3])
    log = TrainLog()
    start = time.perf_counter()
    n = len(x_all)
    for epoch in range(config.epochs):
        lr = cosine_lr(config, epoch)
        ratio = sq_ratio(config.sq_schedule, epoch) if config.sq_schedule else None
        order = batch_order(config, n, epoch)
        total, seen = 0.0, 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            ctx = ForwardContext(training=True, rng=quant_rng, sq_ratio=ratio)
            try:
                terms = loss_terms(model, x_all[idx], y_all[idx], config.lambda_jr, config.jr_mode, ctx, jr_rng, config.jr_samples)
                loss = terms.total.item()
                if not math.isfinite(loss):
                    raise NonFiniteError(f"loss = {loss}")
                grads = backward(terms.total, params)
            except NonFiniteError as err:
                raise TrainingDiverged(epoch, b, str(err)) from None
            if on_batch is not None:
                on_batch(epoch, b, idx, loss)
            g = [grads[p].data for p in params]
            if config.grad_quant_bits is not None:
                g = [quantize_gradient(gi, config.grad_quant_bits, grad_rng) for gi in g]
            adamax_step(state, [p.data for p in params], g, lr)
            if config.clip_shadow:
                _clip_shadow(model)
            total += loss * len(idx)
            seen += len(idx)
        acc = model.accuracy(eval_set.inputs, eval_set.labels)
        jr = mean_jr(model, probe) if probe is not None and len(probe) else None
        log.records.append(EpochRecord(epoch, total / max(seen, 1), acc, jr, lr))
    log.wall_time = time.perf_counter() - start
    return log
