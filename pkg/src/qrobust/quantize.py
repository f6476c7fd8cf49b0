"""Quantizers with straight-through gradients, plus stochastic-portion
selection (quantize a growing fraction of elements, favouring the ones that
quantize with little error).

Scales are computed per call from the tensor being quantized:

* binary / stochastic binary: ``s = mean|x|``
* ternary / stochastic ternary: threshold ``0.7 * mean|x|``, ``s`` is the
  mean magnitude of the elements above it (1 if none are)
* uniform: fixed-point grid with ``bits - integer_bits - 1`` fraction bits
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, ops

KINDS = (
    "fp32",
    "uniform",
    "binary",
    "stochastic_binary",
    "ternary",
    "stochastic_ternary",
    "quantized_relu",
)
STOCHASTIC_KINDS = ("stochastic_binary", "stochastic_ternary")
TERNARY_THRESHOLD = 0.7
SQ_ETA = 1e-8
# |x| bound for the straight-through estimator of scale-based quantizers
STE_CLIP = 1.0


class QuantizerError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizerSpec:
    kind: str = "fp32"
    bits: int = 32
    integer_bits: int = 0
    symmetric: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise QuantizerError(f"unknown quantizer kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("uniform", "quantized_relu"):
            if not 1 <= self.bits <= 24:
                raise QuantizerError(f"{self.kind}: bits must be in [1, 24], got {self.bits}")
            if not 0 <= self.integer_bits < self.bits:
                raise QuantizerError(f"{self.kind}: need 0 <= integer_bits < bits, got {self.integer_bits}/{self.bits}")

    @property
    def stochastic(self) -> bool:
        return self.kind in STOCHASTIC_KINDS

    @property
    def bits_per_param(self) -> int:
        return {
            "fp32": 32,
            "binary": 1,
            "stochastic_binary": 1,
            "ternary": 2,
            "stochastic_ternary": 2,
        }.get(self.kind, self.bits)

    def deterministic(self) -> "QuantizerSpec":
        """Inference-time counterpart: stochastic kinds collapse to their
        thresholded versions."""
        if self.kind == "stochastic_ternary":
            return QuantizerSpec("ternary", seed=self.seed)
        if self.kind == "stochastic_binary":
            return QuantizerSpec("binary", seed=self.seed)
        return self

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("uniform", "quantized_relu"):
            d.update(bits=self.bits, integer_bits=self.integer_bits)
            if self.kind == "uniform":
                d["symmetric"] = self.symmetric
        if self.stochastic:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d) -> "QuantizerSpec":
        if d is None:
            return cls()
        if isinstance(d, str):
            return scheme(d)
        known = set(asdict(cls()))
        extra = set(d) - known
        if extra:
            raise QuantizerError(f"unknown quantizer fields {sorted(extra)}")
        return cls(**d)


# Quantizer menu of the footprint table, keyed by the names used in configs.
SCHEMES: dict[str, QuantizerSpec] = {
    "fp": QuantizerSpec("fp32"),
    "fp32": QuantizerSpec("fp32"),
    "8-bit": QuantizerSpec("uniform", bits=8),
    "4-bit": QuantizerSpec("uniform", bits=4),
    "ternary": QuantizerSpec("ternary"),
    "stq": QuantizerSpec("stochastic_ternary"),
    "2-bit": QuantizerSpec("uniform", bits=2),
    "binary": QuantizerSpec("binary"),
    "s-binary": QuantizerSpec("stochastic_binary"),
}


def scheme(name: str) -> QuantizerSpec:
    try:
        return SCHEMES[name.lower()]
    except KeyError:
        raise QuantizerError(f"unknown quantization scheme {name!r}; known: {sorted(SCHEMES)}") from None


@dataclass(frozen=True)
class SqSchedule:
    ratio_start: float = 0.5
    ratio_end: float = 1.0
    epochs_to_full: int = 10

    def __post_init__(self):
        for v in (self.ratio_start, self.ratio_end):
            if not 0.0 <= v <= 1.0:
                raise QuantizerError(f"SQ ratios must lie in [0, 1], got {v}")
        if self.ratio_end < self.ratio_start:
            raise QuantizerError("SQ ratio must be non-decreasing (ratio_end < ratio_start)")
        if self.epochs_to_full < 1:
            raise QuantizerError("epochs_to_full must be positive")


# ---------------------------------------------------------------------------
# scales and grids
# ---------------------------------------------------------------------------


def _as_float(x) -> tuple[np.ndarray, np.dtype]:
    x = np.asarray(x)
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.dtype(np.float32)
    return x.astype(dt, copy=False), dt


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise QuantizerError("quantizer input contains NaN or Inf")


def binary_scale(x: np.ndarray) -> float:
    s = float(np.mean(np.abs(x), dtype=np.float64)) if x.size else 0.0
    return s if s > 0 else 1.0


def ternary_threshold_scale(x: np.ndarray) -> tuple[float, float]:
    a = np.abs(x).astype(np.float64)
    delta = TERNARY_THRESHOLD * float(a.mean()) if a.size else 0.0
    above = a[a > delta]
    s = float(above.mean()) if above.size else 1.0
    return delta, s


def grid(spec: QuantizerSpec) -> tuple[float, float, float]:
    """(step, lowest level, highest level) of a fixed-point quantizer."""
    if spec.kind == "uniform":
        frac = spec.bits - spec.integer_bits - 1
        step = 2.0 ** -frac
        hi = 2.0 ** spec.integer_bits - step
        lo = -hi if spec.symmetric else -(2.0 ** spec.integer_bits)
        return step, lo, hi
    if spec.kind == "quantized_relu":
        frac = spec.bits - spec.integer_bits
        step = 2.0 ** -frac
        return step, 0.0, 2.0 ** spec.integer_bits - step
    raise QuantizerError(f"{spec.kind} has no fixed-point grid")


def levels(spec: QuantizerSpec, x: np.ndarray) -> np.ndarray:
    """Codomain of ``quantize(spec, x)`` (scale-based kinds depend on x)."""
    x, dt = _as_float(x)
    if spec.kind in ("binary", "stochastic_binary"):
        s = np.asarray(binary_scale(x), dtype=dt)
        return np.array([-s, s], dtype=dt)
    if spec.kind in ("ternary", "stochastic_ternary"):
        s = np.asarray(ternary_threshold_scale(x)[1], dtype=dt)
        return np.array([-s, 0, s], dtype=dt)
    if spec.kind in ("uniform", "quantized_relu"):
        step, lo, hi = grid(spec)
        n = int(round((hi - lo) / step)) + 1
        return (lo + step * np.arange(n)).astype(dt)
    raise QuantizerError("fp32 has no finite level set")


# ---------------------------------------------------------------------------
# forward quantization
# ---------------------------------------------------------------------------


def quantize(spec: QuantizerSpec, x, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Quantize an array. Stochastic kinds draw from ``rng`` (or a generator
    seeded from ``spec.seed`` when none is given)."""
    x, dt = _as_float(x)
    _check_finite(x)
    kind = spec.kind
    if kind == "fp32":
        return x.copy()
    if kind in STOCHASTIC_KINDS:
        return quantize_stochastic(spec, x, rng if rng is not None else np.random.default_rng(spec.seed))
    if kind == "binary":
        s = dt.type(binary_scale(x))
        return np.where(x >= 0, s, -s).astype(dt)
    if kind == "ternary":
        delta, s = ternary_threshold_scale(x)
        s = dt.type(s)
        out = np.where(np.abs(x) > delta, np.where(x > 0, s, -s), dt.type(0))
        return out.astype(dt)
    step, lo, hi = grid(spec)
    return np.clip(np.rint(x / step) * step, lo, hi).astype(dt)


def _stochastic_round(x: np.ndarray, step: float, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    xc = np.clip(x.astype(np.float64), lo, hi)
    k = np.floor((xc - lo) / step)
    low = lo + k * step
    p_up = (xc - low) / step
    up = rng.random(x.shape) < p_up
    return np.minimum(low + up * step, hi)


def quantize_stochastic(spec: QuantizerSpec, x, rng: np.random.Generator) -> np.ndarray:
    """Round each element to one of its two neighbouring levels a < x < b,
    choosing b with probability (x - a) / (b - a). Inputs outside the level
    range clip to the nearest end level."""
    x, dt = _as_float(x)
    _check_finite(x)
    kind = spec.kind
    if kind == "stochastic_binary":
        s = dt.type(binary_scale(x))
        p = np.clip((x.astype(np.float64) / float(s) + 1.0) / 2.0, 0.0, 1.0)
        return np.where(rng.random(x.shape) < p, s, -s).astype(dt)
    if kind == "stochastic_ternary":
        _, s = ternary_threshold_scale(x)
        mag = np.clip(np.abs(x.astype(np.float64)) / s, 0.0, 1.0)
        hit = rng.random(x.shape) < mag
        sd = dt.type(s)
        return np.where(hit, np.where(x > 0, sd, -sd), dt.type(0)).astype(dt)
    if kind in ("uniform", "quantized_relu"):
        step, lo, hi = grid(spec)
        return _stochastic_round(x, step, lo, hi, rng).astype(dt)
    raise QuantizerError(f"{kind} has no stochastic rounding mode")


def quantize_gradient(g: np.ndarray, bits: int, rng: np.random.Generator) -> np.ndarray:
    """Stochastic k-bit gradient quantization: scale to [0, 1] by the
    largest magnitude, stochastically round to 2**bits - 1 steps, scale back."""
    g = np.asarray(g)
    m = float(np.max(np.abs(g))) if g.size else 0.0
    if m == 0.0:
        return g.copy()
    scale = 2.0 * m
    n = g.astype(np.float64) / scale + 0.5
    q = _stochastic_round(n, 1.0 / (2 ** bits - 1), 0.0, 1.0, rng)
    return (scale * (q - 0.5)).astype(g.dtype)


# ---------------------------------------------------------------------------
# straight-through gradients
# ---------------------------------------------------------------------------


def ste_mask(spec: QuantizerSpec, x: np.ndarray) -> np.ndarray:
    """Where the straight-through estimator lets gradient through."""
    x = np.asarray(x)
    if spec.kind == "fp32":
        return np.ones(x.shape, dtype=bool)
    if spec.kind == "uniform":
        _, lo, hi = grid(spec)
        return (x >= lo) & (x <= hi)
    if spec.kind == "quantized_relu":
        _, _, hi = grid(spec)
        return (x > 0) & (x <= hi)
    return np.abs(x) <= STE_CLIP


def ste_backward(spec: QuantizerSpec, upstream_grad, x) -> np.ndarray:
    g = np.asarray(upstream_grad)
    return np.where(ste_mask(spec, x), g, 0).astype(g.dtype)


def ste_quantize(
    spec: QuantizerSpec,
    x: Tensor,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
    select: Optional[np.ndarray] = None,
) -> Tensor:
    """Graph-level quantizer: forward emits quantized values, backward is the
    straight-through estimator. ``select`` restricts quantization to a subset
    of elements (the rest stay full precision and pass gradient unchanged)."""
    if spec.kind == "fp32":
        return x
    qspec = spec if training else spec.deterministic()
    values = quantize(qspec, x.data, rng)
    pass_mask = ste_mask(spec, x.data)
    if select is not None:
        values = np.where(select, values, x.data)
        pass_mask = pass_mask | ~select
    return ops.straight_through(x, values, pass_mask)


# ---------------------------------------------------------------------------
# stochastic-portion selection
# ---------------------------------------------------------------------------


def quantization_error(spec: QuantizerSpec, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return np.abs(np.asarray(x) - quantize(spec, x, rng))


def sq_select(errors, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Pick round(ratio * N) elements without replacement, each draw favouring
    element j with weight 1 / (error_j + eta)."""
    errors = np.asarray(errors, dtype=np.float64)
    if not 0.0 <= ratio <= 1.0:
        raise QuantizerError(f"ratio must lie in [0, 1], got {ratio}")
    if np.any(errors < 0):
        raise QuantizerError("quantization errors must be non-negative")
    n = errors.size
    m = int(round(ratio * n))
    mask = np.zeros(n, dtype=bool)
    if m >= n:
        mask[:] = True
    elif m > 0:
        # Efraimidis-Spirakis keys: log(u) / w, largest m win
        u = rng.random(n)
        keys = np.log(np.maximum(u, np.finfo(np.float64).tiny)) * (errors.ravel() + SQ_ETA)
        mask[np.argpartition(-keys, m - 1)[:m]] = True
    return mask.reshape(errors.shape)


def sq_ratio(schedule: SqSchedule, epoch: int) -> float:
    if epoch < 0:
        raise QuantizerError("epoch must be >= 0")
    frac = min(epoch / schedule.epochs_to_full, 1.0)
    return schedule.ratio_start + (schedule.ratio_end - schedule.ratio_start) * frac


def bits_to_bytes(count: int, bits: int) -> float:
    return count * bits / 8.0


def packed_bytes(count: int, bits: int) -> int:
    return math.ceil(count * bits / 8)
