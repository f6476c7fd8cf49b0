"""Flash footprint of the weight payload under a quantization scheme.

Only weighted layers count; biases are stored at the weight bit-width and
batchnorm state is excluded. ``bytes`` is the exact bit count divided by 8,
so byte ratios between schemes equal their bit-width ratios on any model;
``packed_bytes`` rounds each layer up to whole bytes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Optional, Union

from ..quantize import QuantizerSpec, bits_to_bytes, packed_bytes, scheme
from .spec import WEIGHTED_KINDS, ModelSpec


@dataclass(frozen=True)
class FootprintRow:
    name: str
    kind: str
    params: int
    bits: int
    bytes: float
    packed_bytes: int


@dataclass(frozen=True)
class FootprintReport:
    scheme: str
    rows: tuple[FootprintRow, ...]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_bytes(self) -> float:
        return sum(r.bytes for r in self.rows)

    @property
    def total_packed_bytes(self) -> int:
        return sum(r.packed_bytes for r in self.rows)

    @property
    def total_kb(self) -> float:
        return self.total_bytes / 1024.0

    def as_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "layers": [asdict(r) for r in self.rows],
            "total_params": self.total_params,
            "total_bytes": self.total_bytes,
            "total_packed_bytes": self.total_packed_bytes,
            "total_kb": self.total_kb,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scheme", "layer", "kind", "params", "bits", "bytes", "packed_bytes"])
        for r in self.rows:
            w.writerow([self.scheme, r.name, r.kind, r.params, r.bits, repr(r.bytes), r.packed_bytes])
        return buf.getvalue()


def footprint(model_or_spec, scheme_name: Optional[Union[str, QuantizerSpec]] = None) -> FootprintReport:
    """Per-layer and total weight bytes. ``scheme_name`` overrides every
    layer's weight quantizer (e.g. ``"8-bit"``); otherwise the ModelSpec's own
    per-layer quantizers are used."""
    spec: ModelSpec = getattr(model_or_spec, "spec", model_or_spec)
    label = "as-specified"
    if scheme_name is not None:
        q = scheme_name if isinstance(scheme_name, QuantizerSpec) else scheme(scheme_name)
        label = scheme_name if isinstance(scheme_name, str) else q.kind
        spec = spec.with_weight_quantizer(q)
    rows = []
    for layer, (trainable, _) in zip(spec.layers, spec.param_counts()):
        if layer.kind not in WEIGHTED_KINDS:
            continue
        bits = layer.weight_quantizer.bits_per_param
        rows.append(FootprintRow(layer.name, layer.kind, trainable, bits, bits_to_bytes(trainable, bits), packed_bytes(trainable, bits)))
    return FootprintReport(label, tuple(rows))
