"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import KinkRecorder, Tensor, backward


def _eval(fn: Callable[[], Tensor]) -> tuple[float, tuple[bytes, ...]]:
    # grad mode stays on: fn may itself take gradients (double backward)
    with KinkRecorder() as rec:
        value = fn().item()
    return value, rec.signature()


def numerical_grad(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    h: float = 1e-3,
    coords: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor``.

    ``tensor.data`` is perturbed in place and restored. Returns the estimate
    and a boolean mask of coordinates whose +h or -h evaluation took a
    different branch (relu side, max index, clip) than the base point.
    """
    flat = tensor.data.reshape(-1)
    est = np.zeros(flat.shape, dtype=np.float64)
    kinked = np.zeros(flat.shape, dtype=bool)
    _, base_sig = _eval(fn)
    idx = np.arange(flat.size) if coords is None else coords
    for j in idx:
        orig = flat[j]
        flat[j] = orig + h
        f_plus, sig_plus = _eval(fn)
        flat[j] = orig - h
        f_minus, sig_minus = _eval(fn)
        flat[j] = orig
        est[j] = (f_plus - f_minus) / (2.0 * h)
        kinked[j] = sig_plus != base_sig or sig_minus != base_sig
    return est.reshape(tensor.shape), kinked.reshape(tensor.shape)


@dataclass
class BlockResult:
    name: str
    size: int
    checked: int
    excluded_kinks: int
    max_rel_error: float
    max_abs_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    blocks: list[BlockResult] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((b.max_rel_error for b in self.blocks), default=0.0)

    @property
    def passed(self) -> bool:
        return all(b.max_rel_error < self.tolerance for b in self.blocks)

    def as_dict(self) -> dict:
        return {
            "tolerance": self.tolerance,
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "blocks": [b.__dict__ for b in self.blocks],
        }


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float = 1e-3,
    h: float = 1e-3,
    names: Optional[Sequence[str]] = None,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    The relative error of a block is ``max|analytic - numeric|`` over the
    block divided by the larger of the two gradients' max magnitudes (floored
    at 1e-6). Coordinates whose finite-difference stencil crosses a kink are
    left out. Run it on float64 parameters; float32 rounding swamps h=1e-3
    differences.
    """
    loss = fn()
    grads = backward(loss, wrt=list(params))
    report = GradCheckReport(tolerance=tolerance)
    rng = rng or np.random.default_rng(0)
    for i, p in enumerate(params):
        name = names[i] if names else (p.name or f"param{i}")
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        num, kinked = numerical_grad(fn, p, h=h, coords=coords)
        ana = grads[p].data.astype(np.float64)
        keep = ~kinked
        if coords is not None:
            sel = np.zeros(p.size, dtype=bool)
            sel[coords] = True
            keep &= sel.reshape(p.shape)
        if keep.any():
            diff = np.abs(ana[keep] - num[keep])
            scale = max(np.abs(ana[keep]).max(), np.abs(num[keep]).max(), 1e-6)
            abs_err = float(diff.max())
            rel = abs_err / scale
        else:
            abs_err = rel = 0.0
        report.blocks.append(
            BlockResult(
                name=name,
                size=p.size,
                checked=int(keep.sum()),
                excluded_kinks=int(kinked.sum()),
                max_rel_error=float(rel),
                max_abs_error=abs_err,
            )
        )
    return report
