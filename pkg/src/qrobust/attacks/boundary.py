"""Decision-based boundary attack: start from any misclassified point and walk
along the decision boundary towards the original input, using only the
predicted label."""

from __future__ import annotations

from collections import deque
from typing import Optional

import numpy as np

from .oracles import PredictOracle
from .white_box import CLIP, AttackOutcome

MAX_START_DRAWS = 10_000
ADAPT_FACTOR = 1.1
ADAPT_WINDOW = 10


class NoAdversarialStart(RuntimeError):
    pass


def _is_adv(oracle: PredictOracle, x: np.ndarray, y: int) -> bool:
    return int(oracle.label(x[None])[0]) != y


def adversarial_start(oracle: PredictOracle, x: np.ndarray, y: int, rng: np.random.Generator, clip=CLIP, max_draws: int = MAX_START_DRAWS) -> tuple[np.ndarray, int]:
    """Uniform draws in the clip box until one is misclassified, then a
    bisection on the blend towards ``x``. Returns (start, draws used)."""
    lo, hi = clip
    found = None
    draws = 0
    batch = 100
    while draws < max_draws and found is None:
        n = min(batch, max_draws - draws)
        cand = rng.uniform(lo, hi, size=(n,) + x.shape)
        labels = oracle.label(cand)
        hit = np.flatnonzero(labels != y)
        draws += n
        if hit.size:
            found = cand[hit[0]]
    if found is None:
        raise NoAdversarialStart(f"no misclassified point in {max_draws} uniform draws")
    # smallest blend (1 - t) x + t found that is still adversarial
    low, high = 0.0, 1.0
    for _ in range(25):
        mid = (low + high) / 2.0
        if _is_adv(oracle, (1 - mid) * x + mid * found, y):
            high = mid
        else:
            low = mid
    return (1 - high) * x + high * found, draws


def boundary_attack(
    oracle: PredictOracle,
    x,
    y: int,
    iterations: int = 1000,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
    spherical_step: float = 1e-2,
    source_step: float = 1e-2,
    query_budget: Optional[int] = None,
    clip=CLIP,
    record: bool = False,
) -> AttackOutcome:
    """Each iteration proposes an orthogonal step on the sphere around ``x``
    followed by a step towards ``x``; the proposal is kept if still
    misclassified. Step sizes grow by 1.1 when more than half of a window of
    recent trials succeeded and shrink by 1.1 otherwise."""
    x = np.asarray(x, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(seed)
    lo, hi = clip
    out = AttackOutcome(x.copy())
    before = oracle.queries
    if _is_adv(oracle, x, y):
        out.queries = oracle.queries - before
        return out
    adv, _ = adversarial_start(oracle, x, y, rng, clip)
    best = adv.copy()
    best_dist = float(np.linalg.norm(adv - x))
    if record:
        out.trace.append(adv.copy())
    spherical_hits: deque = deque(maxlen=ADAPT_WINDOW)
    step_hits: deque = deque(maxlen=ADAPT_WINDOW)
    budget = query_budget if query_budget is not None else np.inf
    for _ in range(iterations):
        if oracle.queries - before + 2 > budget:
            break
        diff = x - adv
        src_norm = float(np.linalg.norm(diff))
        if src_norm == 0.0:
            break
        src_dir = diff / src_norm
        pert = rng.standard_normal(x.shape)
        pert -= np.sum(pert * src_dir) * src_dir
        pert *= spherical_step * src_norm / max(float(np.linalg.norm(pert)), 1e-12)
        shrink = 1.0 / np.sqrt(spherical_step**2 + 1.0)
        spherical = np.clip(x + shrink * (pert - diff), lo, hi)
        new_diff = x - spherical
        new_norm = float(np.linalg.norm(new_diff))
        length = max(source_step * src_norm + (new_norm - src_norm), 0.0)
        cand = np.clip(spherical + (length / max(new_norm, 1e-12)) * new_diff, lo, hi)

        sph_ok = _is_adv(oracle, spherical, y)
        spherical_hits.append(sph_ok)
        cand_ok = sph_ok and _is_adv(oracle, cand, y)
        if sph_ok:
            step_hits.append(cand_ok)
        if cand_ok:
            adv = cand
            d = float(np.linalg.norm(adv - x))
            if d < best_dist:
                best, best_dist = adv.copy(), d
            if record:
                out.trace.append(adv.copy())
        if len(spherical_hits) == ADAPT_WINDOW:
            rate = np.mean(spherical_hits)
            spherical_step *= ADAPT_FACTOR if rate > 0.5 else 1.0 / ADAPT_FACTOR
            spherical_hits.clear()
        if len(step_hits) == ADAPT_WINDOW:
            rate = np.mean(step_hits)
            source_step *= ADAPT_FACTOR if rate > 0.5 else 1.0 / ADAPT_FACTOR
            step_hits.clear()
    out.x_adv = best
    out.queries = oracle.queries - before
    return out
