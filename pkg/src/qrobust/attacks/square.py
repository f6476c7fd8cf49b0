"""Square attack: score-based random search over square-shaped patches.

The margin is measured on log-probabilities, which equals the logit margin,
so only the prediction surface is needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .oracles import PredictOracle
from .white_box import CLIP, AttackOutcome


@dataclass(frozen=True)
class SquareStep:
    iteration: int
    row: int
    col: int
    size: int
    accepted: bool
    margin: float
    x: Optional[np.ndarray] = None  # accepted iterate, when recording


def p_selection(p_init: float, it: int, n_iters: int) -> float:
    """Fraction of pixels changed per proposal, halved on a fixed schedule
    (expressed for a 10,000-iteration budget and rescaled to ``n_iters``)."""
    it = int(it / n_iters * 10000)
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32), (4000, 64), (6000, 128), (8000, 256)):
        if it <= bound:
            return p_init / div
    return p_init / 512


def _margin(oracle: PredictOracle, x: np.ndarray, y: int) -> float:
    lp = oracle.log_probs(x[None])[0]
    others = lp.copy()
    others[y] = -np.inf
    return float(lp[y] - others.max())


def _pseudo_gaussian_rect(rows: int, cols: int) -> np.ndarray:
    delta = np.zeros((rows, cols))
    rc, cc = rows // 2 + 1, cols // 2 + 1
    r0, c0 = rc - 1, cc - 1
    for k in range(max(rc, cc)):
        delta[max(r0, 0) : min(r0 + 2 * k + 1, rows), max(c0, 0) : min(c0 + 2 * k + 1, cols)] += 1.0 / (k + 1) ** 2
        r0 -= 1
        c0 -= 1
    return delta / np.sqrt(np.sum(delta**2))


def meta_pseudo_gaussian_pert(s: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm s x s patch: two opposite-signed pseudo-Gaussian halves,
    randomly transposed."""
    delta = np.zeros((s, s))
    delta[: s // 2] = _pseudo_gaussian_rect(s // 2, s)
    delta[s // 2 :] = -_pseudo_gaussian_rect(s - s // 2, s)
    delta /= np.sqrt(np.sum(delta**2))
    if rng.random() > 0.5:
        delta = delta.T
    return delta


def square_attack(
    oracle: PredictOracle,
    x,
    y: int,
    eps: float,
    norm: str = "linf",
    iterations: int = 10000,
    p_init: float = 0.05,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
    query_budget: Optional[int] = None,
    clip=CLIP,
    record: bool = False,
) -> AttackOutcome:
    """Untargeted square attack on one (H, W, C) image. A proposal is kept only
    if it lowers the margin; the loop stops once the margin is negative."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"square attack needs an (H, W, C) image, got shape {x.shape}")
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if norm not in ("linf", "l2"):
        raise ValueError(f"square attack supports linf and l2, got {norm!r}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    out = AttackOutcome(x.copy())
    if eps == 0:
        return out
    h, w, c = x.shape
    n_features = h * w * c
    lo, hi = clip
    budget = query_budget if query_budget is not None else np.inf

    if norm == "linf":
        stripes = eps * rng.choice([-1.0, 1.0], size=(1, w, c))
        best = np.clip(x + stripes, lo, hi)
    else:
        init = np.zeros_like(x)
        s = max(h // 5, 1)
        start = (h - s * 5) // 2 if h >= 5 else 0
        row = start
        for _ in range(h // s):
            col = start
            for _ in range(w // s):
                patch = meta_pseudo_gaussian_pert(s, rng)[:, :, None] * rng.choice([-1.0, 1.0], size=(1, 1, c))
                init[row : row + s, col : col + s] += patch[: max(0, min(s, h - row)), : max(0, min(s, w - col))]
                col += s
            row += s
        n = np.sqrt(np.sum(init**2))
        best = np.clip(x + init / n * eps, lo, hi) if n > 0 else x.copy()
    best_margin = _margin(oracle, best, y)
    out.queries = 1
    if record:
        out.trace.append(SquareStep(-1, 0, 0, 0, True, best_margin, best.copy()))

    for it in range(iterations):
        if best_margin < 0 or out.queries >= budget:
            break
        p = p_selection(p_init, it, iterations)
        if norm == "linf":
            s = int(round(np.sqrt(p * n_features / c)))
            s = min(max(s, 1), max(h - 1, 1))
            r = int(rng.integers(0, h - s + 1))
            q = int(rng.integers(0, w - s + 1))
            cand = best.copy()
            # a fresh +-eps vertex per channel; redraw while it would change nothing
            for _ in range(100):
                signs = rng.choice([-1.0, 1.0], size=(1, 1, c))
                window = np.clip(x[r : r + s, q : q + s] + eps * signs, lo, hi)
                if np.any(np.abs(window - best[r : r + s, q : q + s]) >= 1e-7):
                    break
            cand[r : r + s, q : q + s] = window
        else:
            s = max(int(round(np.sqrt(p * n_features / c))), 3)
            if s % 2 == 0:
                s += 1
            s = min(s, h, w)
            delta = best - x
            r, q = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
            r2, q2 = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
            win1 = delta[r : r + s, q : q + s]
            norm_win1 = np.sqrt(np.sum(win1**2, axis=(0, 1), keepdims=True))
            mask = np.zeros((h, w, 1))
            mask[r : r + s, q : q + s] = 1.0
            mask[r2 : r2 + s, q2 : q2 + s] = 1.0
            norm_image = np.sqrt(np.sum(delta**2))
            norm_windows = np.sqrt(np.sum((delta * mask) ** 2))
            new = meta_pseudo_gaussian_pert(s, rng)[:, :, None] * rng.choice([-1.0, 1.0], size=(1, 1, c))
            new = new + win1 / (1e-12 + norm_win1)
            scale = np.sqrt(max(eps**2 - norm_image**2, 0.0) / c + norm_windows**2)
            new = new / (1e-12 + np.sqrt(np.sum(new**2, axis=(0, 1), keepdims=True))) * scale
            delta = delta.copy()
            delta[r2 : r2 + s, q2 : q2 + s] = 0.0
            delta[r : r + s, q : q + s] = new
            n = np.sqrt(np.sum(delta**2))
            cand = np.clip(x + (delta / n * eps if n > 0 else 0.0), lo, hi)
        m = _margin(oracle, cand, y)
        out.queries += 1
        accepted = m < best_margin
        if accepted:
            best, best_margin = cand, m
        if record:
            out.trace.append(SquareStep(it, r, q, s, accepted, best_margin, best.copy() if accepted else None))
    out.x_adv = best
    if best_margin >= 0:
        out.flags.append("unsuccessful")
    return out
