"""Zeroth-order optimization attack: the C&W objective minimized with
coordinate-wise symmetric finite differences and per-coordinate Adam, using
only predicted probabilities."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .oracles import PredictOracle
from .white_box import CLIP, AttackOutcome

DEFAULT_H = 1e-4
DEFAULT_COORDS = 128


def coordinate_gradient(loss: Callable[[np.ndarray], np.ndarray], x: np.ndarray, coords: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """(L(x + h e_j) - L(x - h e_j)) / 2h for each flat index j in ``coords``.

    ``loss`` maps a batch of points to a vector of losses; all 2 * len(coords)
    probes go in one batch.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    flat = np.asarray(x, dtype=np.float64).ravel()
    coords = np.asarray(coords, dtype=np.int64)
    probes = np.repeat(flat[None], 2 * len(coords), axis=0)
    rows = np.arange(len(coords))
    probes[2 * rows, coords] += h
    probes[2 * rows + 1, coords] -= h
    values = np.asarray(loss(probes.reshape((-1,) + np.shape(x))), dtype=np.float64)
    return (values[0::2] - values[1::2]) / (2.0 * h)


def _margin_terms(oracle: PredictOracle, xs: np.ndarray, y: int, kappa: float) -> tuple[np.ndarray, np.ndarray]:
    lp = oracle.log_probs(xs)
    others = lp.copy()
    others[:, y] = -np.inf
    m = lp[:, y] - others.max(axis=1)
    return np.maximum(m, -kappa), m


def zoo(
    oracle: PredictOracle,
    x,
    y: int,
    iterations: int = 10,
    binary_search_steps: int = 10,
    h: float = DEFAULT_H,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
    c: float = 1.0,
    kappa: float = 0.0,
    lr: float = 0.01,
    coords_per_iter: int = DEFAULT_COORDS,
    query_budget: Optional[int] = None,
    clip=CLIP,
) -> AttackOutcome:
    """Minimize ||delta||^2 + c * max(margin(x + delta), -kappa) with ZOO-Adam,
    searching c over ``binary_search_steps`` rounds. Returns the successful
    iterate of smallest L2 distance (or the last iterate, flagged)."""
    x = np.asarray(x, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(seed)
    lo, hi = clip
    out = AttackOutcome(x.copy())
    before = oracle.queries
    _, m0 = _margin_terms(oracle, x[None], y, kappa)
    if m0[0] < 0:
        out.queries = oracle.queries - before
        return out
    n = x.size
    k = min(coords_per_iter, n)
    budget = query_budget if query_budget is not None else np.inf
    best, best_dist = None, np.inf
    lower, upper = 0.0, 1e10
    last = x.copy()
    for _ in range(max(binary_search_steps, 1)):
        delta = np.zeros(n)
        m_adam, v_adam, t_adam = np.zeros(n), np.zeros(n), np.zeros(n)
        found = False

        def objective(points: np.ndarray) -> np.ndarray:
            flat = points.reshape(len(points), -1)
            f, _ = _margin_terms(oracle, points, y, kappa)
            return np.sum((flat - x.ravel()) ** 2, axis=1) + c * f

        for _ in range(iterations):
            if oracle.queries - before + 2 * k + 1 > budget:
                break
            cur = np.clip(x.ravel() + delta, lo, hi)
            coords = rng.choice(n, size=k, replace=False)
            g = coordinate_gradient(objective, cur.reshape(x.shape), coords, h)
            t_adam[coords] += 1
            m_adam[coords] = 0.9 * m_adam[coords] + 0.1 * g
            v_adam[coords] = 0.999 * v_adam[coords] + 0.001 * g * g
            mhat = m_adam[coords] / (1 - 0.9 ** t_adam[coords])
            vhat = v_adam[coords] / (1 - 0.999 ** t_adam[coords])
            delta[coords] -= lr * mhat / (np.sqrt(vhat) + 1e-8)
            # keep x + delta inside the clip box
            delta = np.clip(x.ravel() + delta, lo, hi) - x.ravel()
            cand = (x.ravel() + delta).reshape(x.shape)
            _, m = _margin_terms(oracle, cand[None], y, kappa)
            last = cand
            if m[0] < 0:
                found = True
                d = float(np.sum(delta**2))
                if d < best_dist:
                    best, best_dist = cand.copy(), d
        if found:
            upper = min(upper, c)
            c = (lower + upper) / 2.0
        else:
            lower = max(lower, c)
            c = (lower + upper) / 2.0 if upper < 1e9 else c * 10.0
    out.queries = oracle.queries - before
    if best is None:
        out.x_adv = last
        out.flags.append("unsuccessful")
    else:
        out.x_adv = best
    return out
