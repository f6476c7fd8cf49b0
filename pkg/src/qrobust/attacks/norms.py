from __future__ import annotations

import numpy as np

NORMS = ("l1", "l2", "linf")


def lp_norm(v: np.ndarray, norm: str) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    if norm == "linf":
        return float(np.max(np.abs(v))) if v.size else 0.0
    if norm == "l2":
        return float(np.sqrt(np.sum(v * v)))
    if norm == "l1":
        return float(np.sum(np.abs(v)))
    raise ValueError(f"unknown norm {norm!r}; expected one of {NORMS}")


def normalized_step(g: np.ndarray, norm: str) -> tuple[np.ndarray, bool]:
    """Unit-norm ascent direction of ``g`` (sign for linf); the flag is True
    when ``g`` is zero and no direction exists."""
    g = np.asarray(g, dtype=np.float64)
    if norm == "linf":
        return np.sign(g), not np.any(g)
    n = lp_norm(g, norm)
    if n == 0.0:
        return np.zeros_like(g), True
    return g / n, False


def project_l1_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto {||u||_1 <= radius} by sorting (Duchi et al.)."""
    flat = np.asarray(v, dtype=np.float64).ravel()
    if radius <= 0:
        return np.zeros_like(v, dtype=np.float64)
    a = np.abs(flat)
    if a.sum() <= radius:
        return np.asarray(v, dtype=np.float64).copy()
    mu = np.sort(a)[::-1]
    cums = np.cumsum(mu)
    k = np.arange(1, a.size + 1)
    # index 0 always qualifies in exact arithmetic; with radius far below
    # ulp(|v|_1) rounding can empty the candidate set
    hits = np.nonzero(mu * k > cums - radius)[0]
    rho = hits[-1] if hits.size else 0
    theta = (cums[rho] - radius) / (rho + 1.0)
    return (np.sign(flat) * np.maximum(a - theta, 0.0)).reshape(np.shape(v))


def project_ball(delta: np.ndarray, eps: float, norm: str) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    if norm == "l2":
        n = lp_norm(delta, "l2")
        return delta if n <= eps else delta * (eps / n)
    if norm == "l1":
        return project_l1_ball(delta, eps)
    raise ValueError(f"unknown norm {norm!r}; expected one of {NORMS}")
