"""Gradient-based attacks: single-step FGSM, projected gradient descent, and
the Carlini-Wagner L2 attack in tanh space."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .norms import lp_norm, normalized_step, project_ball
from .oracles import GradientOracle

CLIP = (0.0, 1.0)


@dataclass
class AttackOutcome:
    x_adv: np.ndarray
    queries: int = 0
    flags: list[str] = field(default_factory=list)
    trace: list = field(default_factory=list)


def _clip(x: np.ndarray, clip: tuple[float, float]) -> np.ndarray:
    return np.clip(x, clip[0], clip[1])


def fgsm(oracle: GradientOracle, x, y: int, eps: float, norm: str = "linf", clip=CLIP) -> AttackOutcome:
    """x' = clip(x + eps * d) with d the sign (linf) or the unit-norm
    direction (l1, l2) of the loss gradient."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    _, g = oracle.loss_grad(x, y)
    step, zero = normalized_step(g, norm)
    out = AttackOutcome(_clip(x + eps * step, clip), queries=1)
    if zero:
        out.flags.append("zero_gradient")
    return out


def pgd(
    oracle: GradientOracle,
    x,
    y: int,
    eps: float,
    alpha: float,
    iterations: int,
    norm: str = "linf",
    clip=CLIP,
) -> AttackOutcome:
    """Iterated normalized-gradient steps of size ``alpha``, each projected
    back onto the eps-ball around ``x`` and the clip range. No random start."""
    if eps < 0 or alpha <= 0 or iterations < 1:
        raise ValueError("pgd needs eps >= 0, alpha > 0, iterations >= 1")
    x = np.asarray(x, dtype=np.float64)
    cur = x.copy()
    out = AttackOutcome(cur)
    for _ in range(iterations):
        _, g = oracle.loss_grad(cur, y)
        out.queries += 1
        step, zero = normalized_step(g, norm)
        if zero and "zero_gradient" not in out.flags:
            out.flags.append("zero_gradient")
        cur = x + project_ball(cur + alpha * step - x, eps, norm)
        cur = _clip(cur, clip)
    out.x_adv = cur
    return out


# ---------------------------------------------------------------------------
# Carlini-Wagner L2
# ---------------------------------------------------------------------------


def margin(logits: np.ndarray, y: int) -> tuple[float, int]:
    """z_y - max_{k != y} z_k and the runner-up class."""
    others = np.array(logits, dtype=np.float64)
    others[y] = -np.inf
    k = int(np.argmax(others))
    return float(logits[y] - others[k]), k


class Adam:
    def __init__(self, shape, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, g: np.ndarray) -> np.ndarray:
        """Update to add to the variable (descent direction)."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return -self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _to_tanh(x: np.ndarray, clip) -> np.ndarray:
    lo, hi = clip
    u = (x - lo) / (hi - lo) * 2.0 - 1.0
    return np.arctanh(np.clip(u, -1 + 1e-6, 1 - 1e-6))


def _from_tanh(w: np.ndarray, clip) -> np.ndarray:
    lo, hi = clip
    return lo + (hi - lo) * (np.tanh(w) + 1.0) / 2.0


def cw_l2(
    oracle: GradientOracle,
    x,
    y: int,
    iterations: int = 10,
    c: float = 1.0,
    kappa: float = 0.0,
    lr: float = 0.01,
    binary_search_steps: int = 1,
    clip=CLIP,
) -> AttackOutcome:
    """Minimize ||x' - x||^2 + c * max(z_y - max_{k != y} z_k, -kappa) over
    x' = tanh-box(w) with Adam. Returns the successful iterate of smallest L2
    distance, or the final iterate flagged ``unsuccessful``. With
    ``binary_search_steps > 1`` the constant c is searched (halved on success,
    raised on failure)."""
    if iterations < 1:
        raise ValueError("cw_l2 needs iterations >= 1")
    x = np.asarray(x, dtype=np.float64)
    out = AttackOutcome(x.copy())
    z0 = oracle.logits(x)[0]
    out.queries += 1
    if margin(z0, y)[0] < 0:
        return out  # already misclassified: delta = 0 is optimal
    best_dist, best = np.inf, None
    lower, upper = 0.0, 1e10
    final = x.copy()
    for _ in range(max(binary_search_steps, 1)):
        w = _to_tanh(x, clip)
        opt = Adam(w.shape, lr=lr)
        found = False
        for _ in range(iterations):
            xa = _from_tanh(w, clip)
            z = oracle.logits(xa)[0]
            m, k = margin(z, y)
            out.queries += 1
            dist = float(np.sum((xa - x) ** 2))
            if m < 0:
                found = True
                if dist < best_dist:
                    best_dist, best = dist, xa.copy()
            grad_x = 2.0 * (xa - x)
            if c > 0 and m > -kappa:
                v = np.zeros_like(z)
                v[y], v[k] = 1.0, -1.0
                grad_x = grad_x + c * oracle.logits_vjp(xa, v)
                out.queries += 1
            dx_dw = (clip[1] - clip[0]) / 2.0 * (1.0 - np.tanh(w) ** 2)
            w = w + opt.step(grad_x * dx_dw)
        xa = _from_tanh(w, clip)
        z = oracle.logits(xa)[0]
        out.queries += 1
        dist = float(np.sum((xa - x) ** 2))
        if margin(z, y)[0] < 0:
            found = True
            if dist < best_dist:
                best_dist, best = dist, xa.copy()
        final = xa
        if found:
            upper = min(upper, c)
            c = (lower + upper) / 2.0
        else:
            lower = max(lower, c)
            c = (lower + upper) / 2.0 if upper < 1e9 else c * 10.0
    if best is None:
        out.x_adv = final
        out.flags.append("unsuccessful")
    else:
        out.x_adv = best
    return out


def l2_distance(a, b) -> float:
    return lp_norm(np.asarray(a) - np.asarray(b), "l2")


__all__ = ["AttackOutcome", "fgsm", "pgd", "cw_l2", "margin", "Adam", "l2_distance"]
