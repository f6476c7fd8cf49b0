"""Attack configuration and the per-sample driver."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from ..data import load_tensor, save_tensor
from ..model import Model
from .boundary import boundary_attack
from .norms import NORMS, lp_norm
from .oracles import GradientOracle, PredictOracle
from .square import square_attack
from .white_box import CLIP, AttackOutcome, cw_l2, fgsm, pgd
from .zoo import zoo

WHITE_BOX = ("fgsm", "pgd", "cw_l2")
BLACK_BOX = ("square", "boundary", "zoo")
ATTACK_KINDS = WHITE_BOX + BLACK_BOX
DEFAULT_ITERATIONS = {"fgsm": 1, "pgd": 7, "cw_l2": 10, "square": 10000, "boundary": 1000, "zoo": 10}
# attacks whose eps is a success threshold rather than a constraint they enforce
THRESHOLD_KINDS = ("cw_l2", "boundary", "zoo")


class AttackConfigError(ValueError):
    pass


def worker_threads(default: int = 1) -> int:
    """Thread cap from ``QROBUST_THREADS`` (minimum 1)."""
    raw = os.environ.get("QROBUST_THREADS")
    if not raw:
        return default
    try:
        return max(int(raw), 1)
    except ValueError:
        raise AttackConfigError(f"QROBUST_THREADS must be an integer, got {raw!r}") from None


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    norm: Optional[str] = None  # l2 for cw_l2 and zoo, linf otherwise
    eps: Optional[float] = None
    alpha: float = 2.0 / 255.0
    iterations: Optional[int] = None
    query_budget: Optional[int] = None
    binary_search_steps: Optional[int] = None
    kappa: float = 0.0
    c: float = 1.0
    p_init: float = 0.05
    h: float = 1e-4
    coords_per_iter: int = 128
    lr: float = 0.01
    seed: int = 0
    clip: tuple[float, float] = CLIP
    name: str = ""

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise AttackConfigError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.norm is None:
            object.__setattr__(self, "norm", "l2" if self.kind in ("cw_l2", "zoo") else "linf")
        if self.norm not in NORMS:
            raise AttackConfigError(f"unknown norm {self.norm!r}; expected one of {NORMS}")
        if self.kind == "square" and self.norm == "l1":
            raise AttackConfigError("square attack supports linf and l2 only")
        if self.eps is not None and self.eps < 0:
            raise AttackConfigError(f"eps must be >= 0, got {self.eps}")
        if self.eps is None and self.kind in ("fgsm", "pgd", "square"):
            raise AttackConfigError(f"{self.kind} needs eps")
        min_iters = 0 if self.kind == "boundary" else 1
        if self.iterations is not None and self.iterations < min_iters:
            raise AttackConfigError(f"{self.kind}: iterations must be >= {min_iters}")
        if self.alpha <= 0 or self.h <= 0 or self.c < 0 or self.kappa < 0 or self.lr <= 0:
            raise AttackConfigError("alpha, h, lr must be > 0 and c, kappa >= 0")
        if not 0 < self.p_init <= 1:
            raise AttackConfigError("p_init must lie in (0, 1]")
        if self.query_budget is not None and self.query_budget < 1:
            raise AttackConfigError("query_budget must be positive")
        if self.binary_search_steps is not None and self.binary_search_steps < 1:
            raise AttackConfigError("binary_search_steps must be >= 1")
        object.__setattr__(self, "clip", (float(self.clip[0]), float(self.clip[1])))
        if not self.clip[0] < self.clip[1]:
            raise AttackConfigError("clip range must satisfy lo < hi")

    @property
    def white_box(self) -> bool:
        return self.kind in WHITE_BOX

    @property
    def steps(self) -> int:
        return self.iterations if self.iterations is not None else DEFAULT_ITERATIONS[self.kind]

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        eps = "" if self.eps is None else f"-eps{self.eps:g}"
        return f"{self.kind}-{self.norm}{eps}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip"] = list(self.clip)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise AttackConfigError(f"unknown attack fields {sorted(extra)}")
        d = dict(d)
        if "clip" in d:
            d["clip"] = tuple(d["clip"])
        try:
            return cls(**d)
        except TypeError as err:
            raise AttackConfigError(str(err)) from None


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray  # class indices
    queries: np.ndarray
    success: np.ndarray
    flags: list[list[str]] = field(default_factory=list)

    def save(self, directory, prefix: str) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_tensor(directory / f"{prefix}.originals.qrt", self.originals.astype(np.float64))
        save_tensor(directory / f"{prefix}.perturbed.qrt", self.perturbed.astype(np.float64))
        (directory / f"{prefix}.labels").write_bytes(self.labels.astype(np.uint8).tobytes())
        meta = {"queries": self.queries.tolist(), "success": self.success.tolist(), "flags": self.flags}
        (directory / f"{prefix}.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory, prefix: str) -> "AdversarialBatch":
        directory = Path(directory)
        meta = json.loads((directory / f"{prefix}.json").read_text(encoding="utf-8"))
        return cls(
            load_tensor(directory / f"{prefix}.originals.qrt"),
            load_tensor(directory / f"{prefix}.perturbed.qrt"),
            np.frombuffer((directory / f"{prefix}.labels").read_bytes(), dtype=np.uint8).astype(np.int64),
            np.asarray(meta["queries"], dtype=np.int64),
            np.asarray(meta["success"], dtype=bool),
            meta["flags"],
        )


@dataclass
class AttackReport:
    config: AttackConfig
    batch: AdversarialBatch
    clean_accuracy: float
    accuracy: float
    mean_norm: float
    mean_queries: float

    def summary(self) -> dict:
        errors = sum(any(f.startswith("error") for f in fl) for fl in self.batch.flags)
        return {
            "attack": self.config.label,
            "config": self.config.to_dict(),
            "samples": int(len(self.batch.labels)),
            "clean_accuracy": self.clean_accuracy,
            "accuracy": self.accuracy,
            "mean_norm": self.mean_norm,
            "mean_queries": self.mean_queries,
            "errors": int(errors),
        }


def attack_one(model: Model, x: np.ndarray, y: int, config: AttackConfig, rng: np.random.Generator, record: bool = False) -> AttackOutcome:
    """Run one attack on one sample. Black-box kinds only ever see a
    :class:`PredictOracle`."""
    k = config.kind
    steps = config.steps
    if k in WHITE_BOX:
        oracle = GradientOracle(model)
        if k == "fgsm":
            return fgsm(oracle, x, y, config.eps, config.norm, config.clip)
        if k == "pgd":
            return pgd(oracle, x, y, config.eps, config.alpha, steps, config.norm, config.clip)
        return cw_l2(oracle, x, y, steps, config.c, config.kappa, config.lr, config.binary_search_steps or 1, config.clip)
    black = PredictOracle(model.predict)
    if k == "square":
        return square_attack(black, x, y, config.eps, config.norm, steps, config.p_init, rng=rng, query_budget=config.query_budget, clip=config.clip, record=record)
    if k == "boundary":
        return boundary_attack(black, x, y, steps, rng=rng, query_budget=config.query_budget, clip=config.clip, record=record)
    return zoo(
        black,
        x,
        y,
        steps,
        config.binary_search_steps or 10,
        config.h,
        rng=rng,
        c=config.c,
        kappa=config.kappa,
        lr=config.lr,
        coords_per_iter=config.coords_per_iter,
        query_budget=config.query_budget,
        clip=config.clip,
    )


def run_attack(model: Model, x, y, config: AttackConfig, threads: Optional[int] = None, offset: int = 0) -> AttackReport:
    """Attack every sample of (x, y); ``y`` may be one-hot rows or indices.

    Sample ``i`` draws from ``default_rng([seed, offset + i])`` so results do
    not depend on thread count. A failing sample keeps x' = x and records the
    error in its flags.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    labels = np.argmax(y, axis=1) if y.ndim == 2 else y.astype(np.int64)
    n = len(x)
    threads = threads if threads is not None else worker_threads()

    def work(i: int) -> AttackOutcome:
        rng = np.random.default_rng([config.seed, offset + i])
        try:
            res = attack_one(model, x[i], int(labels[i]), config, rng)
        except Exception as err:  # per-sample failure never aborts the batch
            return AttackOutcome(x[i].copy(), flags=[f"error:{type(err).__name__}: {err}"])
        if config.kind in THRESHOLD_KINDS and config.eps is not None:
            if lp_norm(res.x_adv - x[i], config.norm) > config.eps:
                res.x_adv = x[i].copy()
                res.flags.append("exceeds_eps")
        return res

    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(work, range(n)))
    else:
        outcomes = [work(i) for i in range(n)]

    perturbed = np.stack([o.x_adv for o in outcomes]) if n else x.copy()
    # one sample per call: batched float32 matmuls can round differently and
    # flip points the attack left within ulps of the boundary
    adv_pred = np.array([int(np.argmax(model.predict(p[None])[0])) for p in perturbed], dtype=np.int64)
    clean_pred = np.array([int(np.argmax(model.predict(p[None])[0])) for p in x], dtype=np.int64)
    batch = AdversarialBatch(
        originals=x,
        perturbed=perturbed,
        labels=labels,
        queries=np.asarray([o.queries for o in outcomes], dtype=np.int64),
        success=adv_pred != labels,
        flags=[o.flags for o in outcomes],
    )
    norms = [lp_norm(perturbed[i] - x[i], config.norm) for i in range(n)]
    return AttackReport(
        config=config,
        batch=batch,
        clean_accuracy=100.0 * float(np.mean(clean_pred == labels)) if n else 0.0,
        accuracy=100.0 * float(np.mean(adv_pred == labels)) if n else 0.0,
        mean_norm=float(np.mean(norms)) if n else 0.0,
        mean_queries=float(batch.queries.mean()) if n else 0.0,
    )
