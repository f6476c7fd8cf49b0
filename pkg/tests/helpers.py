"""Small hand-set models and a trained toy model shared across test modules."""

from functools import lru_cache
from pathlib import Path

import numpy as np

from qrobust.attacks import AttackConfig, attack_one, lp_norm
from qrobust.harness import load_data, load_run_config
from qrobust.model import ModelSpec, build
from qrobust.train import train

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def linear_model(kernel, bias=None, input_shape=None, dtype=np.float64):
    """z = flatten(x) @ kernel + bias with the given (D, K) kernel."""
    kernel = np.asarray(kernel, dtype=np.float64)
    d, k = kernel.shape
    shape = tuple(input_shape) if input_shape is not None else (d,)
    layers = [{"kind": "flatten"}] if len(shape) > 1 else []
    layers.append({"kind": "dense", "units": k, "use_bias": bias is not None})
    model = build(ModelSpec.from_dict({"input_shape": list(shape), "layers": layers}), dtype=dtype)
    dense = model.layers[-1]
    dense.params["kernel"].data[...] = kernel
    if bias is not None:
        dense.params["bias"].data[...] = bias
    return model


def hyperplane_model(shape=(4, 4, 1), distance=0.15, seed=0):
    """Two-class linear model and a point x at L2 ``distance`` from its
    boundary, classified as class 0, with the whole segment inside [0, 1]."""
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    x = 0.5 + rng.uniform(-0.05, 0.05, size=d)
    u = rng.normal(size=d)
    u /= np.linalg.norm(u)
    kernel = np.stack([np.zeros(d), u], axis=1)
    # logit gap z1 - z0 = u.x + b = -distance at x
    bias = np.array([0.0, -distance - u @ x])
    return linear_model(kernel, bias, shape), x.reshape(shape), distance


def random_image_model(shape=(8, 8, 1), k=3, seed=0):
    rng = np.random.default_rng(seed)
    d = int(np.prod(shape))
    kernel = rng.normal(size=(d, k))
    # near-equal logits at the centre of the box, so every class owns some of it
    bias = -0.5 * kernel.sum(axis=0) + rng.normal(size=k) * 0.1
    return linear_model(kernel, bias, shape)


@lru_cache(maxsize=1)
def trained_toy():
    """(model, test set) from the shipped toy config, trained once per session."""
    cfg = load_run_config(CONFIGS / "toy.json")
    train_ds, test_ds = load_data(cfg)
    model = build(ModelSpec.load(cfg.model), seed=cfg.train.seed)
    train(model, train_ds, cfg.train)
    return model, test_ds


CONTRACT_SHAPE = (6, 6, 1)
CONTRACT_NORMS = {"fgsm": ("l1", "l2", "linf"), "pgd": ("l1", "l2", "linf"), "square": ("l2", "linf")}
CONTRACT_STEPS = {"fgsm": None, "pgd": 5, "cw_l2": 5, "square": 20, "boundary": 10, "zoo": 2}


def attack_contract_violations(kind, cases, seed=0):
    """Run ``cases`` random (model, input, eps, norm) draws of one attack and
    list every clip-range or norm-ball violation found."""
    rng = np.random.default_rng(seed)
    models = [random_image_model(CONTRACT_SHAPE, 3, s) for s in range(16)]
    bad = []
    for i in range(cases):
        model = models[i % len(models)]
        x = rng.uniform(0, 1, size=CONTRACT_SHAPE)
        y = int(np.argmax(model.predict(x[None])[0]))
        eps = float(rng.uniform(0, 0.5))
        norm = str(rng.choice(CONTRACT_NORMS.get(kind, ("l2",))))
        extra = {"binary_search_steps": 2, "coords_per_iter": 16} if kind == "zoo" else {}
        cfg = AttackConfig(kind, norm=norm, eps=eps, alpha=max(eps / 3, 1e-3), iterations=CONTRACT_STEPS[kind], seed=i, **extra)
        out = attack_one(model, x, y, cfg, np.random.default_rng([seed, i])).x_adv
        if out.shape != x.shape or out.min() < 0.0 or out.max() > 1.0:
            bad.append(f"case {i}: output leaves clip range")
        if kind in CONTRACT_NORMS and lp_norm(out - x, norm) > eps * (1 + 1e-6):
            bad.append(f"case {i}: {norm} norm {lp_norm(out - x, norm)} > eps {eps}")
    return bad
