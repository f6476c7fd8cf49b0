"""Desk-scale directional experiments on a two-class grayscale CIFAR-10 subset.

Both trials read real CIFAR-10 batches from the directory in
``QROBUST_CIFAR10`` when it is set, and otherwise fall back to the
deterministic grating stand-in from :func:`qrobust.data.synthetic_cifar`.
"""

from __future__ import annotations

import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .attacks import AttackConfig, run_attack
from .data import Dataset, load_cifar10, one_hot, preprocess, synthetic_cifar
from .jacobian import mean_jr
from .model import ModelSpec, build
from .quantize import QuantizerSpec
from .train import TrainConfig, train

TOY_MODEL = Path(__file__).resolve().parents[2] / "configs" / "toy_model.json"
CIFAR_ENV = "QROBUST_CIFAR10"


def toy_spec() -> ModelSpec:
    if TOY_MODEL.is_file():
        return ModelSpec.load(TOY_MODEL)
    # installed without the repository's configs directory
    return ModelSpec.from_dict(
        {
            "name": "toy_stq",
            "input_shape": [32, 32, 1],
            "layers": [
                {"kind": "avg_pool2d", "name": "downsample", "pool": 4},
                {"kind": "conv2d", "name": "conv", "filters": 8, "kernel": 3, "padding": "same", "activation": "relu", "weight_quantizer": "stq"},
                {"kind": "flatten", "name": "flatten"},
                {"kind": "dense", "name": "hidden", "units": 16, "activation": "relu", "weight_quantizer": "stq"},
                {"kind": "dense", "name": "out", "units": 2, "activation": "softmax", "weight_quantizer": "stq"},
            ],
        }
    )


def two_class_subset(n_train: int = 2000, n_test: int = 200, classes=(0, 1), cifar_dir: Optional[str] = None) -> tuple[Dataset, Dataset, str]:
    """(train, test, source) with ``n_train`` training and ``n_test`` held-out images."""
    cifar_dir = cifar_dir or os.environ.get(CIFAR_ENV)
    if cifar_dir:
        raw = load_cifar10(cifar_dir).select_classes(classes)
        ds = Dataset(preprocess(raw.inputs), raw.labels.astype(np.float32), raw.splits)
        tr, te = ds.split("train"), ds.split("test")
        return tr.subset(np.arange(min(n_train, len(tr)))), te.subset(np.arange(min(n_test, len(te)))), f"cifar10:{cifar_dir}"
    per_class = -(-(n_train + n_test) // len(classes))
    images, labels = synthetic_cifar(per_class, classes, seed=0)
    remap = {c: i for i, c in enumerate(classes)}
    ds = Dataset(preprocess(images), one_hot([remap[int(c)] for c in labels], len(classes)))
    return ds.subset(np.arange(n_train)), ds.subset(np.arange(n_train, n_train + n_test)), "synthetic"


@dataclass
class JRRun:
    lambda_jr: float
    mean_jr: float
    clean_accuracy: float
    fgsm_accuracy: float

    @property
    def drop(self) -> float:
        return self.clean_accuracy - self.fgsm_accuracy


@dataclass
class JRSeed:
    seed: int
    baseline: JRRun
    regularized: JRRun

    @property
    def lower_jr(self) -> bool:
        return self.regularized.mean_jr < self.baseline.mean_jr

    @property
    def drop_no_worse(self) -> bool:
        return self.regularized.drop <= self.baseline.drop

    @property
    def passed(self) -> bool:
        return self.lower_jr and self.drop_no_worse


@dataclass
class JREffect:
    source: str
    seeds: list[JRSeed] = field(default_factory=list)
    required: int = 3

    @property
    def wins(self) -> int:
        return sum(s.passed for s in self.seeds)

    @property
    def passed(self) -> bool:
        return self.wins >= self.required

    def rows(self) -> list[list]:
        return [
            [s.seed, run.lambda_jr, run.mean_jr, run.clean_accuracy, run.fgsm_accuracy, run.drop]
            for s in self.seeds
            for run in (s.baseline, s.regularized)
        ]


def _jr_run(spec, train_ds, probe, seed, lambda_jr, epochs, eps) -> JRRun:
    model = build(spec, seed=seed)
    cfg = TrainConfig(
        epochs=epochs,
        batch_size=64,
        lr_max=3e-3,
        lr_min=3e-5,
        lambda_jr=lambda_jr,
        jr_mode="full" if lambda_jr > 0 else "off",
        jr_probe_size=0,
        seed=seed,
    )
    train(model, train_ds, cfg)
    report = run_attack(model, probe.inputs, probe.labels, AttackConfig(kind="fgsm", norm="linf", eps=eps))
    return JRRun(lambda_jr, mean_jr(model, probe.inputs), report.clean_accuracy, report.accuracy)


def jr_effect_trial(seeds=range(5), lambda_jr: float = 0.1, epochs: int = 50, eps: float = 0.05, spec: Optional[ModelSpec] = None, log=None) -> JREffect:
    """Train the toy model with and without the Jacobian penalty under
    identical seeds; compare mean ||J||_F^2 and the FGSM accuracy drop on a
    200-sample probe set."""
    spec = spec or toy_spec()
    train_ds, probe, source = two_class_subset()
    result = JREffect(source)
    for seed in seeds:
        row = JRSeed(seed, _jr_run(spec, train_ds, probe, seed, 0.0, epochs, eps), _jr_run(spec, train_ds, probe, seed, lambda_jr, epochs, eps))
        result.seeds.append(row)
        if log:
            log(f"seed {seed}: jr {row.baseline.mean_jr:.4f} -> {row.regularized.mean_jr:.4f}, drop {row.baseline.drop:.1f} -> {row.regularized.drop:.1f}")
    return result


@dataclass
class QuantizerComparison:
    source: str
    accuracies: dict[str, list[float]]
    threshold: float = 85.0

    def median(self, scheme: str) -> float:
        return statistics.median(self.accuracies[scheme])

    @property
    def passed(self) -> bool:
        return self.median("stq") >= self.threshold and self.median("binary") <= self.median("stq")


def stq_vs_binary_trial(seeds=range(5), epochs: int = 20, spec: Optional[ModelSpec] = None, log=None) -> QuantizerComparison:
    """Same graph, data, seeds and budget; only the weight quantizer differs."""
    spec = spec or toy_spec()
    train_ds, test_ds, source = two_class_subset()
    acc: dict[str, list[float]] = {"stq": [], "binary": []}
    for seed in seeds:
        for name in acc:
            model = build(spec.with_weight_quantizer(QuantizerSpec.from_dict(name)), seed=seed)
            train(model, train_ds, TrainConfig(epochs=epochs, batch_size=64, lr_max=3e-3, lr_min=3e-5, jr_probe_size=0, seed=seed))
            acc[name].append(model.accuracy(test_ds.inputs, test_ds.labels))
        if log:
            log(f"seed {seed}: stq {acc['stq'][-1]:.1f}  binary {acc['binary'][-1]:.1f}")
    return QuantizerComparison(source, acc)
