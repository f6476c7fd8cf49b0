"""Run configuration and the bodies of the command-line subcommands.

Every command writes its primary outputs (checkpoints, CSV, JSON, .dat) so
that a rerun with the same config and seed reproduces them byte for byte;
wall-clock timings go to a separate ``meta.json``.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .attacks import AttackConfig, run_attack
from .autodiff import ops
from .autodiff.gradcheck import grad_check
from .autodiff.tensor import Tensor
from .data import DataError, Dataset, fold_variance, kfold, load_cifar10, load_tensors, one_hot, preprocess, synthetic_cifar
from .jacobian import mean_jr
from .model import ForwardContext, Model, ModelSpec, build, footprint
from .quantize import SCHEMES, QuantizerSpec, scheme
from .train import TrainConfig, train

DATA_FORMATS = ("qrt", "cifar10", "synthetic")
DEFAULT_SCHEMES = ("fp32", "8-bit", "4-bit", "2-bit", "ternary", "binary")
SWEEP_EPS = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3)
PGD_EPS = (8 / 255, 16 / 255, 32 / 255)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (exit code 2)."""


def _known(d: dict, allowed: set[str], where: str) -> None:
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"{where}: unknown fields {sorted(extra)}")


@dataclass(frozen=True)
class DataConfig:
    """Where samples come from.

    ``qrt``: QRT1 tensors (``train``/``test``) with ``<path>.labels`` files.
    ``cifar10``: a directory of CIFAR-10 binary batches, converted to
    grayscale; ``classes`` picks and relabels a subset.
    ``synthetic``: class-patterned images generated in the CIFAR byte layout,
    ``n_per_class`` training and ``test_per_class`` test samples per class.
    """

    format: str = "qrt"
    train: Optional[str] = None
    test: Optional[str] = None
    classes: Optional[tuple[int, ...]] = None
    limit: Optional[int] = None
    test_limit: Optional[int] = None
    n_per_class: int = 200
    test_per_class: int = 100
    jitter: float = 0.15
    noise: float = 0.15
    seed: Optional[int] = None

    def __post_init__(self):
        if self.format not in DATA_FORMATS:
            raise ConfigError(f"data.format must be one of {DATA_FORMATS}, got {self.format!r}")
        if self.n_per_class < 1 or self.test_per_class < 0:
            raise ConfigError("n_per_class must be >= 1 and test_per_class >= 0")

    def paths(self) -> list[Path]:
        return [Path(p) for p in (self.train, self.test) if p]


@dataclass(frozen=True)
class SweepConfig:
    fgsm_eps: tuple[float, ...] = SWEEP_EPS
    fgsm_norm: str = "linf"
    pgd_eps: tuple[float, ...] = PGD_EPS
    pgd_alpha: float = 2 / 255
    pgd_iterations: int = 7


@dataclass(frozen=True)
class GradcheckConfig:
    seeds: int = 20
    batch: int = 2
    tolerance: float = 1e-3
    max_coords: int = 24


@dataclass(frozen=True)
class RunConfig:
    model: Path
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: tuple[AttackConfig, ...] = ()
    out: Path = Path("runs/default")
    seed: int = 0
    checkpoint: Optional[Path] = None
    attack_samples: int = 100
    kfold_k: int = 10
    schemes: tuple[str, ...] = DEFAULT_SCHEMES
    sweep: SweepConfig = field(default_factory=SweepConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    # False forbids white-box attacks on this run
    gradient_access: bool = True

    @property
    def checkpoint_path(self) -> Path:
        return self.checkpoint if self.checkpoint is not None else self.out / "model.qrb"

    def to_dict(self) -> dict:
        return {
            "model": str(self.model),
            "data": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.data.__dict__.items()},
            "train": self.train.to_dict(),
            "attacks": [a.to_dict() for a in self.attacks],
            "out": str(self.out),
            "seed": self.seed,
            "checkpoint": None if self.checkpoint is None else str(self.checkpoint),
            "attack_samples": self.attack_samples,
            "kfold_k": self.kfold_k,
            "schemes": list(self.schemes),
            "sweep": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.sweep.__dict__.items()},
            "gradcheck": dict(self.gradcheck.__dict__),
            "gradient_access": self.gradient_access,
        }


RUN_FIELDS = {"model", "data", "train", "attacks", "out", "seed", "checkpoint", "attack_samples", "kfold_k", "schemes", "sweep", "gradcheck", "gradient_access"}


def _resolve(base: Path, p: Optional[str]) -> Optional[str]:
    if p is None:
        return None
    path = Path(p)
    return str(path if path.is_absolute() else base / path)


def parse_run_config(raw: dict, base: Path = Path("."), seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    """Build a :class:`RunConfig` from parsed JSON.

    Relative model, data and checkpoint paths are taken relative to ``base``
    (the config file's directory); ``out`` is relative to the working
    directory. ``seed`` and ``out`` override the file; the run seed replaces
    the seed of training, every attack, and synthetic data without an explicit
    data seed.
    """
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    _known(raw, RUN_FIELDS, "run config")
    if "model" not in raw:
        raise ConfigError("run config needs a 'model' spec path")
    run_seed = int(seed if seed is not None else raw.get("seed", 0))
    if run_seed < 0:
        raise ConfigError(f"seed must be non-negative, got {run_seed}")
    try:
        data_raw = dict(raw.get("data", {}))
        _known(data_raw, set(DataConfig.__dataclass_fields__), "data")
        for key in ("train", "test"):
            data_raw[key] = _resolve(base, data_raw.get(key))
        if data_raw.get("classes") is not None:
            data_raw["classes"] = tuple(int(c) for c in data_raw["classes"])
        data = DataConfig(**data_raw)
        train_raw = dict(raw.get("train", {}))
        train_raw["seed"] = run_seed
        train_cfg = TrainConfig.from_dict(train_raw)
        attacks = tuple(AttackConfig.from_dict({**a, "seed": run_seed}) for a in raw.get("attacks", []))
        sweep_raw = dict(raw.get("sweep", {}))
        _known(sweep_raw, set(SweepConfig.__dataclass_fields__), "sweep")
        sweep = SweepConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in sweep_raw.items()})
        gc_raw = dict(raw.get("gradcheck", {}))
        _known(gc_raw, set(GradcheckConfig.__dataclass_fields__), "gradcheck")
        gradcheck = GradcheckConfig(**gc_raw)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from None
    schemes = tuple(raw.get("schemes", DEFAULT_SCHEMES))
    unknown = [s for s in schemes if s not in SCHEMES]
    if unknown:
        raise ConfigError(f"unknown quantization schemes {unknown}; known: {sorted(SCHEMES)}")
    cfg = RunConfig(
        model=Path(_resolve(base, raw["model"])),
        data=data,
        train=train_cfg,
        attacks=attacks,
        out=Path(out if out is not None else raw.get("out", "runs/default")),
        seed=run_seed,
        checkpoint=None if raw.get("checkpoint") is None else Path(_resolve(base, raw["checkpoint"])),
        attack_samples=int(raw.get("attack_samples", 100)),
        kfold_k=int(raw.get("kfold_k", 10)),
        schemes=schemes,
        sweep=sweep,
        gradcheck=gradcheck,
        gradient_access=bool(raw.get("gradient_access", True)),
    )
    if cfg.attack_samples < 1:
        raise ConfigError("attack_samples must be >= 1")
    if cfg.kfold_k < 2:
        raise ConfigError(f"kfold_k must be >= 2, got {cfg.kfold_k}")
    return cfg


def load_run_config(path, seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise ConfigError(f"{path}: not valid UTF-8 JSON ({err})") from None
    return parse_run_config(raw, path.parent, seed, out)


def require_paths(cfg: RunConfig, data: bool = True, checkpoint: bool = False) -> None:
    """Fail with :class:`ConfigError` before any output is written."""
    missing = [] if cfg.model.is_file() else [cfg.model]
    if data and cfg.data.format != "synthetic" and not cfg.data.train:
        raise ConfigError(f"data.train is required for format {cfg.data.format!r}")
    if data:
        missing += [p for p in cfg.data.paths() if not p.exists()]
    if checkpoint and not cfg.checkpoint_path.is_file():
        missing.append(cfg.checkpoint_path)
    if missing:
        raise ConfigError("missing paths: " + ", ".join(str(p) for p in missing))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def _limit(ds: Dataset, n: Optional[int]) -> Dataset:
    return ds if n is None else ds.subset(np.arange(min(n, len(ds))))


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """(train, test) datasets ready for the model (float32, one-hot)."""
    d = cfg.data
    if d.format == "synthetic":
        classes = d.classes or (0, 1)
        seed = d.seed if d.seed is not None else cfg.seed
        images, labels = synthetic_cifar(d.n_per_class + d.test_per_class, classes, seed, d.jitter, d.noise)
        remap = {c: i for i, c in enumerate(classes)}
        y = one_hot([remap[int(c)] for c in labels], len(classes))
        # per-class split keeps both parts balanced
        is_train = np.zeros(len(labels), dtype=bool)
        for c in classes:
            is_train[np.flatnonzero(labels == c)[: d.n_per_class]] = True
        ds = Dataset(preprocess(images), y)
        train_ds, test_ds = ds.subset(np.flatnonzero(is_train)), ds.subset(np.flatnonzero(~is_train))
    elif d.format == "cifar10":
        raw = load_cifar10(d.train)
        if d.test:
            extra = load_cifar10(d.test)
            raw = Dataset(np.concatenate([raw.inputs, extra.inputs]), np.concatenate([raw.labels, extra.labels]), np.concatenate([raw.splits, np.full(len(extra), "test", dtype=object)]))
        if d.classes:
            raw = raw.select_classes(d.classes)
        ds = Dataset(preprocess(raw.inputs), raw.labels.astype(np.float32), raw.splits)
        train_ds, test_ds = ds.split("train"), ds.split("test")
        if len(test_ds) == 0:
            raise DataError(f"{d.train}: no test_batch.bin found for evaluation")
    else:
        train_ds = load_tensors(d.train)
        test_ds = load_tensors(d.test, num_classes=train_ds.num_classes) if d.test else train_ds
        if d.classes:
            train_ds, test_ds = train_ds.select_classes(d.classes), test_ds.select_classes(d.classes)
    train_ds = _limit(train_ds, d.limit)
    test_ds = _limit(test_ds, d.test_limit)
    return _as_float32(train_ds), _as_float32(test_ds)


def _as_float32(ds: Dataset) -> Dataset:
    return Dataset(np.asarray(ds.inputs, dtype=np.float32), np.asarray(ds.labels, dtype=np.float32), ds.splits)


def _check_fit(spec: ModelSpec, *datasets: Dataset) -> None:
    for ds in datasets:
        if ds.inputs.shape[1:] != spec.input_shape:
            raise DataError(f"data samples have shape {ds.inputs.shape[1:]}, model {spec.name} expects {spec.input_shape}")
        k = int(np.prod(spec.output_shape))
        if ds.num_classes != k:
            raise DataError(f"data has {ds.num_classes} classes, model {spec.name} emits {k}")


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _cell(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_csv(path: Path, header: list[str], rows: list[list[Any]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_dat(path: Path, header: list[str], rows: list[list[Any]]) -> None:
    """Whitespace-delimited columns with a ``#`` header, readable by gnuplot."""
    lines = ["# " + " ".join(header)]
    lines += [" ".join(_cell(v) if v is not None else "NaN" for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class EvalReport:
    command: str
    config: dict
    clean_accuracy: Optional[float] = None
    attacks: list[dict] = field(default_factory=list)
    folds: list[float] = field(default_factory=list)
    fold_variance: Optional[float] = None
    footprint: list[dict] = field(default_factory=list)
    mean_jr: Optional[float] = None
    extra: dict = field(default_factory=dict)
    version: str = __version__

    def as_dict(self) -> dict:
        accs = [self.clean_accuracy, *self.folds, *(a["accuracy"] for a in self.attacks), *(a["clean_accuracy"] for a in self.attacks)]
        for a in accs:
            if a is not None and not 0.0 <= a <= 100.0:
                raise ValueError(f"accuracy {a} outside [0, 100]")
        return {
            "command": self.command,
            "version": self.version,
            "config": self.config,
            "clean_accuracy": self.clean_accuracy,
            "attacks": self.attacks,
            "folds": self.folds,
            "fold_variance": self.fold_variance,
            "footprint": self.footprint,
            "mean_jr": self.mean_jr,
            **self.extra,
        }


class Run:
    """Output directory plus wall-clock bookkeeping for one command."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.out = cfg.out
        self.timings: dict[str, float] = {}
        self._start = time.perf_counter()

    def open(self) -> "Run":
        self.out.mkdir(parents=True, exist_ok=True)
        return self

    def timed(self, label: str, t0: float) -> None:
        self.timings[label] = time.perf_counter() - t0

    def finish(self, report: EvalReport, name: str = "report.json") -> dict:
        d = report.as_dict()
        write_json(self.out / name, d)
        meta = {
            "command": self.command,
            "version": __version__,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "wall_time": time.perf_counter() - self._start,
            "timings": self.timings,
        }
        write_json(self.out / f"{Path(name).stem}.meta.json", meta)
        return d


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load_trained(cfg: RunConfig) -> Model:
    model = build(ModelSpec.load(cfg.model), seed=cfg.seed)
    model.load(cfg.checkpoint_path)
    return model


def _check_surface(cfg: RunConfig, attacks) -> None:
    white = [a.label for a in attacks if a.white_box]
    if white and not cfg.gradient_access:
        raise ConfigError(f"gradient access is disabled for this run; white-box attacks requested: {white}")


def _attack_rows(run: Run, model: Model, test: Dataset, attacks, persist: bool = True) -> list[dict]:
    cfg = run.cfg
    n = min(cfg.attack_samples, len(test))
    x, y = test.inputs[:n], test.labels[:n]
    rows = []
    for a in attacks:
        t0 = time.perf_counter()
        rep = run_attack(model, x, y, a)
        run.timed(f"attack:{a.label}", t0)
        if persist:
            rep.batch.save(run.out / "adversarial", a.label)
        rows.append(rep.summary())
    return rows


def _footprint_rows(spec: ModelSpec, schemes) -> list[dict]:
    reports = [footprint(spec, s) for s in schemes]
    base = reports[0].total_bytes if reports else 0.0
    out = []
    for r in reports:
        d = r.as_dict()
        d["ratio_to_first"] = (r.total_bytes / base) if base else None
        out.append(d)
    return out


def cmd_train(cfg: RunConfig) -> dict:
    require_paths(cfg)
    spec = ModelSpec.load(cfg.model)
    train_ds, test_ds = load_data(cfg)
    _check_fit(spec, train_ds, test_ds)
    run = Run(cfg, "train")
    model = build(spec, seed=cfg.seed)
    t0 = time.perf_counter()
    log = train(model, train_ds, cfg.train, validation=test_ds)
    run.timed("train", t0)
    run.open()
    model.save(run.out / "model.qrb")
    (run.out / "train_log.csv").write_text(log.to_csv(), encoding="utf-8")
    write_json(run.out / "train_log.json", log.summary())
    write_dat(run.out / "train_log.dat", ["epoch", "loss", "acc", "jr", "lr"], [[r.epoch, r.loss, r.accuracy, r.jr, r.lr] for r in log.records])
    probe = test_ds.inputs[: cfg.train.jr_probe_size] if cfg.train.jr_probe_size else test_ds.inputs[:0]
    report = EvalReport(
        command="train",
        config=cfg.to_dict(),
        clean_accuracy=model.accuracy(test_ds.inputs, test_ds.labels),
        mean_jr=mean_jr(model, probe) if len(probe) else None,
        footprint=_footprint_rows(spec, [None]),
        extra={"train_accuracy": model.accuracy(train_ds.inputs, train_ds.labels), "train_log": log.summary()},
    )
    return run.finish(report)


def cmd_attack(cfg: RunConfig) -> dict:
    require_paths(cfg, checkpoint=True)
    if not cfg.attacks:
        raise ConfigError("no attacks configured")
    spec = ModelSpec.load(cfg.model)
    _, test = load_data(cfg)
    _check_fit(spec, test)
    model = _load_trained(cfg)
    run = Run(cfg, "attack")
    _check_surface(cfg, cfg.attacks)
    run.open()
    rows = _attack_rows(run, model, test, cfg.attacks)
    _write_attack_table(run.out / "attack.csv", rows)
    n = min(cfg.attack_samples, len(test))
    report = EvalReport("attack", cfg.to_dict(), clean_accuracy=model.accuracy(test.inputs[:n], test.labels[:n]), attacks=rows)
    return run.finish(report, "attack.json")


ATTACK_COLUMNS = ["attack", "kind", "norm", "eps", "samples", "clean_accuracy", "accuracy", "mean_norm", "mean_queries", "errors"]


def _write_attack_table(path: Path, rows: list[dict]) -> None:
    write_csv(path, ATTACK_COLUMNS, [[r["attack"], r["config"]["kind"], r["config"]["norm"], r["config"]["eps"], r["samples"], r["clean_accuracy"], r["accuracy"], r["mean_norm"], r["mean_queries"], r["errors"]] for r in rows])


def cmd_evaluate(cfg: RunConfig) -> dict:
    require_paths(cfg, checkpoint=True)
    spec = ModelSpec.load(cfg.model)
    _, test = load_data(cfg)
    _check_fit(spec, test)
    model = _load_trained(cfg)
    run = Run(cfg, "evaluate")
    _check_surface(cfg, cfg.attacks)
    run.open()
    rows = _attack_rows(run, model, test, cfg.attacks)
    _write_attack_table(run.out / "robustness.csv", rows)
    probe = test.inputs[: max(cfg.train.jr_probe_size, 1)]
    fp = _footprint_rows(spec, [None, *cfg.schemes])
    write_csv(run.out / "footprint.csv", ["scheme", "params", "bytes", "kb"], [[r["scheme"], r["total_params"], r["total_bytes"], r["total_kb"]] for r in fp])
    report = EvalReport(
        "evaluate",
        cfg.to_dict(),
        clean_accuracy=model.accuracy(test.inputs, test.labels),
        attacks=rows,
        footprint=fp,
        mean_jr=mean_jr(model, probe),
    )
    return run.finish(report)


def cmd_sweep(cfg: RunConfig) -> dict:
    require_paths(cfg, checkpoint=True)
    spec = ModelSpec.load(cfg.model)
    _, test = load_data(cfg)
    _check_fit(spec, test)
    model = _load_trained(cfg)
    s = cfg.sweep
    attacks = [AttackConfig(kind="fgsm", norm=s.fgsm_norm, eps=e, seed=cfg.seed) for e in s.fgsm_eps]
    attacks += [AttackConfig(kind="pgd", norm="linf", eps=e, alpha=s.pgd_alpha, iterations=s.pgd_iterations, seed=cfg.seed) for e in s.pgd_eps]
    run = Run(cfg, "sweep")
    _check_surface(cfg, attacks)
    run.open()
    rows = _attack_rows(run, model, test, attacks, persist=False)
    _write_attack_table(run.out / "sweep.csv", rows)
    for kind in ("fgsm", "pgd"):
        sel = [r for r in rows if r["config"]["kind"] == kind]
        write_dat(run.out / f"sweep_{kind}.dat", ["eps", "accuracy", "mean_norm"], [[r["config"]["eps"], r["accuracy"], r["mean_norm"]] for r in sel])
    n = min(cfg.attack_samples, len(test))
    report = EvalReport("sweep", cfg.to_dict(), clean_accuracy=model.accuracy(test.inputs[:n], test.labels[:n]), attacks=rows)
    return run.finish(report, "sweep.json")


def cmd_kfold(cfg: RunConfig) -> dict:
    require_paths(cfg)
    spec = ModelSpec.load(cfg.model)
    train_ds, _ = load_data(cfg)
    _check_fit(spec, train_ds)
    plan = kfold(len(train_ds), cfg.kfold_k, cfg.seed)
    run = Run(cfg, "kfold")
    accs = []
    for f, (tr, va) in enumerate(plan):
        t0 = time.perf_counter()
        model = build(spec, seed=cfg.seed)
        train(model, train_ds.subset(tr), cfg.train)
        accs.append(model.accuracy(train_ds.inputs[va], train_ds.labels[va]))
        run.timed(f"fold{f}", t0)
    var = fold_variance(accs)
    run.open()
    procedure = spec.name
    write_csv(run.out / "kfold_folds.csv", ["fold", "size", "accuracy"], [[f, plan.sizes[f], a] for f, a in enumerate(accs)])
    write_csv(run.out / "kfold.csv", ["procedure", "k", "mean_accuracy", "variance"], [[procedure, plan.k, float(np.mean(accs)), var]])
    write_dat(run.out / "kfold.dat", ["fold", "accuracy"], [[f, a] for f, a in enumerate(accs)])
    report = EvalReport("kfold", cfg.to_dict(), folds=accs, fold_variance=var, extra={"fold_sizes": plan.sizes})
    return run.finish(report, "kfold.json")


def cmd_footprint(cfg: RunConfig) -> dict:
    if not cfg.model.is_file():
        raise ConfigError(f"missing paths: {cfg.model}")
    spec = ModelSpec.load(cfg.model)
    for s in cfg.schemes:
        scheme(s)
    rows = _footprint_rows(spec, cfg.schemes)
    run = Run(cfg, "footprint").open()
    write_csv(
        run.out / "footprint.csv",
        ["scheme", "params", "bytes", "packed_bytes", "kb", "ratio_to_first"],
        [[r["scheme"], r["total_params"], r["total_bytes"], r["total_packed_bytes"], r["total_kb"], r["ratio_to_first"]] for r in rows],
    )
    layer_rows = [[r["scheme"], l["name"], l["kind"], l["params"], l["bits"], l["bytes"], l["packed_bytes"]] for r in rows for l in r["layers"]]
    write_csv(run.out / "footprint_layers.csv", ["scheme", "layer", "kind", "params", "bits", "bytes", "packed_bytes"], layer_rows)
    report = EvalReport("footprint", cfg.to_dict(), footprint=rows)
    return run.finish(report, "footprint.json")


def full_precision_twin(spec: ModelSpec) -> ModelSpec:
    """Same topology with every quantizer removed (quantized_relu becomes
    relu): straight-through gradients are not derivatives of the forward map,
    so finite differences can only check the unquantized graph."""
    layers = []
    for ls in spec.layers:
        act = "relu" if ls.activation == "quantized_relu" else ls.activation
        layers.append(replace(ls, weight_quantizer=QuantizerSpec(), activation_quantizer=None, activation=act))
    return replace(spec, layers=tuple(layers))


def gradcheck_model(spec: ModelSpec, seed: int, batch: int = 2, tolerance: float = 1e-3, max_coords: Optional[int] = 24):
    """Finite-difference check of d(cross-entropy)/d(parameters, input) for a
    float64 full-precision twin of ``spec`` on one random batch."""
    model = build(full_precision_twin(spec), seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 7])
    x = Tensor(rng.uniform(0.0, 1.0, size=(batch,) + spec.input_shape), requires_grad=True, dtype=np.float64)
    y = one_hot(rng.integers(0, model.num_classes, size=batch), model.num_classes).astype(np.float64)

    def loss() -> Tensor:
        ctx = ForwardContext(training=True, rng=np.random.default_rng(0), update_stats=False)
        return ops.cross_entropy(model(x, ctx), y)

    names = [n for n, _ in model.named_parameters()] + ["input"]
    return grad_check(loss, model.parameters() + [x], tolerance=tolerance, names=names, max_coords=max_coords, rng=rng)


def cmd_gradcheck(cfg: RunConfig) -> dict:
    if not cfg.model.is_file():
        raise ConfigError(f"missing paths: {cfg.model}")
    spec = ModelSpec.load(cfg.model)
    g = cfg.gradcheck
    run = Run(cfg, "gradcheck")
    results = []
    for s in range(g.seeds):
        rep = gradcheck_model(spec, cfg.seed + s, g.batch, g.tolerance, g.max_coords)
        results.append({"seed": cfg.seed + s, **rep.as_dict()})
    run.open()
    write_csv(
        run.out / "gradcheck.csv",
        ["seed", "block", "size", "checked", "excluded_kinks", "max_rel_error", "max_abs_error"],
        [[r["seed"], b["name"], b["size"], b["checked"], b["excluded_kinks"], b["max_rel_error"], b["max_abs_error"]] for r in results for b in r["blocks"]],
    )
    passed = all(r["passed"] for r in results)
    worst = max((r["max_rel_error"] for r in results), default=0.0)
    report = EvalReport("gradcheck", cfg.to_dict(), extra={"passed": passed, "max_rel_error": worst, "seeds": results})
    return run.finish(report, "gradcheck.json")


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "kfold": cmd_kfold,
    "footprint": cmd_footprint,
    "gradcheck": cmd_gradcheck,
}

__all__ = [
    "COMMANDS",
    "ConfigError",
    "DataConfig",
    "EvalReport",
    "GradcheckConfig",
    "RunConfig",
    "SweepConfig",
    "full_precision_twin",
    "gradcheck_model",
    "load_data",
    "load_run_config",
    "parse_run_config",
    "write_csv",
    "write_dat",
    "write_json",
]
