"""Command-line experiment runner.

Subcommands::

    latent-eval world   --config cfg.json --out run/      # decoders + datasets
    latent-eval train   --config cfg.json --out run/      # five classifier variants
    latent-eval eval    --config cfg.json --out run/      # report.json + severity CSVs
    latent-eval attack  --config cfg.json --out run/ --variant R --index 0
    latent-eval report  run/report.json other/report.json --out cmp/

Exit codes: 0 on success, 1 when some metric failed (the rest is still
written), 2 on configuration errors.  ``LATENT_EVAL_LOG_LEVEL`` sets the log
level.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import hashlib
import itertools
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .attack import AttackConfig, pgd_bounded_nested, pgd_min_norm
from .latentnoise import decayed
from .metrics import (
    MetricEstimate, adversarial_severity, clean_accuracy, correlations, encode_dataset, laga,
    lags, lara, lars, lga, lra, mean_llna, noise_accuracy,
)
from .models import ModelFormatError, ModelVersionError, encode, load_model, save_model
from .training import (
    PARENT, VARIANTS, ConventionalAugment, Dataset, TrainConfig, World, WorldConfig, make_world,
    train,
)

log = logging.getLogger("latent_eval")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2
LOG_ENV = "LATENT_EVAL_LOG_LEVEL"
SPLITS = ("train", "val", "test")
METRICS = ("clean_accuracy", "noise_accuracy", "adversarial_severity_l2",
           "adversarial_severity_linf", "LGA", "LRA", "LLNA", "LAGA", "LARA", "LAGS", "LARS")
SEVERITY_COLUMNS = ("classifier", "sample_id", "epsilon", "rho_hat",
                    "perturbed_latent_scaled_norm", "dx_l1", "dx_l2", "success")
ORIGINAL_COLUMNS = ("classifier", "sample_id", "rho_hat", "dx_l1", "dx_l2", "dx_linf", "success")
LOG_COLUMNS = ("variant", "epoch", "learning_rate", "train_loss", "val_accuracy")


class ConfigError(Exception):
    """Invalid or inconsistent configuration; maps to exit code 2."""


# --- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class MetricPlan:
    """Which metrics to compute and with how many samples.

    The first ``points`` test points feed the reconstruction-based metrics
    (LRA, LLNA; LARA and LARS use a prefix of them) and the first
    ``severity_points`` the original-space severities.
    """

    metrics: tuple[str, ...] = METRICS
    epsilons: tuple[float, ...] = (0.5, 1.0)
    rhos: tuple[float, ...] = (0.1,)
    sigma: float = 0.8
    generated: int = 2000
    points: int = 200
    noise_draws: int = 100
    threshold_samples: int = 50
    severity_samples: int = 30
    severity_points: int = 100
    attack: AttackConfig = field(default_factory=AttackConfig)
    original_attack: AttackConfig = field(default_factory=AttackConfig.original_space)

    def __post_init__(self):
        unknown = sorted(set(self.metrics) - set(METRICS))
        if unknown:
            raise ValueError(f"unknown metrics {unknown}; choose from {list(METRICS)}")
        if any(not e > 0 for e in self.epsilons):
            raise ValueError("epsilons must be positive")
        if any(not r > 0 for r in self.rhos):
            raise ValueError("rhos must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        counts = (self.generated, self.points, self.noise_draws, self.threshold_samples,
                  self.severity_samples, self.severity_points)
        if min(counts) < 1:
            raise ValueError("sample counts must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_overrides: dict[str, TrainConfig] = field(default_factory=dict)
    plan: MetricPlan = field(default_factory=MetricPlan)
    seed: int = 0

    def train_config(self, variant: str) -> TrainConfig:
        return self.train_overrides.get(variant, self.train)

    def to_dict(self) -> dict[str, Any]:
        return _jsonable(dataclasses.asdict(self))

    def world_hash(self) -> str:
        return config_hash({"world": _jsonable(dataclasses.asdict(self.world)), "seed": self.seed})

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return _jsonable(float(obj))
    return obj


def config_hash(obj) -> str:
    text = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _tuples(data: dict, keys: Sequence[str]) -> dict:
    return {k: (tuple(v) if k in keys and v is not None else v) for k, v in data.items()}


def _build(cls, data, tuple_keys=()):
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} section must be an object")
    try:
        return cls(**_tuples(data, tuple_keys))
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def _train_config(data: dict) -> TrainConfig:
    data = dict(data)
    if "augment" in data:
        data["augment"] = _build(ConventionalAugment, data["augment"])
    return _build(TrainConfig, data, ("hidden",))


def parse_config(data: dict, seed: Optional[int] = None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from parsed JSON; ``seed`` overrides the file's."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {"world", "train", "train_overrides", "plan", "seed"}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"unknown config sections {extra}")
    world = _build(WorldConfig, data.get("world", {}), ("decoder_seeds", "label_prior"))
    base = data.get("train", {})
    if not isinstance(base, dict) or not isinstance(data.get("train_overrides", {}), dict):
        raise ConfigError("train and train_overrides sections must be objects")
    train_cfg = _train_config(base)
    overrides = {}
    for variant, extra_fields in data.get("train_overrides", {}).items():
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r} in train_overrides")
        overrides[variant] = _train_config({**base, **extra_fields})
    plan_data = data.get("plan", {})
    if not isinstance(plan_data, dict):
        raise ConfigError("plan section must be an object")
    plan_data = dict(plan_data)
    if "attack" in plan_data:
        plan_data["attack"] = _build(AttackConfig, plan_data["attack"])
    if "original_attack" in plan_data:
        plan_data["original_attack"] = _original_attack(plan_data["original_attack"])
    plan = _build(MetricPlan, plan_data, ("metrics", "epsilons", "rhos"))
    seed = data.get("seed", 0) if seed is None else seed
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    return ExperimentConfig(world, train_cfg, overrides, plan, seed)


def _original_attack(data) -> AttackConfig:
    if not isinstance(data, dict):
        raise ConfigError("original_attack section must be an object")
    try:
        return AttackConfig.original_space(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"original_attack: {exc}") from exc


def load_config(path: Optional[str], seed: Optional[int]) -> ExperimentConfig:
    if path is None:
        return parse_config({}, seed)
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data, seed)


# --- files ------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _write_csv(path: Path, columns: Sequence[str], rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def _cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_world(world: World, config: ExperimentConfig, out: Path) -> Path:
    """Write decoders, datasets and a manifest under ``out/world``."""
    wdir = out / "world"
    wdir.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, pair in enumerate(world.pairs):
        name = f"decoder_{i}.bin"
        save_model(pair, wdir / name)
        files[name] = _sha256(wdir / name)
    for split in SPLITS:
        data = getattr(world, split)
        for part in ("xs", "labels", "latents"):
            name = f"{split}_{part}.npy"
            np.save(wdir / name, getattr(data, part), allow_pickle=False)
            files[name] = _sha256(wdir / name)
    manifest = {
        "config": _jsonable(dataclasses.asdict(world.config)),
        "seed": world.seed,
        "config_hash": config.world_hash(),
        "files": files,
        "version": __version__,
    }
    _write_json(wdir / "world.json", manifest)
    return wdir


def read_world(config: ExperimentConfig, out: Path) -> World:
    """Load the world under ``out/world`` after checking it matches ``config``."""
    wdir = out / "world"
    manifest_path = wdir / "world.json"
    if not manifest_path.exists():
        raise ConfigError(f"no world at {wdir}; run the 'world' command first")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("config_hash") != config.world_hash():
        raise ConfigError(f"world at {wdir} was built from a different config or seed")
    for name, digest in manifest["files"].items():
        path = wdir / name
        if not path.exists() or _sha256(path) != digest:
            raise ConfigError(f"world file {path} is missing or modified")
    try:
        pairs = tuple(load_model(wdir / f"decoder_{i}.bin") for i in range(config.world.n_classes))
    except (ModelFormatError, ModelVersionError) as exc:
        raise ConfigError(f"bad decoder file: {exc}") from exc
    splits = {
        split: Dataset(*(np.load(wdir / f"{split}_{part}.npy") for part in ("xs", "labels", "latents")))
        for split in SPLITS
    }
    return World(config.world, config.seed, pairs, splits["train"], splits["val"], splits["test"])


def models_dir(args, out: Path) -> Path:
    return Path(args.models) if args.models else out / "models"


def read_models(directory: Path, n_inputs: int) -> dict:
    models = {}
    for variant in VARIANTS:
        path = directory / f"{variant}.bin"
        if not path.exists():
            raise ConfigError(f"model file {path} not found; run the 'train' command first")
        try:
            clf = load_model(path)
        except (ModelFormatError, ModelVersionError) as exc:
            raise ConfigError(f"bad model file {path}: {exc}") from exc
        if getattr(clf, "n_inputs", None) != n_inputs:
            raise ConfigError(f"model {path} does not fit the world's input size")
        models[variant] = clf
    return models


# --- evaluation -------------------------------------------------------------------


def metric_key(est: MetricEstimate) -> str:
    """Bundle key: the metric name with its epsilon / rho, e.g. ``LAGA[eps=0.5,rho=0.1]``."""
    parts = [f"{short}={est.params[name]!r}" for name, short in (("epsilon", "eps"), ("rho", "rho"))
             if name in est.params]
    return f"{est.name}[{','.join(parts)}]" if parts else est.name


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def _metric_jobs(plan: MetricPlan, pairs, test: Dataset, severity_test: Dataset, encodings, clf,
                 prior, seed: int, variant_code: int, jobs: int):
    """Yield ``(label, thunk)`` pairs, each thunk returning a list of estimates."""
    metric_code = {name: 10 + i for i, name in enumerate(METRICS)}

    def rng(name, *extra):
        return _rng(seed, 2, variant_code, metric_code[name], *extra)

    def each_eps(name, fn):
        return lambda: [est for k, e in enumerate(plan.epsilons)
                        for est in _listify(fn(e, rng(name, k)))]

    tests = {
        "clean_accuracy": lambda: [clean_accuracy(clf, test)],
        "noise_accuracy": lambda: [noise_accuracy(clf, test, plan.sigma, rng("noise_accuracy"))],
        "adversarial_severity_l2": lambda: [adversarial_severity(
            clf, severity_test, "l2_scaled", plan.original_attack, rng("adversarial_severity_l2"),
            jobs)],
        "adversarial_severity_linf": lambda: [adversarial_severity(
            clf, severity_test, "linf_scaled", plan.original_attack,
            rng("adversarial_severity_linf"), jobs)],
        "LGA": lambda: [lga(clf, pairs, prior, plan.generated, rng("LGA"))],
        # encodings are precomputed, so LRA never draws from its generator
        "LRA": lambda: [lra(clf, pairs, test, rng("LRA"), encodings)],
        "LLNA": each_eps("LLNA", lambda e, r: mean_llna(clf, pairs, test, e, plan.noise_draws, r,
                                                        encodings)),
        "LAGA": each_eps("LAGA", lambda e, r: laga(
            clf, pairs, prior, e, list(plan.rhos), plan.threshold_samples, plan.attack, r, jobs)),
        "LARA": each_eps("LARA", lambda e, r: lara(
            clf, pairs, test.head(plan.threshold_samples), e, list(plan.rhos), plan.attack, r,
            encodings[:plan.threshold_samples], jobs)),
        "LAGS": each_eps("LAGS", lambda e, r: lags(clf, pairs, prior, e, plan.severity_samples,
                                                   plan.attack, r, jobs)),
        "LARS": each_eps("LARS", lambda e, r: lars(clf, pairs, test.head(plan.severity_samples), e,
                                                   plan.attack, r,
                                                   encodings[:plan.severity_samples], jobs)),
    }
    for name in plan.metrics:
        yield name, tests[name]


def _listify(value):
    return value if isinstance(value, list) else [value]


def evaluate_models(config: ExperimentConfig, world: World, models: dict, jobs: int = 1):
    """Run the metric plan on every classifier.

    Returns ``(bundle, severity_rows, original_rows, failed)``: the report
    dictionary (no timestamp), per-point records for the latent and
    original-space severities, and the number of failed metrics.
    """
    plan = config.plan
    test = world.test.head(plan.points)
    severity_test = world.test.head(plan.severity_points)
    needs_encodings = {"LRA", "LLNA", "LARA", "LARS"} & set(plan.metrics)
    encodings = encode_dataset(world.pairs, test, _rng(config.seed, 1), jobs) if needs_encodings else None
    prior = world.config.prior
    classifiers: dict[str, dict] = {}
    severity_rows = {"LAGS": [], "LARS": []}
    original_rows = {"adversarial_severity_l2": [], "adversarial_severity_linf": []}
    failed = 0
    for code, variant in enumerate(VARIANTS):
        clf = models[variant]
        metrics: dict[str, dict] = {}
        failures: dict[str, str] = {}
        for name, thunk in _metric_jobs(plan, world.pairs, test, severity_test, encodings, clf,
                                        prior, config.seed, code, jobs):
            log.info("evaluating %s on %s", name, variant)
            try:
                estimates = thunk()
            except Exception as exc:  # recorded in the bundle, reflected in the exit code
                log.error("%s on %s failed: %s", name, variant, exc)
                failures[name] = f"{type(exc).__name__}: {exc}"
                failed += 1
                continue
            for est in estimates:
                metrics[metric_key(est)] = est.to_dict()
                if est.name in severity_rows:
                    severity_rows[est.name].extend({"classifier": variant, **r} for r in est.records)
                elif est.name in original_rows:
                    original_rows[est.name].extend({"classifier": variant, **r} for r in est.records)
        classifiers[variant] = {"metrics": metrics, "failed": failures}
    bundle = {
        "format": "latent-eval-report",
        "provenance": {
            "seed": config.seed,
            "config_hash": config.hash(),
            "world_hash": config.world_hash(),
            "version": __version__,
            "config": config.to_dict(),
        },
        "classifiers": classifiers,
        "correlations": metric_correlations([classifiers]),
    }
    return _jsonable(bundle), severity_rows, original_rows, failed


def _value_table(classifier_maps: Sequence[dict]) -> tuple[list[str], dict[str, list]]:
    """Series per metric over all (bundle, classifier) points where every metric is defined."""
    points = [c["metrics"] for cmap in classifier_maps for c in cmap.values()]
    if not points:
        return [], {}
    names = sorted(set.intersection(*(set(p) for p in points)))
    names = [n for n in names if all(p[n]["value"] is not None for p in points)]
    return names, {n: [p[n]["value"] for p in points] for n in names}


def metric_correlations(classifier_maps: Sequence[dict]) -> list[dict]:
    """Pearson and Spearman between every pair of metrics across classifier points."""
    names, series = _value_table(classifier_maps)
    rows = []
    for a, b in itertools.combinations(names, 2):
        rows.append(_correlation_row({"metric_a": a, "metric_b": b}, series[a], series[b]))
    return rows


def _correlation_row(head: dict, a, b) -> dict:
    if len(a) < 3:
        return {**head, "n": len(a), "pearson": None, "spearman": None, "defined": False}
    c = correlations(a, b)
    return {**head, "n": len(a), "pearson": c.pearson if c.defined else None,
            "spearman": c.spearman if c.defined else None, "defined": c.defined}


def bundle_agreement(bundles: Sequence[dict], labels: Sequence[str]) -> list[dict]:
    """Per metric, correlation of its classifier series between each pair of bundles."""
    rows = []
    for (la, a), (lb, b) in itertools.combinations(list(zip(labels, bundles)), 2):
        shared = [v for v in VARIANTS if v in a["classifiers"] and v in b["classifiers"]]
        keys = [set(bundle["classifiers"][v]["metrics"]) for bundle in (a, b) for v in shared]
        names = sorted(set.intersection(*keys)) if keys else []
        for name in names:
            xs = [a["classifiers"][v]["metrics"][name]["value"] for v in shared]
            ys = [b["classifiers"][v]["metrics"][name]["value"] for v in shared]
            if any(x is None for x in xs + ys):
                continue
            rows.append(_correlation_row({"metric": name, "bundle_a": la, "bundle_b": lb}, xs, ys))
    return rows


# --- commands ---------------------------------------------------------------------


def cmd_world(args, config: ExperimentConfig) -> int:
    out = Path(args.out)
    world = make_world(config.world, config.seed)
    wdir = write_world(world, config, out)
    log.info("wrote world to %s", wdir)
    print(wdir / "world.json")
    return EXIT_OK


def cmd_train(args, config: ExperimentConfig) -> int:
    out = Path(args.out)
    world = read_world(config, out)
    mdir = models_dir(args, out)
    mdir.mkdir(parents=True, exist_ok=True)
    models, rows = {}, []
    for variant in VARIANTS:
        parent = models.get(PARENT[variant]) if PARENT[variant] else None
        log.info("training %s", variant)
        models[variant], logs = train(variant, world, config.train_config(variant), parent)
        save_model(models[variant], mdir / f"{variant}.bin")
        rows.extend(dataclasses.asdict(entry) for entry in logs)
    _write_csv(mdir / "training_log.csv", LOG_COLUMNS, rows)
    _write_json(mdir / "models.json", {
        "world_hash": config.world_hash(),
        "train_hash": config_hash({"train": _jsonable(dataclasses.asdict(config.train)),
                                   "overrides": _jsonable({k: dataclasses.asdict(v) for k, v in
                                                           config.train_overrides.items()})}),
        "files": {f"{v}.bin": _sha256(mdir / f"{v}.bin") for v in VARIANTS},
    })
    print(mdir)
    return EXIT_OK


def cmd_eval(args, config: ExperimentConfig) -> int:
    out = Path(args.out)
    world = read_world(config, out)
    models = read_models(models_dir(args, out), config.world.n_inputs)
    bundle, severity_rows, original_rows, failed = evaluate_models(config, world, models, args.jobs)
    bundle["generated_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", bundle)
    for name, rows in severity_rows.items():
        if rows:
            _write_csv(out / f"severity_{name.lower()}.csv", SEVERITY_COLUMNS, rows)
    for name, rows in original_rows.items():
        if rows:
            _write_csv(out / f"{name}.csv", ORIGINAL_COLUMNS, rows)
    print(out / "report.json")
    if failed:
        log.warning("%d metric(s) failed; see the 'failed' entries in the report", failed)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_attack(args, config: ExperimentConfig) -> int:
    out = Path(args.out)
    world = read_world(config, out)
    models = read_models(models_dir(args, out), config.world.n_inputs)
    if args.variant not in models:
        raise ConfigError(f"unknown variant {args.variant!r}")
    if not 0 <= args.index < len(world.test):
        raise ConfigError(f"index must be in [0, {len(world.test)})")
    if not args.epsilon > 0:
        raise ConfigError("epsilon must be positive")
    clf = models[args.variant]
    x, i = world.test.xs[args.index], int(world.test.labels[args.index])
    pair = world.pairs[i]
    rng = _rng(config.seed, 3, args.index)
    enc = encode(pair, x, rng)
    l1 = decayed(enc.latent, args.epsilon)
    res = pgd_min_norm(clf, pair, i, l1, config.plan.attack, rng)
    result = {
        "variant": args.variant,
        "index": args.index,
        "label": i,
        "epsilon": args.epsilon,
        "encode_residual": enc.residual,
        "rho_hat": res.rho_hat,
        "success": res.success,
        "restarts": [dataclasses.asdict(r) for r in res.trace],
    }
    if args.rho is not None:
        checks = pgd_bounded_nested(clf, pair, i, l1, [args.rho], config.plan.attack, rng)
        result["rho"] = args.rho
        result["robust_at_rho"] = not checks[0].success
    print(json.dumps(_jsonable(result), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_report(args, config: ExperimentConfig) -> int:
    bundles, labels = [], []
    for path in args.bundles:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {path}: {exc}") from exc
        if data.get("format") != "latent-eval-report":
            raise ConfigError(f"{path} is not a report bundle")
        bundles.append(data)
        labels.append(str(path))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corr = metric_correlations([b["classifiers"] for b in bundles])
    agree = bundle_agreement(bundles, labels)
    table = []
    for label, bundle in zip(labels, bundles):
        for variant, entry in bundle["classifiers"].items():
            for key, est in entry["metrics"].items():
                table.append({"bundle": label, "classifier": variant, "metric": key,
                              "value": est["value"], "ci_low": est["ci_low"],
                              "ci_high": est["ci_high"], "k": est["k"]})
    _write_json(out / "correlations.json", {"correlations": corr, "agreement": agree})
    _write_csv(out / "correlations.csv", ("metric_a", "metric_b", "n", "pearson", "spearman",
                                          "defined"), corr)
    _write_csv(out / "agreement.csv", ("metric", "bundle_a", "bundle_b", "n", "pearson",
                                       "spearman", "defined"), agree)
    _write_csv(out / "metrics.csv", ("bundle", "classifier", "metric", "value", "ci_low",
                                     "ci_high", "k"), table)
    print(out / "correlations.json")
    return EXIT_OK


COMMANDS = {"world": cmd_world, "train": cmd_train, "eval": cmd_eval, "attack": cmd_attack,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-eval", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="master seed; overrides the config")
    common.add_argument("--out", default="run", help="output directory (default: run)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for attacks")
    common.add_argument("--models", help="model directory (default: OUT/models)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("world", parents=[common], help="build decoders and datasets")
    sub.add_parser("train", parents=[common], help="train the five classifier variants")
    sub.add_parser("eval", parents=[common], help="evaluate all metrics into a report bundle")
    attack = sub.add_parser("attack", parents=[common], help="latent attack on one test point")
    attack.add_argument("--variant", default="NR", choices=VARIANTS)
    attack.add_argument("--index", type=int, default=0, help="test-set index")
    attack.add_argument("--epsilon", type=float, default=0.5)
    attack.add_argument("--rho", type=float, help="also run the threshold check at this radius")
    report = sub.add_parser("report", parents=[common], help="correlations across report bundles")
    report.add_argument("bundles", nargs="+", help="report.json files")
    return parser


def _configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        config = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
