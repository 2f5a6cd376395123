"""Config-driven experiment orchestration.

A single YAML document describes dataset, model, training, budget,
crafting, and reporting. Validation is strict (unknown keys are errors)
and happens before any work starts. ``run_experiment`` trains every
requested regime, evaluates clean / UAP / class-wise-UAP accuracy,
writes checkpoints, perturbation files, report tables and figures, and
finally a manifest; the manifest's presence signals a complete run.

Everything except the manifest's wall-clock timings is a pure function
of (config, seed): reruns produce byte-identical artifacts.
"""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .attacks import (
    AttackBudget,
    CraftConfig,
    save_perturbation,
    save_perturbation_set,
)
from .data import Dataset, generate_synthetic, load_cifar_binary, load_idx
from .errors import ConfigError, UatforgeError
from .evaluation import (
    EvalReport,
    evaluate_under_classwise_uap,
    evaluate_under_uap,
    export_perturbation_image,
)
from .hashing import canonical_hash, file_sha256
from .models import ModelSpec, build_model, save_checkpoint
from .reporting import emit_csv, emit_svg_bars, save_report
from .rng import TAG_REPEAT, derive_seed
from .training import REGIMES, TrainConfig, train

_SECTIONS = ("experiment", "dataset", "model", "train", "budget", "craft", "report")

_KEYS = {
    "experiment": {"name", "seed", "output_dir", "regimes", "repeats"},
    "dataset": {"kind", "num_classes", "per_class", "val_per_class", "shape", "noise",
                "train_images", "train_labels", "val_images", "val_labels",
                "train_paths", "val_paths", "name"},
    "model": {"architecture", "seed"},
    "train": {"regime", "epochs", "batch_size", "model_optimizer", "model_lr",
              "model_momentum", "lr_decay", "pert_optimizer", "pert_lr",
              "pgd_steps", "pgd_step_size"},
    "budget": {"epsilon", "norm"},
    "craft": {"iterations", "batch_size", "optimizer", "learning_rate"},
    "report": {"amplification"},
}

_DATASET_KINDS = ("synthetic", "idx", "cifar10")


class StageFailure(UatforgeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    output_dir: Path
    regimes: list[str]
    repeats: int
    dataset: dict
    architecture: str
    model_seed: int
    train_args: dict
    budget: AttackBudget
    craft_args: dict
    amplification: float
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def config_hash(self) -> str:
        return canonical_hash(self.raw)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _check_keys(section: str, mapping: dict) -> None:
    _require(isinstance(mapping, dict), f"section {section!r} must be a mapping")
    for key in mapping:
        if key not in _KEYS[section]:
            raise ConfigError(f"unknown key {section}.{key}")


def parse_config(doc: dict, seed_override: int | None = None,
                 output_override=None) -> ExperimentConfig:
    _require(isinstance(doc, dict), "config must be a mapping of sections")
    for section in doc:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
    for section in ("experiment", "dataset"):
        _require(section in doc, f"config is missing the {section!r} section")
    for section, mapping in doc.items():
        _check_keys(section, mapping)

    exp = doc["experiment"]
    _require("output_dir" in exp, "experiment.output_dir is required")
    seed = int(exp.get("seed", 0)) if seed_override is None else int(seed_override)
    regimes = list(exp.get("regimes", ["standard"]))
    for regime in regimes:
        _require(regime in REGIMES, f"experiment.regimes entry {regime!r} not in {REGIMES}")
    repeats = int(exp.get("repeats", 1))
    _require(repeats >= 1, f"experiment.repeats must be >= 1, got {repeats}")

    dataset = dict(doc["dataset"])
    kind = dataset.get("kind")
    _require(kind in _DATASET_KINDS, f"dataset.kind must be one of {_DATASET_KINDS}, got {kind!r}")

    model = doc.get("model", {})
    architecture = model.get("architecture", "smallconv")
    model_seed = int(model.get("seed", seed))

    budget_args = doc.get("budget", {})
    budget = AttackBudget(epsilon=float(budget_args.get("epsilon", AttackBudget().epsilon)),
                          norm=budget_args.get("norm", "linf"))

    train_args = dict(doc.get("train", {}))
    craft_args = dict(doc.get("craft", {}))
    report_args = doc.get("report", {})
    amplification = float(report_args.get("amplification", 10.0))

    cfg = ExperimentConfig(
        name=str(exp.get("name", "experiment")),
        seed=seed,
        output_dir=Path(output_override) if output_override else Path(exp["output_dir"]),
        regimes=regimes,
        repeats=repeats,
        dataset=dataset,
        architecture=architecture,
        model_seed=model_seed,
        train_args=train_args,
        budget=budget,
        craft_args=craft_args,
        amplification=amplification,
        raw=doc,
    )
    # construct the typed configs once now so validation happens up front
    cfg_train_config(cfg, regimes[0] if regimes else "standard")
    cfg_craft_config(cfg, seed)
    ModelSpec(architecture, _dataset_shape_hint(dataset), _num_classes_hint(dataset), model_seed)
    return cfg


def load_config(path, seed_override: int | None = None, output_override=None) -> ExperimentConfig:
    path = Path(path)
    _require(path.exists(), f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text())
    return parse_config(doc, seed_override, output_override)


def _num_classes_hint(dataset: dict) -> int:
    return int(dataset.get("num_classes", 10))


def _dataset_shape_hint(dataset: dict) -> tuple[int, int, int]:
    if dataset["kind"] == "synthetic":
        shape = dataset.get("shape", [1, 12, 12])
        return tuple(int(d) for d in shape)
    if dataset["kind"] == "cifar10":
        return (3, 32, 32)
    return (1, 28, 28)  # idx; corrected after load if files differ


def cfg_train_config(cfg: ExperimentConfig, regime: str) -> TrainConfig:
    args = {k: v for k, v in cfg.train_args.items() if k != "regime" and v is not None}
    return TrainConfig(regime=regime, budget=cfg.budget, seed=cfg.seed, **args)


def cfg_craft_config(cfg: ExperimentConfig, seed: int) -> CraftConfig:
    return CraftConfig(seed=seed, **{k: v for k, v in cfg.craft_args.items() if v is not None})


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    kind = d["kind"]
    if kind == "synthetic":
        n = _num_classes_hint(d)
        shape = _dataset_shape_hint(d)
        noise = float(d.get("noise", 0.2))
        per_class = int(d.get("per_class", 100))
        val_per_class = int(d.get("val_per_class", max(1, per_class // 4)))
        name = d.get("name", "synthetic")
        train_ds = generate_synthetic(n, per_class, shape, noise, cfg.seed, "train", name)
        val_ds = generate_synthetic(n, val_per_class, shape, noise, cfg.seed, "val", name)
        return train_ds, val_ds
    if kind == "idx":
        for key in ("train_images", "train_labels", "val_images", "val_labels"):
            _require(key in d, f"dataset.{key} is required for kind 'idx'")
            _require(Path(d[key]).exists(), f"dataset file not found: {d[key]}")
        n = _num_classes_hint(d)
        name = d.get("name", "idx")
        return (load_idx(d["train_images"], d["train_labels"], n, name, "train"),
                load_idx(d["val_images"], d["val_labels"], n, name, "val"))
    for key in ("train_paths", "val_paths"):
        _require(key in d, f"dataset.{key} is required for kind 'cifar10'")
        for p in d[key]:
            _require(Path(p).exists(), f"dataset file not found: {p}")
    n = _num_classes_hint(d)
    name = d.get("name", "cifar10")
    return (load_cifar_binary(d["train_paths"], n, name, "train"),
            load_cifar_binary(d["val_paths"], n, name, "val"))


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    seeds: dict
    timings: dict
    artifacts: list

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "tool_version": self.tool_version,
                "seeds": self.seeds, "timings": self.timings, "artifacts": self.artifacts}


@contextmanager
def _stage(name: str, timings: dict):
    start = time.perf_counter()
    try:
        yield
    except StageFailure:
        raise
    except Exception as exc:
        raise StageFailure(name, exc) from exc
    finally:
        timings[name] = round(time.perf_counter() - start, 3)


def _mean_reports(reports: list[EvalReport]) -> EvalReport:
    """Elementwise mean over craft repeats (accuracies only)."""
    if len(reports) == 1:
        return reports[0]
    base = reports[0]

    def mean_of(values):
        present = [v for v in values if v is not None]
        return sum(present) / len(present) if present else None

    per_class_uap = [mean_of([r.per_class_uap[c] for r in reports])
                     for c in range(len(base.per_class_uap))]
    return replace_report(base, uap_accuracy=mean_of([r.uap_accuracy for r in reports]),
                          per_class_uap=per_class_uap)


def replace_report(report: EvalReport, **changes) -> EvalReport:
    d = report.to_dict()
    d.update(changes)
    return EvalReport.from_dict(d)


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    outdir = cfg.output_dir
    outdir.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    seeds: dict = {"experiment": cfg.seed, "model": cfg.model_seed,
                   "craft_repeats": [derive_seed(cfg.seed, TAG_REPEAT, r) for r in range(cfg.repeats)]}

    with _stage("load-data", timings):
        train_ds, val_ds = load_datasets(cfg)
    spec = ModelSpec(cfg.architecture, train_ds.image_shape, train_ds.num_classes, cfg.model_seed)

    uap_reports: dict[str, EvalReport] = {}
    classwise_reports: dict[str, EvalReport] = {}
    for regime in cfg.regimes:
        with _stage(f"train-{regime}", timings):
            model = build_model(spec)
            tc = cfg_train_config(cfg, regime)
            result = train(model, train_ds, tc)
            model = result[0]
            save_checkpoint(model, outdir / f"{regime}.ckpt",
                            meta={"epochs": tc.epochs, "config_hash": cfg.config_hash,
                                  "regime": regime})
            if regime == "uat":
                save_perturbation(result[2], outdir / "uat_perturbation.uap")
                export_perturbation_image(result[2], outdir / _pert_image_name("uat_perturbation", spec),
                                          cfg.amplification)
            elif regime == "classwise_uat":
                pset = result[2]
                save_perturbation_set(pset, outdir / "classwise_uat_perturbations.uapset")
                for c in range(pset.num_classes):
                    export_perturbation_image(
                        pset[c], outdir / _pert_image_name(f"classwise_uat_class{c}", spec),
                        cfg.amplification)

        with _stage(f"evaluate-{regime}", timings):
            repeat_reports = []
            for r in range(cfg.repeats):
                craft_cfg = cfg_craft_config(cfg, seeds["craft_repeats"][r])
                report, pert = evaluate_under_uap(model, train_ds, val_ds, cfg.budget,
                                                  craft_cfg, regime=regime)
                repeat_reports.append(report)
                if r == 0:
                    save_perturbation(pert, outdir / f"eval_uap_{regime}.uap")
            uap_reports[regime] = _mean_reports(repeat_reports)
            if cfg.repeats > 1:
                save_report_list(repeat_reports, outdir / f"eval_{regime}_repeats.json")
            cw_cfg = cfg_craft_config(cfg, seeds["craft_repeats"][0])
            cw_report, _ = evaluate_under_classwise_uap(model, train_ds, val_ds, cfg.budget,
                                                        cw_cfg, regime=regime)
            classwise_reports[regime] = cw_report
            emit_csv([uap_reports[regime]], outdir / f"eval_{regime}.csv")
            save_report(cw_report, outdir / f"eval_{regime}_classwise.json")

    with _stage("report", timings):
        emit_csv([uap_reports[r] for r in cfg.regimes], outdir / "comparison.csv")
        if "standard" in cfg.regimes:
            std, std_cw = uap_reports["standard"], classwise_reports["standard"]
            emit_svg_bars([std.per_class_clean, std.per_class_uap, std_cw.per_class_uap],
                          ["clean", "single UAP", "class-wise UAPs"],
                          outdir / "classwise_accuracy_standard.svg",
                          title="per-class accuracy, standard model")
        if "uat" in cfg.regimes and "classwise_uat" in cfg.regimes:
            emit_svg_bars([uap_reports["uat"].per_class_uap,
                           uap_reports["classwise_uat"].per_class_uap],
                          ["uat", "classwise_uat"],
                          outdir / "robust_balance.svg",
                          title="per-class accuracy under UAP, robust models")

    manifest = RunManifest(cfg.config_hash, __version__, seeds, timings, [])
    manifest_path = outdir / "manifest.json"
    for path in sorted(p for p in outdir.rglob("*") if p.is_file() and p != manifest_path):
        manifest.artifacts.append({"path": str(path.relative_to(outdir)),
                                   "sha256": file_sha256(path),
                                   "bytes": path.stat().st_size})
    manifest.artifacts.append({"path": "manifest.json"})
    manifest_path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def save_report_list(reports: list[EvalReport], path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")


def _pert_image_name(stem: str, spec: ModelSpec) -> str:
    ext = "pgm" if spec.input_shape[0] == 1 else "ppm"
    return f"{stem}.{ext}"
