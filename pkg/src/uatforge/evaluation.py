"""Clean and robust accuracy measurement, class-wise breakdowns, imbalance
statistics, and perturbation image export.

Robust numbers are measured against a fresh universal perturbation
crafted white-box against the evaluated model, on the craft split
(normally train), then applied to the evaluation split. The class-wise
variant assigns each sample the perturbation of its ground-truth class;
that needs the label at attack time, so it is a diagnostic, not a
deployable attack.

Per-class accuracy for a class with no samples is reported as absent
(None), never as 0, so imbalance statistics stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import (
    AttackBudget,
    ClassWisePerturbationSet,
    CraftConfig,
    Perturbation,
    craft_classwise_uaps,
    craft_uap,
)
from .autodiff import Tensor
from .data import Dataset
from .errors import ConfigError, ShapeError
from .hashing import canonical_hash
from .models import Model

EXPORT_AMPLIFICATION = 10.0


@dataclass
class EvalReport:
    model_id: str
    regime: str
    dataset_name: str
    split: str
    clean_accuracy: float
    uap_accuracy: float | None
    per_class_clean: list[float | None]
    per_class_uap: list[float | None]
    class_counts: list[int]
    imbalance: dict = field(default_factory=dict)
    attack: str = "none"
    epsilon: float | None = None
    craft_config_hash: str | None = None

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "regime": self.regime,
            "dataset_name": self.dataset_name,
            "split": self.split,
            "clean_accuracy": self.clean_accuracy,
            "uap_accuracy": self.uap_accuracy,
            "per_class_clean": self.per_class_clean,
            "per_class_uap": self.per_class_uap,
            "class_counts": self.class_counts,
            "imbalance": self.imbalance,
            "attack": self.attack,
            "epsilon": self.epsilon,
            "craft_config_hash": self.craft_config_hash,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        return EvalReport(**d)


def _predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = np.empty(len(images), dtype=np.int64)
    for start in range(0, len(images), batch_size):
        logits = model.forward(Tensor(images[start : start + batch_size]))
        preds[start : start + batch_size] = logits.data.argmax(axis=1)
    return preds


def _accuracy_breakdown(preds: np.ndarray, labels: np.ndarray, num_classes: int
                        ) -> tuple[float, list[float | None], list[int]]:
    correct = preds == labels
    overall = 100.0 * correct.mean()
    per_class: list[float | None] = []
    counts: list[int] = []
    for c in range(num_classes):
        mask = labels == c
        n = int(mask.sum())
        counts.append(n)
        per_class.append(float(100.0 * correct[mask].mean()) if n else None)
    return float(overall), per_class, counts


def evaluate_clean(model: Model, dataset: Dataset) -> tuple[float, list[float | None]]:
    """Overall and per-class accuracy on unperturbed inputs."""
    preds = _predict(model, dataset.images)
    overall, per_class, _ = _accuracy_breakdown(preds, dataset.labels, dataset.num_classes)
    return overall, per_class


def measure_under_uap(model: Model, dataset: Dataset, pert: Perturbation
                      ) -> tuple[float, list[float | None]]:
    """Accuracy with one perturbation added to every image."""
    attacked = np.clip(dataset.images + pert.delta, 0.0, 1.0)
    preds = _predict(model, attacked)
    overall, per_class, _ = _accuracy_breakdown(preds, dataset.labels, dataset.num_classes)
    return overall, per_class


def measure_under_classwise(model: Model, dataset: Dataset, pset: ClassWisePerturbationSet
                            ) -> tuple[float, list[float | None]]:
    """Accuracy with each sample perturbed by its ground-truth class member."""
    deltas = np.stack([p.delta for p in pset.perturbations])
    attacked = np.clip(dataset.images + deltas[dataset.labels], 0.0, 1.0)
    preds = _predict(model, attacked)
    overall, per_class, _ = _accuracy_breakdown(preds, dataset.labels, dataset.num_classes)
    return overall, per_class


def assemble_report(model, eval_dataset, attack, epsilon, craft_config, clean, per_clean,
                    robust, per_robust, regime) -> EvalReport:
    counts = [int(n) for n in eval_dataset.class_counts()]
    present = [a for a in per_robust if a is not None]
    imbalance = imbalance_metrics(present) if len(present) >= 2 else {}
    return EvalReport(
        model_id=getattr(getattr(model, "spec", None), "architecture", "model"),
        regime=regime,
        dataset_name=eval_dataset.name,
        split=eval_dataset.split,
        clean_accuracy=clean,
        uap_accuracy=robust,
        per_class_clean=per_clean,
        per_class_uap=per_robust,
        class_counts=counts,
        imbalance=imbalance,
        attack=attack,
        epsilon=epsilon,
        craft_config_hash=canonical_hash(craft_config) if craft_config else None,
    )


def evaluate_under_uap(model: Model, craft_dataset: Dataset, eval_dataset: Dataset,
                       budget: AttackBudget, craft_config: CraftConfig,
                       regime: str = "standard") -> tuple[EvalReport, Perturbation]:
    """Craft a fresh UAP against the model, then measure clean and attacked accuracy."""
    pert = craft_uap(model, craft_dataset, budget, craft_config)
    clean, per_clean = evaluate_clean(model, eval_dataset)
    robust, per_robust = measure_under_uap(model, eval_dataset, pert)
    report = assemble_report(model, eval_dataset, "uap", budget.epsilon, craft_config,
                     clean, per_clean, robust, per_robust, regime)
    return report, pert


def evaluate_under_classwise_uap(model: Model, craft_dataset: Dataset, eval_dataset: Dataset,
                                 budget: AttackBudget, craft_config: CraftConfig,
                                 regime: str = "standard"
                                 ) -> tuple[EvalReport, ClassWisePerturbationSet]:
    """Craft per-class UAPs and measure the label-matched diagnostic accuracy."""
    pset = craft_classwise_uaps(model, craft_dataset, budget, craft_config)
    clean, per_clean = evaluate_clean(model, eval_dataset)
    robust, per_robust = measure_under_classwise(model, eval_dataset, pset)
    report = assemble_report(model, eval_dataset, "classwise_uap", budget.epsilon, craft_config,
                     clean, per_clean, robust, per_robust, regime)
    return report, pset


def imbalance_metrics(per_class: list[float]) -> dict:
    """Population std, min, max, and range of a per-class accuracy vector."""
    values = [v for v in per_class if v is not None]
    if len(values) < 2:
        raise ValueError(f"need at least two per-class values, got {len(values)}")
    arr = np.asarray(values, dtype=np.float64)
    return {
        "std": float(arr.std()),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "range": float(arr.max() - arr.min()),
    }


def export_perturbation_image(pert: Perturbation, path, amplification: float = EXPORT_AMPLIFICATION) -> None:
    """Write the perturbation as a binary PPM (3 channels) or PGM (1 channel).

    The perturbation is scaled by ``amplification`` relative to its
    budget and mapped affinely onto bytes, saturating outside the budget
    window: -epsilon maps to 0, zero to 128, +epsilon to 255.
    """
    if amplification <= 0.0:
        raise ConfigError(f"amplification must be positive, got {amplification}")
    c, h, w = pert.delta.shape
    scaled = pert.delta * (amplification / pert.budget.epsilon)
    values = np.floor(127.5 * (1.0 + scaled) + 0.5)
    bytes_ = np.clip(values, 0, 255).astype(np.uint8)
    if c == 1:
        header = f"P5\n{w} {h}\n255\n".encode("ascii")
        body = bytes_[0].tobytes()
    elif c == 3:
        header = f"P6\n{w} {h}\n255\n".encode("ascii")
        body = bytes_.transpose(1, 2, 0).tobytes()
    else:
        raise ShapeError(f"can only export 1- or 3-channel perturbations, got {c}")
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)
