"""uatforge: a desk-scale robust-training laboratory.

Craft universal adversarial perturbations, train models that resist them
(including the class-wise variant that keeps one perturbation per class),
and measure class-wise robustness, all on a small self-contained
float64 autodiff engine.
"""

__version__ = "0.1.0"

from .attacks import (
    AttackBudget,
    ClassWisePerturbationSet,
    CraftConfig,
    Perturbation,
    apply_classwise,
    apply_perturbation,
    craft_classwise_uaps,
    craft_uap,
    fgsm_step,
    pgd_attack,
    project_linf,
)
from .autodiff import ParameterSet, Tape, Tensor, backward, finite_diff_check
from .data import Batch, Dataset, LabeledSample, generate_synthetic, iterate_batches, load_cifar_binary, load_idx, partition_by_class
from .evaluation import (
    EvalReport,
    evaluate_clean,
    evaluate_under_classwise_uap,
    evaluate_under_uap,
    export_perturbation_image,
    imbalance_metrics,
)
from .experiment import ExperimentConfig, RunManifest, load_config, run_experiment
from .models import Model, ModelSpec, build_model, forward_logits, load_checkpoint, predict_class, save_checkpoint
from .training import TrainConfig, TrainLog, train, train_classwise_uat, train_pgd, train_standard, train_uat

__all__ = [
    "__version__",
    "AttackBudget",
    "Batch",
    "ClassWisePerturbationSet",
    "CraftConfig",
    "Dataset",
    "EvalReport",
    "ExperimentConfig",
    "LabeledSample",
    "Model",
    "ModelSpec",
    "ParameterSet",
    "Perturbation",
    "RunManifest",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainLog",
    "apply_classwise",
    "apply_perturbation",
    "backward",
    "build_model",
    "craft_classwise_uaps",
    "craft_uap",
    "evaluate_clean",
    "evaluate_under_classwise_uap",
    "evaluate_under_uap",
    "export_perturbation_image",
    "fgsm_step",
    "finite_diff_check",
    "forward_logits",
    "generate_synthetic",
    "imbalance_metrics",
    "iterate_batches",
    "load_cifar_binary",
    "load_checkpoint",
    "load_config",
    "load_idx",
    "partition_by_class",
    "pgd_attack",
    "predict_class",
    "project_linf",
    "run_experiment",
    "save_checkpoint",
    "train",
    "train_classwise_uat",
    "train_pgd",
    "train_standard",
    "train_uat",
]
