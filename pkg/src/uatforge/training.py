"""Training regimes: standard, PGD-adversarial, and the two universal ones.

The universal regimes keep persistent perturbations across the whole run
and update them concurrently with the weights: each batch does exactly
one forward/backward pass that yields both the weight gradients (used
for a descent step) and the perturbation gradients (used for an ascent
step, followed by projection back into the epsilon ball). The class-wise
variant maintains one perturbation and one ascent-optimizer state per
class; a class absent from a batch receives no update for that batch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attacks import (
    AttackBudget,
    ClassWisePerturbationSet,
    Perturbation,
    apply_classwise,
    apply_perturbation,
    default_pgd_step_size,
    pgd_attack,
    project_linf,
)
from .autodiff import Tape, Tensor, backward, softmax_cross_entropy
from .data import Dataset, iterate_batches
from .errors import ConfigError, NumericsError
from .models import Model
from .optim import (
    OPTIMIZER_TOKENS,
    adam_update,
    make_state,
    maximize_step,
    minimize_step,
    sgd_update,
)
from .rng import TAG_EPOCH, derive_seed

__all__ = [
    "TrainConfig",
    "TrainLog",
    "EpochRecord",
    "REGIMES",
    "sgd_update",
    "adam_update",
    "train_standard",
    "train_pgd",
    "train_uat",
    "train_classwise_uat",
    "train",
]

REGIMES = ("standard", "pgd", "uat", "classwise_uat")


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "standard"
    epochs: int = 10
    batch_size: int = 64
    model_optimizer: str = "sgd"
    model_lr: float = 0.01
    model_momentum: float = 0.9
    lr_decay: bool = True
    pert_optimizer: str = "adam"
    pert_lr: float = 0.01
    budget: AttackBudget | None = None
    pgd_steps: int = 7
    pgd_step_size: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}, expected one of {REGIMES}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.model_lr <= 0.0 or self.pert_lr <= 0.0:
            raise ConfigError("learning rates must be positive")
        if self.model_optimizer not in OPTIMIZER_TOKENS or self.pert_optimizer not in OPTIMIZER_TOKENS:
            raise ConfigError(f"optimizer tokens must be one of {OPTIMIZER_TOKENS}")
        if self.regime != "standard" and self.budget is None:
            raise ConfigError(f"regime {self.regime!r} needs an attack budget")
        if self.regime == "pgd":
            if self.pgd_steps < 1:
                raise ConfigError(f"pgd regime needs pgd_steps >= 1, got {self.pgd_steps}")
            if self.pgd_step_size is not None and self.pgd_step_size <= 0.0:
                raise ConfigError(f"pgd_step_size must be positive, got {self.pgd_step_size}")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    train_accuracy: float
    seconds: float
    max_nu_inf: list[float] | None = None


@dataclass
class TrainLog:
    regime: str
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        lines = ["epoch,loss,train_acc,seconds,max_nu_inf"]
        for r in self.records:
            nu = "" if r.max_nu_inf is None else repr(max(r.max_nu_inf))
            lines.append(f"{r.epoch},{r.mean_loss!r},{r.train_accuracy!r},{r.seconds:.3f},{nu}")
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")


def _lr_at(base: float, epoch: int, total: int, decay: bool) -> float:
    """Step decay: x0.1 at 50% and again at 75% of the run (runs >= 4 epochs)."""
    if not decay or total < 4:
        return base
    lr = base
    if epoch >= total // 2:
        lr *= 0.1
    if epoch >= (3 * total) // 4:
        lr *= 0.1
    return lr


def _check_regime(config: TrainConfig, expected: str) -> None:
    if config.regime != expected:
        raise ConfigError(f"config regime is {config.regime!r}, this loop trains {expected!r}")


class _EpochStats:
    def __init__(self):
        self.loss_sum = 0.0
        self.correct = 0
        self.count = 0

    def update(self, loss: float, logits: np.ndarray, labels: np.ndarray) -> None:
        b = len(labels)
        self.loss_sum += loss * b
        self.correct += int((logits.argmax(axis=1) == labels).sum())
        self.count += b

    def mean_loss(self) -> float:
        return self.loss_sum / self.count

    def accuracy(self) -> float:
        return 100.0 * self.correct / self.count


def _theta_step(model: Model, x: Tensor, labels, mparams, mstate, config, lr):
    """Forward, backward, and one descent step on the weights.

    Returns (loss value, logits array). Any tensors reachable from ``x``
    (a persistent perturbation, say) get their gradients populated by the
    same backward pass.
    """
    with Tape() as tape:
        logits = model.forward(x)
        loss = softmax_cross_entropy(logits, labels)
        backward(tape, loss)
    grads = {name: t.grad for name, t in model.params.items()}
    minimize_step(config.model_optimizer, mparams, grads, mstate, lr, config.model_momentum)
    return loss.item(), logits.data


def _epoch_loop(model, dataset, config, body, epoch_extra=None) -> TrainLog:
    """Shared epoch/batch skeleton; ``body(batch, lr)`` does one step.

    ``epoch_extra``, when given, is called after each epoch and returns
    the per-class perturbation magnitudes to log.
    """
    log = TrainLog(regime=config.regime)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = _lr_at(config.model_lr, epoch, config.epochs, config.lr_decay)
        stats = _EpochStats()
        order_seed = derive_seed(config.seed, TAG_EPOCH, epoch)
        for b, batch in enumerate(iterate_batches(dataset, config.batch_size, order_seed, shuffle=True)):
            try:
                loss, logits = body(batch, lr)
            except NumericsError as exc:
                raise NumericsError(f"non-finite loss at epoch {epoch} batch {b}: {exc}") from exc
            if not np.isfinite(loss):
                raise NumericsError(f"non-finite loss at epoch {epoch} batch {b}: loss={loss}")
            stats.update(loss, logits, batch.labels)
        record = EpochRecord(epoch, stats.mean_loss(), stats.accuracy(),
                             time.perf_counter() - t0,
                             max_nu_inf=epoch_extra() if epoch_extra else None)
        log.records.append(record)
    return log


def train_standard(model: Model, dataset: Dataset, config: TrainConfig) -> tuple[Model, TrainLog]:
    """Plain cross-entropy minimization."""
    _check_regime(config, "standard")
    mparams = {name: t.data for name, t in model.params.items()}
    mstate = make_state(config.model_optimizer)

    def body(batch, lr):
        return _theta_step(model, batch.images, batch.labels, mparams, mstate, config, lr)

    log = _epoch_loop(model, dataset, config, body)
    return model, log


def train_pgd(model: Model, dataset: Dataset, config: TrainConfig) -> tuple[Model, TrainLog]:
    """Adversarial training on PGD examples, recomputed fresh per batch."""
    _check_regime(config, "pgd")
    eps = config.budget.epsilon
    step_size = config.pgd_step_size or default_pgd_step_size(eps, config.pgd_steps)
    mparams = {name: t.data for name, t in model.params.items()}
    mstate = make_state(config.model_optimizer)

    def body(batch, lr):
        adv = pgd_attack(model, batch.images.data, batch.labels, eps,
                         config.pgd_steps, step_size)
        return _theta_step(model, Tensor(adv), batch.labels, mparams, mstate, config, lr)

    log = _epoch_loop(model, dataset, config, body)
    return model, log


def train_uat(model: Model, dataset: Dataset, config: TrainConfig
              ) -> tuple[Model, TrainLog, Perturbation]:
    """Universal adversarial training with a single persistent perturbation.

    The perturbation starts at zero, is applied to every image of every
    batch, ascends on the shared batch gradient, and is projected after
    each update; it persists across epochs and is returned at the end.
    """
    _check_regime(config, "uat")
    eps = config.budget.epsilon
    delta = np.zeros(dataset.image_shape, dtype=np.float64)
    mparams = {name: t.data for name, t in model.params.items()}
    mstate = make_state(config.model_optimizer)
    pstate = make_state(config.pert_optimizer)

    def body(batch, lr):
        nonlocal delta
        dt = Tensor(delta, requires_grad=True)
        with Tape() as tape:
            logits = model.forward(apply_perturbation(batch.images, dt))
            loss = softmax_cross_entropy(logits, batch.labels)
            backward(tape, loss)
        grads = {name: t.grad for name, t in model.params.items()}
        minimize_step(config.model_optimizer, mparams, grads, mstate, lr, config.model_momentum)
        maximize_step(config.pert_optimizer, {"delta": delta}, {"delta": dt.grad},
                      pstate, config.pert_lr)
        delta = project_linf(delta, eps)
        return loss.item(), logits.data

    log = _epoch_loop(model, dataset, config, body,
                      epoch_extra=lambda: [float(np.abs(delta).max())])
    return model, log, Perturbation(delta, config.budget)


def train_classwise_uat(model: Model, dataset: Dataset, config: TrainConfig
                        ) -> tuple[Model, TrainLog, ClassWisePerturbationSet]:
    """Universal adversarial training with one persistent perturbation per class.

    Each batch is partitioned by ground-truth class; every sample gets its
    class's perturbation; a single forward/backward yields the weight
    gradients and the gradients of every perturbation present in the
    batch. Weights descend, touched perturbations ascend (independent
    optimizer state per class) and are projected.
    """
    _check_regime(config, "classwise_uat")
    counts = dataset.class_counts()
    missing = [int(c) for c in np.nonzero(counts == 0)[0]]
    if missing:
        raise ConfigError(f"classwise_uat needs every class in the dataset; missing {missing}")
    eps = config.budget.epsilon
    n = dataset.num_classes
    nus = np.zeros((n,) + dataset.image_shape, dtype=np.float64)
    mparams = {name: t.data for name, t in model.params.items()}
    mstate = make_state(config.model_optimizer)
    pstates = [make_state(config.pert_optimizer) for _ in range(n)]

    def body(batch, lr):
        present = sorted(int(c) for c in np.unique(batch.labels))
        tensors: list[Tensor | None] = [None] * n
        for c in present:
            tensors[c] = Tensor(nus[c], requires_grad=True)
        with Tape() as tape:
            logits = model.forward(apply_classwise(batch, tensors))
            loss = softmax_cross_entropy(logits, batch.labels)
            backward(tape, loss)
        grads = {name: t.grad for name, t in model.params.items()}
        minimize_step(config.model_optimizer, mparams, grads, mstate, lr, config.model_momentum)
        for c in present:
            maximize_step(config.pert_optimizer, {"nu": nus[c]}, {"nu": tensors[c].grad},
                          pstates[c], config.pert_lr)
            nus[c] = project_linf(nus[c], eps)
        return loss.item(), logits.data

    log = _epoch_loop(model, dataset, config, body,
                      epoch_extra=lambda: [float(np.abs(nus[c]).max()) for c in range(n)])
    pset = ClassWisePerturbationSet([Perturbation(nus[c].copy(), config.budget) for c in range(n)], n)
    return model, log, pset


def train(model: Model, dataset: Dataset, config: TrainConfig):
    """Dispatch on the regime token; returns the same tuple shapes as the loops."""
    if config.regime == "standard":
        return train_standard(model, dataset, config)
    if config.regime == "pgd":
        return train_pgd(model, dataset, config)
    if config.regime == "uat":
        return train_uat(model, dataset, config)
    return train_classwise_uat(model, dataset, config)
