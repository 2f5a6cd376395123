"""Perturbations and the attacks that produce them.

A universal perturbation is one image-shaped array, bounded in l-infinity
norm, added to every input. Class-wise sets hold one such perturbation
per ground-truth class. Crafting runs gradient ascent on the
classification loss with respect to the perturbation, projecting back
into the epsilon ball after every update, so the ball invariant holds at
every externally observable moment. FGSM and PGD are the image-dependent
baselines; both operate in [0, 1] pixel units.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, clip01, softmax_cross_entropy
from .container import read_container, write_container
from .data import Batch, Dataset, partition_by_class
from .errors import CheckpointError, ConfigError, NumericsError, ShapeError
from .optim import OPTIMIZER_TOKENS, make_state, maximize_step
from .rng import TAG_CRAFT, rng_from

DEFAULT_EPSILON = 8.0 / 255.0
SUPPORTED_NORMS = ("linf",)


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float = DEFAULT_EPSILON
    norm: str = "linf"

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.norm not in SUPPORTED_NORMS:
            raise ConfigError(f"unsupported norm {self.norm!r}, expected one of {SUPPORTED_NORMS}")


@dataclass
class Perturbation:
    delta: np.ndarray  # (C, H, W)
    budget: AttackBudget

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.delta.ndim != 3:
            raise ShapeError(f"perturbation must be (C, H, W), got {self.delta.shape}")
        if self.max_abs() > self.budget.epsilon:
            raise ValueError(
                f"perturbation exceeds budget: max |delta| = {self.max_abs()} > {self.budget.epsilon}"
            )

    def max_abs(self) -> float:
        return float(np.abs(self.delta).max())


@dataclass
class ClassWisePerturbationSet:
    perturbations: list[Perturbation]
    num_classes: int

    def __post_init__(self):
        if len(self.perturbations) != self.num_classes:
            raise ValueError(
                f"{len(self.perturbations)} perturbations for {self.num_classes} classes"
            )

    def __getitem__(self, c: int) -> Perturbation:
        return self.perturbations[c]

    def __len__(self) -> int:
        return self.num_classes

    def max_abs_per_class(self) -> list[float]:
        return [p.max_abs() for p in self.perturbations]


@dataclass(frozen=True)
class CraftConfig:
    iterations: int = 2000
    batch_size: int = 64
    optimizer: str = "adam"
    learning_rate: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZER_TOKENS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZER_TOKENS}")


# ---------------------------------------------------------------------------
# projection and application


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp elementwise into [-epsilon, +epsilon]. Idempotent."""
    if epsilon <= 0.0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    return np.clip(delta, -epsilon, epsilon)


def apply_perturbation(images, delta) -> Tensor:
    """images + delta (broadcast over the batch), clipped to [0, 1].

    ``delta`` may be a Perturbation or a Tensor; passing a grad-tracking
    Tensor lets gradients flow back to it through the unclipped pixels.
    """
    images = ad.as_tensor(images)
    dt = delta if isinstance(delta, Tensor) else Tensor(delta.delta)
    if images.shape[-3:] != dt.shape:
        raise ShapeError(f"delta shape {dt.shape} does not match image shape {images.shape}")
    return clip01(ad.add(images, dt))


def apply_classwise(batch: Batch, deltas) -> Tensor:
    """Add each sample's ground-truth-class perturbation; original order.

    ``deltas`` is a ClassWisePerturbationSet or a sequence indexed by
    class whose entries are Perturbations or Tensors.
    """
    n = len(deltas)
    if batch.labels.min() < 0 or batch.labels.max() >= n:
        raise ValueError(f"label {batch.labels.max()} out of range for {n} perturbations")
    groups = partition_by_class(batch)
    parts, positions = [], []
    for c in sorted(groups):
        images_c, pos = groups[c]
        dc = deltas[c]
        dt = dc if isinstance(dc, Tensor) else Tensor(dc.delta)
        parts.append(clip01(ad.add(Tensor(images_c), dt)))
        positions.append(pos)
    return ad.scatter_rows(parts, positions, len(batch.labels))


# ---------------------------------------------------------------------------
# universal perturbation crafting


def _perturbed_loss_grad(model, images: Tensor, delta_t: Tensor, labels) -> None:
    """One shared forward/backward; populates delta_t.grad."""
    with Tape() as tape:
        loss = softmax_cross_entropy(model.forward(apply_perturbation(images, delta_t)), labels)
        backward(tape, loss)


def craft_uap(model, dataset: Dataset, budget: AttackBudget, config: CraftConfig) -> Perturbation:
    """Gradient-ascent crafting of a single universal perturbation.

    Starts from zero; each iteration samples a batch (with replacement),
    takes one ascent step on the batch-mean loss gradient with the
    configured optimizer, and projects back into the epsilon ball.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot craft on an empty dataset")
    rng = rng_from(config.seed, TAG_CRAFT)
    delta = np.zeros(dataset.image_shape, dtype=np.float64)
    state = make_state(config.optimizer)
    for it in range(config.iterations):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        x = Tensor(dataset.images[idx])
        dt = Tensor(delta, requires_grad=True)
        try:
            _perturbed_loss_grad(model, x, dt, dataset.labels[idx])
        except NumericsError as exc:
            raise NumericsError(f"crafting diverged at iteration {it}: {exc}") from exc
        assert dt.grad is not None
        wrapped = {"delta": delta}
        maximize_step(config.optimizer, wrapped, {"delta": dt.grad}, state, config.learning_rate)
        delta = project_linf(wrapped["delta"], budget.epsilon)
    return Perturbation(delta, budget)


def craft_classwise_uaps(model, dataset: Dataset, budget: AttackBudget,
                         config: CraftConfig) -> ClassWisePerturbationSet:
    """One independent UAP per class, crafted on that class's samples only.

    Class c uses seed ``config.seed + c``, so per-class crafts are
    independent and could run concurrently without changing results.
    """
    counts = dataset.class_counts()
    for c, count in enumerate(counts):
        if count == 0:
            raise ConfigError(f"cannot craft class-wise UAPs: class {c} has no samples")
    perturbations = []
    for c in range(dataset.num_classes):
        sub = dataset.restrict_to_class(c)
        perturbations.append(craft_uap(model, sub, budget, replace(config, seed=config.seed + c)))
    return ClassWisePerturbationSet(perturbations, dataset.num_classes)


# ---------------------------------------------------------------------------
# image-dependent baselines


def _input_gradient(model, images: np.ndarray, labels) -> np.ndarray:
    x = Tensor(images, requires_grad=True)
    with Tape() as tape:
        loss = softmax_cross_entropy(model.forward(x), labels)
        backward(tape, loss)
    assert x.grad is not None
    return x.grad


def fgsm_step(model, images, labels, epsilon: float) -> np.ndarray:
    """images + epsilon * sign(input gradient), clipped to [0, 1]."""
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    grad = _input_gradient(model, images, labels)
    return np.clip(images + epsilon * np.sign(grad), 0.0, 1.0)


def default_pgd_step_size(epsilon: float, steps: int) -> float:
    return 2.5 * epsilon / steps


def pgd_attack(model, images, labels, epsilon: float, steps: int = 7,
               step_size: float | None = None) -> np.ndarray:
    """Iterated sign-gradient ascent inside the epsilon ball.

    No random start: iteration begins at the original images. Every step
    projects the accumulated perturbation into the ball around the
    originals and clips the result to [0, 1]. With steps=1 and
    step_size=epsilon this reduces to fgsm_step bit-for-bit.
    """
    if steps < 1:
        raise ConfigError(f"pgd needs steps >= 1, got {steps}")
    if step_size is None:
        step_size = default_pgd_step_size(epsilon, steps)
    if step_size <= 0.0:
        raise ConfigError(f"step_size must be positive, got {step_size}")
    x0 = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    delta = np.zeros_like(x0)
    for _ in range(steps):
        grad = _input_gradient(model, np.clip(x0 + delta, 0.0, 1.0), labels)
        delta = np.clip(delta + step_size * np.sign(grad), -epsilon, epsilon)
    return np.clip(x0 + delta, 0.0, 1.0)


# ---------------------------------------------------------------------------
# perturbation files (same container as model checkpoints)


def save_perturbation(pert: Perturbation, path) -> None:
    header = {"epsilon": pert.budget.epsilon, "norm": pert.budget.norm,
              "shape": list(pert.delta.shape)}
    write_container(path, "uap", header, pert.delta.reshape(-1))


def load_perturbation(path) -> Perturbation:
    header, payload = read_container(path, expect_kind="uap")
    shape = tuple(header["shape"])
    if payload.size != int(np.prod(shape)):
        raise CheckpointError(f"{path}: payload size {payload.size} does not match shape {shape}")
    budget = AttackBudget(epsilon=float(header["epsilon"]), norm=header["norm"])
    return Perturbation(payload.reshape(shape), budget)


def save_perturbation_set(pset: ClassWisePerturbationSet, path) -> None:
    first = pset[0]
    header = {"epsilon": first.budget.epsilon, "norm": first.budget.norm,
              "shape": list(first.delta.shape), "num_classes": pset.num_classes}
    stacked = np.stack([p.delta for p in pset.perturbations])
    write_container(path, "uap_set", header, stacked.reshape(-1))


def load_perturbation_set(path) -> ClassWisePerturbationSet:
    header, payload = read_container(path, expect_kind="uap_set")
    shape = tuple(header["shape"])
    n = int(header["num_classes"])
    if payload.size != n * int(np.prod(shape)):
        raise CheckpointError(f"{path}: payload size {payload.size} does not match {n} x {shape}")
    budget = AttackBudget(epsilon=float(header["epsilon"]), norm=header["norm"])
    deltas = payload.reshape((n,) + shape)
    return ClassWisePerturbationSet([Perturbation(d, budget) for d in deltas], n)
