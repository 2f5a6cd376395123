"""Projection, perturbation application, crafting, FGSM, and PGD."""

import numpy as np
import pytest

from uatforge.attacks import (
    AttackBudget,
    ClassWisePerturbationSet,
    CraftConfig,
    Perturbation,
    apply_classwise,
    apply_perturbation,
    craft_classwise_uaps,
    craft_uap,
    default_pgd_step_size,
    fgsm_step,
    load_perturbation,
    load_perturbation_set,
    pgd_attack,
    project_linf,
    save_perturbation,
    save_perturbation_set,
)
from uatforge.autodiff import Tensor, add, matmul, mul, reshape
from uatforge.data import Batch, Dataset, generate_synthetic
from uatforge.errors import CheckpointError, ConfigError, ShapeError
from uatforge.models import ModelSpec, build_model


class LinearModel:
    """Logistic-regression stand-in: logits = flatten(x) @ W."""

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=np.float64)

    def forward(self, batch):
        flat = reshape(batch, (batch.shape[0], -1))
        return matmul(flat, Tensor(self.weights))


class MirroredModel:
    """Same as LinearModel but reads 1 - x; at x = 0.5 its input gradient is
    exactly the negation of LinearModel's."""

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=np.float64)

    def forward(self, batch):
        mirrored = add(mul(batch, Tensor(-1.0)), Tensor(1.0))
        flat = reshape(mirrored, (batch.shape[0], -1))
        return matmul(flat, Tensor(self.weights))


EPS_DEFAULT = 8.0 / 255.0


# ---------------------------------------------------------------------------
# budget / config / perturbation types


def test_budget_validation():
    with pytest.raises(ConfigError):
        AttackBudget(epsilon=0.0)
    with pytest.raises(ConfigError):
        AttackBudget(epsilon=0.1, norm="l2")
    assert AttackBudget().epsilon == pytest.approx(EPS_DEFAULT)


def test_craft_config_validation():
    with pytest.raises(ConfigError):
        CraftConfig(iterations=0)
    with pytest.raises(ConfigError):
        CraftConfig(batch_size=0)
    with pytest.raises(ConfigError):
        CraftConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        CraftConfig(optimizer="lbfgs")


def test_perturbation_enforces_budget():
    budget = AttackBudget(epsilon=0.1)
    Perturbation(np.full((1, 2, 2), 0.1), budget)  # boundary ok
    with pytest.raises(ValueError, match="exceeds budget"):
        Perturbation(np.full((1, 2, 2), 0.11), budget)


def test_classwise_set_length_checked():
    budget = AttackBudget(epsilon=0.1)
    with pytest.raises(ValueError):
        ClassWisePerturbationSet([Perturbation(np.zeros((1, 2, 2)), budget)], 2)


# ---------------------------------------------------------------------------
# projection


def test_project_linf_clamps():
    eps = EPS_DEFAULT
    out = project_linf(np.array([0.05, -0.05, 0.01]), eps)
    assert out[0] == pytest.approx(eps)
    assert out[1] == pytest.approx(-eps)
    assert out[2] == 0.01


def test_project_linf_zero_unchanged():
    z = np.zeros((2, 3))
    assert np.array_equal(project_linf(z, 0.2), z)


def test_project_linf_idempotent():
    rng = np.random.default_rng(0)
    x = rng.normal(scale=0.3, size=(3, 4, 4))
    once = project_linf(x, 0.1)
    assert np.array_equal(project_linf(once, 0.1), once)


# ---------------------------------------------------------------------------
# application


def test_apply_perturbation_zero_is_identity():
    images = Tensor(np.random.default_rng(1).uniform(size=(2, 1, 3, 3)))
    pert = Perturbation(np.zeros((1, 3, 3)), AttackBudget(epsilon=0.1))
    assert np.array_equal(apply_perturbation(images, pert).data, images.data)


def test_apply_perturbation_clips_at_one():
    images = Tensor(np.ones((1, 1, 2, 2)))
    pert = Perturbation(np.full((1, 2, 2), 0.1), AttackBudget(epsilon=0.1))
    assert np.array_equal(apply_perturbation(images, pert).data, np.ones((1, 1, 2, 2)))


def test_apply_perturbation_exact_addition_midrange():
    # dyadic values keep the float addition exact
    images = Tensor(np.full((2, 1, 2, 2), 0.5))
    delta = np.full((1, 2, 2), 1.0 / 64.0)
    pert = Perturbation(delta, AttackBudget(epsilon=1.0 / 32.0))
    out = apply_perturbation(images, pert).data
    assert np.array_equal(out - images.data, np.broadcast_to(delta, out.shape))


def test_apply_perturbation_shape_mismatch():
    with pytest.raises(ShapeError):
        apply_perturbation(Tensor(np.zeros((2, 1, 3, 3))),
                           Perturbation(np.zeros((1, 2, 2)), AttackBudget(epsilon=0.1)))


def test_apply_classwise_single_class_equals_single():
    rng = np.random.default_rng(2)
    images = rng.uniform(0.2, 0.8, size=(5, 1, 3, 3))
    delta = rng.uniform(-0.05, 0.05, size=(1, 3, 3))
    budget = AttackBudget(epsilon=0.05 + 1e-12)
    batch = Batch(Tensor(images), np.zeros(5, dtype=np.int64), np.arange(5))
    single = apply_perturbation(Tensor(images), Perturbation(delta, budget)).data
    classwise = apply_classwise(batch, ClassWisePerturbationSet([Perturbation(delta, budget)], 1)).data
    assert np.array_equal(single, classwise)


def test_apply_classwise_zero_set_is_identity():
    rng = np.random.default_rng(3)
    images = rng.uniform(size=(4, 1, 2, 2))
    budget = AttackBudget(epsilon=0.1)
    pset = ClassWisePerturbationSet([Perturbation(np.zeros((1, 2, 2)), budget) for _ in range(2)], 2)
    batch = Batch(Tensor(images), np.array([0, 1, 0, 1]), np.arange(4))
    assert np.array_equal(apply_classwise(batch, pset).data, images)


def test_apply_classwise_routes_by_label():
    budget = AttackBudget(epsilon=0.2)
    d0 = np.full((1, 2, 2), 0.1)
    d1 = np.full((1, 2, 2), -0.1)
    pset = ClassWisePerturbationSet([Perturbation(d0, budget), Perturbation(d1, budget)], 2)
    images = np.full((2, 1, 2, 2), 0.5)
    batch = Batch(Tensor(images), np.array([0, 1]), np.arange(2))
    out = apply_classwise(batch, pset).data
    assert np.allclose(out[0], 0.6)
    assert np.allclose(out[1], 0.4)


def test_apply_classwise_label_out_of_range():
    budget = AttackBudget(epsilon=0.1)
    pset = ClassWisePerturbationSet([Perturbation(np.zeros((1, 2, 2)), budget)], 1)
    batch = Batch(Tensor(np.zeros((1, 1, 2, 2))), np.array([1]), np.arange(1))
    with pytest.raises(ValueError, match="out of range"):
        apply_classwise(batch, pset)


# ---------------------------------------------------------------------------
# crafting: closed-form linear oracle


def _binary_linear_setup(seed=4):
    rng = np.random.default_rng(seed)
    shape = (1, 3, 3)
    w = rng.normal(scale=1.0, size=(9, 2))
    while np.any(w[:, 1] - w[:, 0] == 0.0):  # ensure a clean sign pattern
        w = rng.normal(size=(9, 2))
    images = rng.uniform(0.3, 0.7, size=(40, 1, 3, 3))
    labels = np.zeros(40, dtype=np.int64)
    ds = Dataset(images, labels, 1, "linear-oracle")
    return LinearModel(w), ds, w


def test_craft_uap_matches_closed_form_on_linear_model():
    model, ds, w = _binary_linear_setup()
    eps = 0.05
    budget = AttackBudget(epsilon=eps)
    cfg = CraftConfig(iterations=60, batch_size=40, optimizer="sign",
                      learning_rate=eps / 10.0, seed=0)
    pert = craft_uap(model, ds, budget, cfg)
    # every class-0 sample's loss gradient points along w1 - w0, so the
    # crafted perturbation saturates at eps * sign(w1 - w0)
    expected = (eps * np.sign(w[:, 1] - w[:, 0])).reshape(1, 3, 3)
    assert np.array_equal(pert.delta, expected)

    # closed-form flip prediction: attacked accuracy counted directly
    flat = ds.images.reshape(len(ds), -1)
    margin_after = (flat + expected.reshape(-1)) @ (w[:, 0] - w[:, 1])
    predicted_acc = 100.0 * float((margin_after > 0).mean())
    from uatforge.evaluation import measure_under_uap

    got_acc, _ = measure_under_uap(model, ds, pert)
    assert got_acc == predicted_acc


def test_craft_uap_vanishing_budget_keeps_accuracy(desk_standard):
    from uatforge.evaluation import evaluate_clean, measure_under_uap

    model, train_ds, val_ds = desk_standard
    clean, _ = evaluate_clean(model, val_ds)
    budget = AttackBudget(epsilon=1e-9)
    pert = craft_uap(model, train_ds, budget, CraftConfig(iterations=20, batch_size=32, seed=0))
    attacked, _ = measure_under_uap(model, val_ds, pert)
    assert abs(attacked - clean) <= 0.1


def test_craft_uap_ball_invariant_every_iteration(desk_standard):
    model, train_ds, _ = desk_standard
    eps = 0.07
    seen = []
    original = project_linf

    def spying(delta, epsilon):
        out = original(delta, epsilon)
        seen.append(np.abs(out).max())
        return out

    import uatforge.attacks as attacks_mod

    attacks_mod_project = attacks_mod.project_linf
    attacks_mod.project_linf = spying
    try:
        craft_uap(model, train_ds, AttackBudget(epsilon=eps),
                  CraftConfig(iterations=25, batch_size=16, learning_rate=0.05, seed=3))
    finally:
        attacks_mod.project_linf = attacks_mod_project
    assert len(seen) == 25
    assert all(m <= eps for m in seen)


def test_craft_classwise_single_class_reduces_to_single():
    model, ds, _ = _binary_linear_setup(seed=6)
    budget = AttackBudget(epsilon=0.04)
    cfg = CraftConfig(iterations=30, batch_size=16, optimizer="adam", learning_rate=0.01, seed=11)
    single = craft_uap(model, ds, budget, cfg)
    pset = craft_classwise_uaps(model, ds, budget, cfg)
    assert pset.num_classes == 1
    assert np.array_equal(pset[0].delta, single.delta)


def test_craft_classwise_missing_class_named():
    images = np.random.default_rng(0).uniform(size=(4, 1, 2, 2))
    ds = Dataset(images, np.array([0, 0, 1, 1]), 3, "gap")
    model = build_model(ModelSpec("mlp", (1, 2, 2), 3, 0))
    with pytest.raises(ConfigError, match="class 2"):
        craft_classwise_uaps(model, ds, AttackBudget(epsilon=0.1),
                             CraftConfig(iterations=1, batch_size=2, seed=0))


# ---------------------------------------------------------------------------
# FGSM


def test_fgsm_zero_epsilon_identity():
    model = build_model(ModelSpec("mlp", (1, 3, 3), 2, 0))
    images = np.random.default_rng(5).uniform(size=(3, 1, 3, 3))
    out = fgsm_step(model, images, np.array([0, 1, 0]), 0.0)
    assert np.array_equal(out, images)


def test_fgsm_increases_loss_on_linear_model():
    from uatforge.autodiff import softmax_cross_entropy

    model, ds, _ = _binary_linear_setup(seed=8)
    labels = ds.labels[:16]
    images = ds.images[:16]
    adv = fgsm_step(model, images, labels, 0.05)
    loss_before = softmax_cross_entropy(model.forward(Tensor(images)), labels).item()
    loss_after = softmax_cross_entropy(model.forward(Tensor(adv)), labels).item()
    assert loss_after >= loss_before


def test_fgsm_sign_symmetry_exact():
    w = np.random.default_rng(9).normal(size=(9, 2))
    images = np.full((4, 1, 3, 3), 0.5)
    labels = np.array([0, 1, 0, 1])
    eps = 0.03
    forward_pert = fgsm_step(LinearModel(w), images, labels, eps) - images
    mirrored_pert = fgsm_step(MirroredModel(w), images, labels, eps) - images
    assert np.array_equal(forward_pert, -mirrored_pert)


# ---------------------------------------------------------------------------
# PGD


def test_pgd_default_step_size_rule():
    assert default_pgd_step_size(8 / 255, 7) == pytest.approx(2.5 * (8 / 255) / 7)


def test_pgd_single_step_equals_fgsm_bit_identically():
    model = build_model(ModelSpec("smallconv", (1, 8, 8), 3, 2))
    rng = np.random.default_rng(10)
    images = rng.uniform(size=(4, 1, 8, 8))
    labels = rng.integers(0, 3, size=4)
    eps = 0.09
    fgsm_out = fgsm_step(model, images, labels, eps)
    pgd_out = pgd_attack(model, images, labels, eps, steps=1, step_size=eps)
    assert np.array_equal(fgsm_out, pgd_out)


def test_pgd_respects_ball_and_pixel_range(desk_standard):
    model, train_ds, _ = desk_standard
    images = train_ds.images[:32]
    labels = train_ds.labels[:32]
    eps = 0.11
    adv = pgd_attack(model, images, labels, eps, steps=5)
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    assert np.abs(adv - images).max() <= eps + 1e-15


def test_pgd_stronger_than_fgsm_on_most_batches(desk_standard):
    from uatforge.autodiff import softmax_cross_entropy

    model, train_ds, _ = desk_standard
    eps = 0.1
    rng = np.random.default_rng(12)
    wins = 0
    trials = 20
    for _ in range(trials):
        idx = rng.integers(0, len(train_ds), size=24)
        x, y = train_ds.images[idx], train_ds.labels[idx]
        fgsm_loss = softmax_cross_entropy(
            model.forward(Tensor(fgsm_step(model, x, y, eps))), y).item()
        pgd_loss = softmax_cross_entropy(
            model.forward(Tensor(pgd_attack(model, x, y, eps, steps=7))), y).item()
        wins += pgd_loss >= fgsm_loss
    assert wins >= 0.9 * trials


def test_pgd_rejects_bad_steps():
    model = build_model(ModelSpec("mlp", (1, 2, 2), 2, 0))
    with pytest.raises(ConfigError):
        pgd_attack(model, np.zeros((1, 1, 2, 2)), np.array([0]), 0.1, steps=0)


# ---------------------------------------------------------------------------
# attacked-accuracy monotonicity in the budget


def test_attacked_accuracy_monotone_in_epsilon(desk_standard):
    # half budget vs full desk budget: the larger ball can only hurt more
    from uatforge.evaluation import evaluate_clean, measure_under_uap

    model, train_ds, val_ds = desk_standard
    clean, _ = evaluate_clean(model, val_ds)
    accs = {}
    for eps in (0.075, 0.15):
        budget = AttackBudget(epsilon=eps)
        pert = craft_uap(model, train_ds, budget,
                         CraftConfig(iterations=400, batch_size=32, learning_rate=0.02, seed=5))
        accs[eps], _ = measure_under_uap(model, val_ds, pert)
    assert accs[0.15] <= accs[0.075] <= clean


# ---------------------------------------------------------------------------
# perturbation files


def test_perturbation_file_roundtrip(tmp_path):
    rng = np.random.default_rng(13)
    budget = AttackBudget(epsilon=0.1)
    pert = Perturbation(rng.uniform(-0.1, 0.1, size=(3, 4, 4)), budget)
    path = tmp_path / "p.uap"
    save_perturbation(pert, path)
    loaded = load_perturbation(path)
    assert np.array_equal(loaded.delta, pert.delta)
    assert loaded.budget == budget
    save_perturbation(loaded, tmp_path / "p2.uap")
    assert path.read_bytes() == (tmp_path / "p2.uap").read_bytes()


def test_perturbation_set_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    budget = AttackBudget(epsilon=0.2)
    pset = ClassWisePerturbationSet(
        [Perturbation(rng.uniform(-0.2, 0.2, size=(1, 3, 3)), budget) for _ in range(4)], 4)
    path = tmp_path / "s.uapset"
    save_perturbation_set(pset, path)
    loaded = load_perturbation_set(path)
    assert loaded.num_classes == 4
    for c in range(4):
        assert np.array_equal(loaded[c].delta, pset[c].delta)


def test_perturbation_file_kind_mismatch(tmp_path):
    budget = AttackBudget(epsilon=0.1)
    save_perturbation(Perturbation(np.zeros((1, 2, 2)), budget), tmp_path / "p.uap")
    with pytest.raises(CheckpointError, match="kind"):
        load_perturbation_set(tmp_path / "p.uap")
