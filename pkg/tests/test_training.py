"""Optimizers and the four training regimes."""

import numpy as np
import pytest

from uatforge.attacks import AttackBudget
from uatforge.data import generate_synthetic
from uatforge.errors import ConfigError
from uatforge.models import ModelSpec, build_model
from uatforge.optim import AdamState, SgdState, adam_update, sgd_update
from uatforge.training import (
    TrainConfig,
    train,
    train_classwise_uat,
    train_pgd,
    train_standard,
    train_uat,
)

BUDGET = AttackBudget(epsilon=0.1)


def small_data(noise=0.15, n=4, per_class=20, seed=0):
    return generate_synthetic(n, per_class, (1, 8, 8), noise, seed)


# ---------------------------------------------------------------------------
# optimizers


def test_sgd_basic_step():
    params = {"p": np.array([1.0])}
    sgd_update(params, {"p": np.array([2.0])}, SgdState(), lr=0.1, momentum=0.0)
    assert params["p"][0] == pytest.approx(0.8)


def test_sgd_zero_gradient_no_change():
    params = {"p": np.array([3.0, -1.0])}
    sgd_update(params, {"p": np.zeros(2)}, SgdState(), lr=0.5, momentum=0.0)
    assert params["p"].tolist() == [3.0, -1.0]


def test_sgd_momentum_recurrence_matches_definition():
    # v <- m*v + g; p <- p - lr*v, checked against a hand recurrence
    params = {"p": np.array([1.0])}
    state = SgdState()
    p_ref, v_ref = 1.0, 0.0
    for _ in range(5):
        g = 2.0 * p_ref
        v_ref = 0.9 * v_ref + g
        p_ref = p_ref - 0.1 * v_ref
        sgd_update(params, {"p": np.array([2.0 * params["p"][0]])}, state, lr=0.1, momentum=0.9)
        assert params["p"][0] == pytest.approx(p_ref)


def test_sgd_quadratic_bowl_converges():
    params = {"p": np.array([1.0])}
    state = SgdState()
    for _ in range(200):
        sgd_update(params, {"p": 2.0 * params["p"]}, state, lr=0.4, momentum=0.9)
    assert abs(params["p"][0]) < 1e-3


def test_adam_first_step_magnitude_near_lr():
    for g in (0.003, 0.5, 40.0):
        params = {"p": np.array([1.0])}
        adam_update(params, {"p": np.array([g])}, AdamState(), lr=0.01)
        step = 1.0 - params["p"][0]
        assert 0.009 <= step <= 0.01


def test_adam_zero_gradient_no_change():
    params = {"p": np.array([2.0])}
    state = AdamState()
    for _ in range(3):
        adam_update(params, {"p": np.zeros(1)}, state, lr=0.1)
    assert params["p"][0] == 2.0


def test_adam_quadratic_bowl_converges():
    params = {"p": np.array([1.0])}
    state = AdamState()
    for _ in range(500):
        adam_update(params, {"p": 2.0 * params["p"]}, state, lr=0.05)
    assert abs(params["p"][0]) < 1e-3


def test_optimizer_shape_mismatch():
    with pytest.raises(ConfigError, match="shape"):
        sgd_update({"p": np.zeros(2)}, {"p": np.zeros(3)}, SgdState(), lr=0.1)


# ---------------------------------------------------------------------------
# config validation


def test_config_rejects_bad_tokens():
    with pytest.raises(ConfigError, match="unknown regime"):
        TrainConfig(regime="trades")
    with pytest.raises(ConfigError, match="epochs"):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError, match="budget"):
        TrainConfig(regime="uat")


def test_config_rejects_zero_pgd_steps():
    with pytest.raises(ConfigError, match="pgd_steps >= 1"):
        TrainConfig(regime="pgd", budget=BUDGET, pgd_steps=0)


def test_loops_reject_wrong_regime():
    ds = small_data()
    model = build_model(ModelSpec("mlp", (1, 8, 8), 4, 0))
    with pytest.raises(ConfigError, match="this loop trains"):
        train_standard(model, ds, TrainConfig(regime="uat", budget=BUDGET, epochs=1, seed=0))


# ---------------------------------------------------------------------------
# standard training


def test_train_standard_learns():
    ds = small_data(noise=0.05)
    model = build_model(ModelSpec("smallconv", (1, 8, 8), 4, 0))
    model, log = train_standard(model, ds, TrainConfig(regime="standard", epochs=6,
                                                       batch_size=16, model_lr=0.05,
                                                       lr_decay=False, seed=0))
    assert log.records[-1].train_accuracy > 95.0
    assert len(log.records) == 6


def test_train_standard_tiny_lr_is_noop():
    from uatforge.evaluation import evaluate_clean

    ds = small_data()
    spec = ModelSpec("smallconv", (1, 8, 8), 4, 0)
    fresh = build_model(spec)
    baseline, _ = evaluate_clean(fresh, ds)
    model, _ = train_standard(build_model(spec), ds,
                              TrainConfig(regime="standard", epochs=2, model_lr=1e-12, seed=0))
    after, _ = evaluate_clean(model, ds)
    assert abs(after - baseline) <= 2.0


def test_train_standard_deterministic():
    ds = small_data()
    spec = ModelSpec("smallconv", (1, 8, 8), 4, 0)
    cfg = TrainConfig(regime="standard", epochs=3, batch_size=16, seed=7)
    m1, log1 = train_standard(build_model(spec), ds, cfg)
    m2, log2 = train_standard(build_model(spec), ds, cfg)
    assert np.array_equal(m1.params.to_vector(), m2.params.to_vector())
    for a, b in zip(log1.records, log2.records):
        assert a.mean_loss == b.mean_loss
        assert a.train_accuracy == b.train_accuracy  # seconds may differ


# ---------------------------------------------------------------------------
# PGD regime


def test_train_pgd_runs_and_differs_from_standard():
    ds = small_data(noise=0.2)
    spec = ModelSpec("smallconv", (1, 8, 8), 4, 0)
    cfg_std = TrainConfig(regime="standard", epochs=3, batch_size=16, seed=0)
    cfg_pgd = TrainConfig(regime="pgd", epochs=3, batch_size=16, budget=BUDGET, seed=0)
    m_std, _ = train_standard(build_model(spec), ds, cfg_std)
    m_pgd, _ = train_pgd(build_model(spec), ds, cfg_pgd)
    assert not np.array_equal(m_std.params.to_vector(), m_pgd.params.to_vector())


# ---------------------------------------------------------------------------
# UAT regimes


def test_train_uat_perturbation_bounded_and_logged():
    ds = small_data(noise=0.2)
    model = build_model(ModelSpec("smallconv", (1, 8, 8), 4, 0))
    cfg = TrainConfig(regime="uat", epochs=3, batch_size=16, budget=BUDGET,
                      pert_lr=0.05, seed=0)
    model, log, pert = train_uat(model, ds, cfg)
    assert pert.max_abs() <= BUDGET.epsilon
    assert pert.max_abs() > 0.0
    for record in log.records:
        assert record.max_nu_inf is not None
        assert max(record.max_nu_inf) <= BUDGET.epsilon


def test_train_uat_single_forward_per_batch():
    ds = small_data(per_class=16)  # 64 samples
    model = build_model(ModelSpec("smallconv", (1, 8, 8), 4, 0))
    cfg = TrainConfig(regime="uat", epochs=2, batch_size=16, budget=BUDGET, seed=0)
    model, log, _ = train_uat(model, ds, cfg)
    batches_per_epoch = 4
    assert model.forward_calls == 2 * batches_per_epoch


def test_train_classwise_single_forward_per_batch():
    ds = small_data(per_class=16)
    model = build_model(ModelSpec("smallconv", (1, 8, 8), 4, 0))
    cfg = TrainConfig(regime="classwise_uat", epochs=2, batch_size=16, budget=BUDGET, seed=0)
    model, log, _ = train_classwise_uat(model, ds, cfg)
    assert model.forward_calls == 2 * 4


def test_train_classwise_missing_class_rejected():
    from uatforge.data import Dataset

    images = np.random.default_rng(0).uniform(size=(6, 1, 4, 4))
    ds = Dataset(images, np.array([0, 0, 1, 1, 1, 0]), 3, "gap")
    model = build_model(ModelSpec("mlp", (1, 4, 4), 3, 0))
    cfg = TrainConfig(regime="classwise_uat", epochs=1, budget=BUDGET, seed=0)
    with pytest.raises(ConfigError, match="missing \\[2\\]"):
        train_classwise_uat(model, ds, cfg)


def test_train_classwise_bounds_every_class():
    ds = small_data(noise=0.2)
    model = build_model(ModelSpec("smallconv", (1, 8, 8), 4, 0))
    cfg = TrainConfig(regime="classwise_uat", epochs=3, batch_size=16, budget=BUDGET,
                      pert_lr=0.05, seed=0)
    model, log, pset = train_classwise_uat(model, ds, cfg)
    assert pset.num_classes == 4
    for c in range(4):
        assert pset[c].max_abs() <= BUDGET.epsilon
    for record in log.records:
        assert len(record.max_nu_inf) == 4
        assert max(record.max_nu_inf) <= BUDGET.epsilon


def test_classwise_single_class_bit_identical_to_uat():
    # one-class data: the class-wise loop must reproduce the single-UAP loop
    ds = generate_synthetic(2, 24, (1, 8, 8), 0.2, seed=3)
    from uatforge.data import Dataset

    one_class = Dataset(ds.images, np.zeros(len(ds), dtype=np.int64), 1, "one", "train")
    spec = ModelSpec("smallconv", (1, 8, 8), 3, 0)
    cfg_uat = TrainConfig(regime="uat", epochs=3, batch_size=16, budget=BUDGET,
                          pert_lr=0.05, seed=9)
    cfg_cw = TrainConfig(regime="classwise_uat", epochs=3, batch_size=16, budget=BUDGET,
                         pert_lr=0.05, seed=9)
    m1, log1, pert = train_uat(build_model(spec), one_class, cfg_uat)
    m2, log2, pset = train_classwise_uat(build_model(spec), one_class, cfg_cw)
    assert np.array_equal(m1.params.to_vector(), m2.params.to_vector())
    assert np.array_equal(pert.delta, pset[0].delta)
    for a, b in zip(log1.records, log2.records):
        assert a.mean_loss == b.mean_loss
        assert a.train_accuracy == b.train_accuracy


def test_train_dispatch_matches_loops():
    ds = small_data()
    spec = ModelSpec("mlp", (1, 8, 8), 4, 0)
    cfg = TrainConfig(regime="standard", epochs=1, seed=0)
    out = train(build_model(spec), ds, cfg)
    assert len(out) == 2
    cfg = TrainConfig(regime="uat", epochs=1, budget=BUDGET, seed=0)
    out = train(build_model(spec), ds, cfg)
    assert len(out) == 3


def test_train_log_csv_format(tmp_path):
    ds = small_data()
    model = build_model(ModelSpec("mlp", (1, 8, 8), 4, 0))
    cfg = TrainConfig(regime="uat", epochs=2, budget=BUDGET, seed=0)
    _, log, _ = train_uat(model, ds, cfg)
    path = tmp_path / "log.csv"
    log.to_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "epoch,loss,train_acc,seconds,max_nu_inf"
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[0] == "0"
    assert float(first[4]) <= BUDGET.epsilon
