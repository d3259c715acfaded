import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from spherenorm.errors import ConfigurationError, DimensionError
from spherenorm.gradients import Layer, MlpModel, build_mlp
from spherenorm.normalizers import NormalizerSpec
from spherenorm.robustness import (REPORT_COLUMNS, AttackConfig, accuracy, append_report,
                                   bim_attack, clip_to_ball, gaussian_eval, input_gradient,
                                   robustness_report)
from spherenorm.trainer import TrainConfig, load_datasets, train


@pytest.fixture(scope="module")
def trained():
    cfg = TrainConfig(method="bn", seed=0, max_steps=300, learning_rate=0.1, metric_every=1000)
    rec = train(cfg)
    _, test = load_datasets(cfg)
    return rec.model, test


def linear(W):
    return MlpModel([Layer(W, NormalizerSpec("none"), "identity", np.zeros(W.shape[0]))])


def test_attack_config_defaults_and_validation():
    cfg = AttackConfig("bim", epsilon=0.1)
    assert cfg.step_size == pytest.approx(0.02) and cfg.steps == 10
    with pytest.raises(ConfigurationError):
        AttackConfig("bim", epsilon=0.1, step_size=0.001, steps=10)
    with pytest.raises(ConfigurationError):
        AttackConfig("pgd")
    with pytest.raises(ConfigurationError):
        AttackConfig("gaussian", noise_std=-1.0)


def test_accuracy_examples(rng):
    X = np.array([[2.0, -1.0, 3.0], [-2.0, 1.0, -3.0]])
    assert accuracy(linear(np.eye(2)), X, [0, 1, 0]) == 1.0
    # ties go to the lowest class index
    assert accuracy(linear(np.zeros((3, 2))), X, [0, 0, 0]) == 1.0
    with pytest.raises(DimensionError):
        accuracy(linear(np.eye(2)), np.zeros((2, 0)), [])


def test_accuracy_on_permuted_labels_is_chance(trained, rng):
    model, test = trained
    labels = rng.permutation(test.labels)
    acc = accuracy(model, test.X, labels)
    assert abs(acc - 0.25) <= 0.05
    assert accuracy(model, test.X, labels) == acc


def test_gaussian_eval(trained):
    model, test = trained
    clean = accuracy(model, test.X, test.labels)
    assert gaussian_eval(model, test.X, test.labels, AttackConfig("gaussian", noise_std=0.0)) == clean
    cfg = AttackConfig("gaussian", noise_std=0.5, seed=3)
    assert gaussian_eval(model, test.X, test.labels, cfg) == gaussian_eval(model, test.X, test.labels, cfg)
    drowned = gaussian_eval(model, test.X, test.labels, AttackConfig("gaussian", noise_std=1000.0))
    assert abs(drowned - 0.25) <= 0.06


def test_zero_budget_is_identity(trained):
    model, test = trained
    res = bim_attack(model, test.X, test.labels, AttackConfig("bim", epsilon=0.0))
    assert np.array_equal(res.X_adv, test.X)
    assert res.accuracy == accuracy(model, test.X, test.labels)


def test_single_step_is_fgsm(trained):
    model, test = trained
    X, y = test.X[:, :64], test.labels[:64]
    eps = 0.1
    fgsm = X + eps * np.sign(input_gradient(model, X, y))
    res = bim_attack(model, X, y, AttackConfig("bim", epsilon=eps, step_size=eps, steps=1))
    assert np.max(np.abs(res.X_adv - fgsm)) <= 1e-15
    assert np.max(np.abs(res.X_adv - X)) <= eps


def test_linear_binary_model_closed_form(rng):
    W = rng.standard_normal((2, 5))
    X = rng.standard_normal((5, 6))
    y = np.zeros(6, dtype=int)
    alpha = 0.03
    res = bim_attack(linear(W), X, y, AttackConfig("bim", epsilon=alpha, step_size=alpha, steps=1))
    # for label 0 the loss gradient points along w_1 - w_0
    expected = alpha * np.sign(W[1] - W[0])
    assert np.allclose(res.X_adv - X, expected[:, None], atol=1e-15)


def test_zero_gradient_attack_is_flagged(rng):
    X = rng.standard_normal((3, 4))
    res = bim_attack(linear(np.zeros((2, 3))), X, [0, 1, 0, 1], AttackConfig("bim"))
    assert res.degenerate and np.array_equal(res.X_adv, X)


@given(arrays(np.float64, 20, elements=st.floats(-1e6, 1e6)),
       arrays(np.float64, 20, elements=st.floats(-1e6, 1e6)),
       st.floats(1e-12, 10.0))
def test_clip_never_exceeds_budget(x, step, eps):
    out = clip_to_ball(x + step, x, eps)
    assert np.all(np.abs(out - x) <= eps)


def test_bim_budget_bit_exact(trained):
    model, test = trained
    for eps in (0.1, 0.3, 1e-7):
        res = bim_attack(model, test.X, test.labels, AttackConfig("bim", epsilon=eps))
        assert np.max(np.abs(res.X_adv - test.X)) <= eps


def test_attack_strength_grows_with_budget(trained):
    model, test = trained
    accs = [bim_attack(model, test.X, test.labels, AttackConfig("bim", epsilon=e)).accuracy
            for e in (0.0, 0.05, 0.1)]
    assert accs[0] >= accs[1] >= accs[2]


def test_report_ordering_and_csv(trained, tmp_path):
    model, test = trained
    rep = robustness_report(model, test.X, test.labels, AttackConfig("bim", seed=1))
    assert rep.clean_acc >= rep.noise_acc >= rep.bim_acc
    assert rep.acc_diff1 == rep.clean_acc - rep.noise_acc
    assert rep.acc_diff2 == rep.clean_acc - rep.bim_acc
    path = tmp_path / "robustness.csv"
    append_report(path, rep, "bn", 0.0)
    append_report(path, rep, "bn", 5e-4)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert len(rows) == 3 and rows[1][:2] == ["bn", "0.0"] and rows[2][1] == "0.0005"
    again = robustness_report(model, test.X, test.labels, AttackConfig("bim", seed=1))
    assert again == rep


def test_untrained_model_is_near_chance(trained):
    _, test = trained
    for seed in range(3):
        model = build_mlp(test.n_features, (32, 32), 4, method="bn", seed=seed)
        rep = robustness_report(model, test.X, test.labels)
        assert abs(rep.clean_acc - 0.25) <= 0.06 and abs(rep.noise_acc - 0.25) <= 0.06
        assert abs(rep.acc_diff1) <= 0.03
        # a white-box attack still finds the random model's small margins
        assert rep.bim_acc <= rep.clean_acc
