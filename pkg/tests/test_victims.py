"""Victim classifier tests: closed-form gradients, probabilities, training.

Reference-model regressions (accuracy bounds, A/B disagreement, adversarial
robustness direction) live in the acceptance suite using shared checkpoints.
"""

import math

import numpy as np
import pytest

from venom.data import generate_dataset
from venom.errors import ContractViolationError
from venom.tensor import MLP, Layer, Tensor
from venom.victims import (
    VictimClassifier,
    VictimTrainConfig,
    accuracy,
    adv_train_classifier,
    classify,
    features,
    input_log_prob_grad,
    load_victim,
    log_prob,
    log_probs,
    probs,
    save_victim,
    train_classifier,
)


def _linear_clf(w, b, n_in, n_out):
    net = MLP([Layer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), "none")])
    clf = VictimClassifier(arch="a", net=net, train_seed=0)
    return clf


def _zero_clf():
    # all-zero single layer -> uniform logits for any input
    return _linear_clf(np.zeros((256, 6)), np.zeros(6), 256, 6)


def test_uniform_stub_log_prob():
    clf = _zero_clf()
    x = np.random.default_rng(0).uniform(-1, 1, (16, 16))
    for y in range(6):
        assert math.isclose(log_prob(clf, x, y), math.log(1.0 / 6.0), abs_tol=1e-12)
    assert math.isclose(math.log(1.0 / 6.0), -1.79176, abs_tol=5e-6)


def test_log_prob_normalization():
    rng = np.random.default_rng(1)
    train, test = generate_dataset(3, 5)
    clf, _ = train_classifier(train, test, "a", VictimTrainConfig(steps=30), rng)
    for i in range(10):
        x = rng.uniform(-1.5, 1.5, (16, 16))  # slightly outside [-1,1] tolerated
        total = sum(math.exp(log_prob(clf, x, y)) for y in range(6))
        assert abs(total - 1.0) <= 1e-9


def test_two_class_identity_model_symmetry():
    net = MLP([Layer(Tensor(np.eye(2), requires_grad=True), Tensor(np.zeros(2), requires_grad=True), "none")])
    clf = VictimClassifier(arch="a", net=net, train_seed=0)
    lp = log_probs(clf, np.zeros((1, 2)))
    assert np.allclose(lp, math.log(0.5))


def test_two_class_identity_model_input_gradient():
    net = MLP([Layer(Tensor(np.eye(2), requires_grad=True), Tensor(np.zeros(2), requires_grad=True), "none")])
    clf = VictimClassifier(arch="a", net=net, train_seed=0)
    x = np.zeros(2)
    xt = Tensor(x.reshape(1, 2), requires_grad=True)
    from venom.tensor import Tape, backward_grad, forward_eval, log_softmax, mul, tsum

    with Tape() as tape:
        lp = log_softmax(forward_eval(clf.net, xt))
        val = tsum(mul(lp, Tensor(np.array([[1.0, 0.0]]))))
    backward_grad(tape, val)
    assert np.allclose(xt.grad, [[0.5, -0.5]])


def test_linear_softmax_closed_form_gradient():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(256, 6))
    b = rng.normal(size=6)
    clf = _linear_clf(w, b, 256, 6)
    x = rng.uniform(-1, 1, (16, 16))
    y = 4
    grad = input_log_prob_grad(clf, x, y)
    p = probs(clf, x)[0]
    onehot = np.zeros(6)
    onehot[y] = 1.0
    expect = ((onehot - p) @ w.T).reshape(16, 16)
    assert np.max(np.abs(grad - expect)) <= 1e-12


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    train, test = generate_dataset(5, 10)
    clf, _ = train_classifier(train, test, "b", VictimTrainConfig(steps=60), rng)
    step = 1e-5
    for trial in range(20):
        x = rng.uniform(-1, 1, (16, 16))
        y = int(rng.integers(0, 6))
        grad = input_log_prob_grad(clf, x, y)
        for _ in range(3):
            r, c = int(rng.integers(0, 16)), int(rng.integers(0, 16))
            xp = x.copy(); xp[r, c] += step
            xm = x.copy(); xm[r, c] -= step
            fd = (log_prob(clf, xp, y) - log_prob(clf, xm, y)) / (2 * step)
            denom = max(abs(grad[r, c]), abs(fd), 1e-6)
            assert abs(grad[r, c] - fd) / denom <= 1e-4


def test_saturated_confidence_gradient_vanishes():
    # crank one logit far above the rest: p_y -> 1, gradient -> 0
    w = np.zeros((256, 6))
    b = np.zeros(6)
    b[2] = 50.0
    clf = _linear_clf(w, b, 256, 6)
    grad = input_log_prob_grad(clf, np.zeros((16, 16)), 2)
    assert np.max(np.abs(grad)) <= 1e-12


def test_probability_sum_gradient_is_zero():
    rng = np.random.default_rng(4)
    train, test = generate_dataset(5, 10)
    clf, _ = train_classifier(train, test, "a", VictimTrainConfig(steps=60), rng)
    x = rng.uniform(-1, 1, (16, 16))
    # d/dx Σ_y p(y|x) = Σ_y p(y|x) · d/dx log p(y|x)
    total = np.zeros((16, 16))
    p = probs(clf, x)[0]
    for y in range(6):
        total += p[y] * input_log_prob_grad(clf, x, y)
    assert np.max(np.abs(total)) <= 1e-9


def test_parameters_untouched_by_input_gradient():
    rng = np.random.default_rng(5)
    train, test = generate_dataset(5, 10)
    clf, _ = train_classifier(train, test, "a", VictimTrainConfig(steps=30), rng)
    before = [p.data.copy() for p in clf.net.parameters()]
    input_log_prob_grad(clf, rng.uniform(-1, 1, (16, 16)), 1)
    for p, snap in zip(clf.net.parameters(), before):
        assert np.array_equal(p.data, snap)
        assert p.grad is None


def test_architecture_shapes():
    rng = np.random.default_rng(6)
    train, test = generate_dataset(5, 10)
    a, _ = train_classifier(train, test, "a", VictimTrainConfig(steps=5), rng)
    b, _ = train_classifier(train, test, "b", VictimTrainConfig(steps=5), rng)
    assert [l.w.data.shape for l in a.net.layers] == [(256, 128), (128, 64), (64, 6)]
    assert [l.w.data.shape for l in b.net.layers] == [(256, 96), (96, 96), (96, 96), (96, 6)]
    assert a.feature_dim == 64 and b.feature_dim == 96
    assert features(a, train.images[:4]).shape == (4, 64)
    assert features(b, train.images[:4]).shape == (4, 96)


def test_training_learns_something():
    rng = np.random.default_rng(7)
    train, test = generate_dataset(7, 60)
    clf, report = train_classifier(train, test, "a", VictimTrainConfig(steps=400), rng)
    assert report.test_accuracy >= 0.8
    assert report.test_accuracy == accuracy(clf, test)


def test_adv_train_eps_zero_reduces_to_plain():
    train, test = generate_dataset(7, 20)
    cfg = VictimTrainConfig(steps=50)
    plain, rp = train_classifier(train, test, "a", cfg, np.random.default_rng(8))
    degen, rd = adv_train_classifier(train, test, "a", 0.0, cfg, np.random.default_rng(8))
    for pa, pb in zip(plain.net.parameters(), degen.net.parameters()):
        assert np.array_equal(pa.data, pb.data)
    assert rp.test_accuracy == rd.test_accuracy
    assert rd.perturbed_accuracy is None


def test_adv_train_reports_perturbed_accuracy():
    train, test = generate_dataset(7, 20)
    clf, report = adv_train_classifier(train, test, "a", 0.06, VictimTrainConfig(steps=100), np.random.default_rng(9))
    assert report.perturbed_accuracy is not None
    assert 0.0 <= report.perturbed_accuracy <= 1.0


def test_negative_eps_rejected():
    train, test = generate_dataset(7, 5)
    with pytest.raises(ContractViolationError):
        adv_train_classifier(train, test, "a", -0.1, VictimTrainConfig(steps=5), np.random.default_rng(0))


def test_unknown_arch_rejected():
    train, test = generate_dataset(7, 5)
    with pytest.raises(ContractViolationError):
        train_classifier(train, test, "c", VictimTrainConfig(steps=5), np.random.default_rng(0))


def test_label_bounds_checked():
    clf = _zero_clf()
    with pytest.raises(ContractViolationError):
        log_prob(clf, np.zeros((16, 16)), 6)
    with pytest.raises(ContractViolationError):
        input_log_prob_grad(clf, np.zeros((16, 16)), -1)


def test_victim_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    train, test = generate_dataset(7, 10)
    clf, _ = train_classifier(train, test, "b", VictimTrainConfig(steps=30), rng)
    p1, p2 = tmp_path / "v.vnmc", tmp_path / "v2.vnmc"
    save_victim(p1, clf)
    back = load_victim(p1)
    assert back.arch == "b"
    assert back.train_seed == clf.train_seed
    save_victim(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    x = rng.uniform(-1, 1, (3, 16, 16))
    # predictions stable through the float32 storage grid
    assert np.array_equal(classify(back, x), classify(clf, x))


def test_victim_checkpoint_wrong_shape_rejected(tmp_path):
    from venom.checkpoint import load_tensors, save_tensors

    rng = np.random.default_rng(11)
    train, test = generate_dataset(7, 5)
    clf, _ = train_classifier(train, test, "a", VictimTrainConfig(steps=5), rng)
    p = tmp_path / "v.vnmc"
    save_victim(p, clf)
    t = load_tensors(p)
    t["w1"] = t["w1"][:, :10]
    save_tensors(p, t)
    with pytest.raises(ContractViolationError, match="shape"):
        load_victim(p)


def test_training_deterministic():
    train, test = generate_dataset(7, 10)
    c1, _ = train_classifier(train, test, "a", VictimTrainConfig(steps=40), np.random.default_rng(12))
    c2, _ = train_classifier(train, test, "a", VictimTrainConfig(steps=40), np.random.default_rng(12))
    for pa, pb in zip(c1.net.parameters(), c2.net.parameters()):
        assert np.array_equal(pa.data, pb.data)
