"""Squash anchors, manual-gradient verification, training, and attacks."""

from __future__ import annotations

import numpy as np
import pytest

from gradcheck import max_relative_error, random_case
from paretonas.evaluator import EvalStatus, EvaluationRequest
from paretonas.genotype import Genotype, LayerDescriptor, LayerType
from paretonas.toy_model import (
    NumericalDivergenceError,
    ShapeMismatchError,
    SyntheticDataset,
    ToyConfig,
    ToyEvaluator,
    ToyLayer,
    ToyModel,
    accuracy,
    fgsm,
    forward,
    loss_and_grads,
    make_blobs_dataset,
    pgd_attack,
    realize,
    squash,
    train,
)


def genotype_fixture(classes: int = 10) -> Genotype:
    return Genotype(layers=(
        LayerDescriptor(LayerType.CONV, 28, 1, 1, 3, 1, 26, 8, 1),
        LayerDescriptor(LayerType.CONV_CAPSULE, 26, 8, 1, 3, 1, 24, 16, 8),
        LayerDescriptor(LayerType.FULLY_CONNECTED_CAPSULE, 24, 16, 8, 24, 1, 1,
                        classes, 16),
    ))


# -- squash -----------------------------------------------------------------


def test_squash_zero_maps_to_zero():
    assert np.all(squash(np.zeros(8)) == 0.0)


def test_squash_unit_norm_anchor():
    v = np.zeros(4)
    v[1] = 1.0
    out = squash(v)
    assert abs(np.linalg.norm(out) - 0.25) < 1e-12
    assert np.allclose(out, 0.25 * v, atol=1e-12)


def test_squash_norm_ten_anchor():
    v = np.full(4, 5.0)  # norm 10
    out = squash(v)
    assert abs(np.linalg.norm(out) - 100.0 / 121.0) < 1e-12


def test_squash_preserves_direction_and_stays_short():
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = rng.normal(size=6) * rng.uniform(0.1, 20)
        out = squash(v)
        cos = np.dot(out, v) / (np.linalg.norm(out) * np.linalg.norm(v))
        assert cos == pytest.approx(1.0, abs=1e-9)
        assert np.linalg.norm(out) < 1.0


# -- forward ----------------------------------------------------------------


def test_forward_outputs_probabilities():
    model, x, _ = random_case(0)
    probs = forward(model, x)
    assert probs.shape == (x.shape[0], model.num_classes)
    assert np.all(probs >= 0)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_forward_rejects_wrong_width():
    model, x, _ = random_case(1)
    with pytest.raises(ShapeMismatchError):
        forward(model, np.zeros((2, model.input_dim + 1)))


def test_zero_weight_model_is_uniform():
    layer = ToyLayer(weights=np.zeros((5, 4)), bias=np.zeros(4),
                     activation="softmax")
    model = ToyModel(layers=[layer], skip_connections=(), input_dim=5,
                     num_classes=4)
    probs = forward(model, np.random.default_rng(0).uniform(size=(3, 5)))
    assert np.allclose(probs, 0.25, atol=1e-12)


# -- gradients --------------------------------------------------------------


def test_gradients_match_finite_differences():
    for seed in range(20):
        model, x, t = random_case(seed)
        assert max_relative_error(model, x, t) < 1e-4


def test_gradients_flow_through_skips():
    # Find a case whose skip connection actually exists, then check it.
    for seed in range(100):
        model, x, t = random_case(seed)
        if model.skip_connections:
            assert max_relative_error(model, x, t) < 1e-4
            return
    raise AssertionError("no case with a skip connection drawn")


# -- training ---------------------------------------------------------------


def small_dataset(classes: int = 2) -> SyntheticDataset:
    return make_blobs_dataset(classes=classes, dim=16, train_size=600,
                              test_size=200, seed=0)


def test_train_deterministic():
    data = small_dataset()
    model = realize(genotype_fixture(classes=2), input_dim=16, seed=5)
    a, hist_a = train(model, data, epochs=2, lr=0.05, seed=9)
    b, hist_b = train(model, data, epochs=2, lr=0.05, seed=9)
    assert hist_a == hist_b
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weights, lb.weights)
        assert np.array_equal(la.bias, lb.bias)


def test_train_two_class_blobs_to_high_accuracy():
    data = small_dataset()
    model = realize(genotype_fixture(classes=2), input_dim=16, seed=5)
    trained, history = train(model, data, epochs=3, lr=0.05, seed=9)
    assert history[-1] < history[0]
    assert accuracy(trained, data.x_test, data.y_test) >= 0.95


def test_train_rejects_zero_epochs():
    data = small_dataset()
    model = realize(genotype_fixture(classes=2), input_dim=16, seed=5)
    with pytest.raises(ValueError):
        train(model, data, epochs=0, lr=0.05, seed=9)


def test_train_raises_on_divergence():
    data = small_dataset()
    model = realize(genotype_fixture(classes=2), input_dim=16, seed=5)
    with pytest.raises(NumericalDivergenceError):
        train(model, data, epochs=3, lr=1e12, seed=9)


# -- attacks ----------------------------------------------------------------


def trained_small_model():
    data = small_dataset(classes=4)
    model = realize(genotype_fixture(classes=4), input_dim=16, seed=5)
    trained, _ = train(model, data, epochs=3, lr=0.05, seed=9)
    return trained, data


def test_pgd_zero_epsilon_is_identity():
    model, data = trained_small_model()
    adv = pgd_attack(model, data.x_test, data.y_test, epsilon=0.0)
    assert np.array_equal(adv, data.x_test)


def test_pgd_respects_ball_and_box():
    model, data = trained_small_model()
    for eps in (0.01, 0.1, 0.5):
        adv = pgd_attack(model, data.x_test, data.y_test, epsilon=eps)
        assert np.max(np.abs(adv - data.x_test)) <= eps + 1e-12
        assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_pgd_loss_trace_non_decreasing_on_linear_model():
    # Cross-entropy of a linear-softmax model is convex in x, and every
    # projected sign step moves along the gradient sign, so the loss can
    # never drop between iterates.
    rng = np.random.default_rng(3)
    layer = ToyLayer(weights=rng.normal(size=(6, 3)), bias=rng.normal(size=3),
                     activation="softmax")
    model = ToyModel(layers=[layer], skip_connections=(), input_dim=6,
                     num_classes=3)
    x = rng.uniform(0.2, 0.8, size=(20, 6))
    t = rng.integers(0, 3, size=20)
    _, losses = pgd_attack(model, x, t, epsilon=0.1, trace=True)
    assert len(losses) == 11
    for before, after in zip(losses, losses[1:]):
        assert after >= before - 1e-12


def test_pgd_reduces_accuracy():
    model, data = trained_small_model()
    clean = accuracy(model, data.x_test, data.y_test)
    adv = pgd_attack(model, data.x_test, data.y_test, epsilon=0.3)
    assert accuracy(model, adv, data.y_test) < clean


def test_fgsm_is_single_full_step_pgd():
    model, data = trained_small_model()
    a = fgsm(model, data.x_test, data.y_test, epsilon=0.05)
    b = pgd_attack(model, data.x_test, data.y_test, epsilon=0.05, alpha=0.05,
                   iters=1)
    assert np.array_equal(a, b)


# -- evaluator backend ------------------------------------------------------


TOY_CFG = ToyConfig(train_size=600, test_size=200)


def toy_request(eps, seed=0, classes=10, epochs=2):
    return EvaluationRequest(id=1, genotype=genotype_fixture(classes=classes),
                             epsilons=eps, train_epochs=epochs, seed=seed)


def test_toy_evaluator_zero_epsilon_equals_clean():
    ev = ToyEvaluator(TOY_CFG)
    res = ev.evaluate(toy_request((0.0, 0.1)))
    assert res.status is EvalStatus.OK
    assert res.adversarial_accuracies[0] == res.clean_accuracy


def test_toy_evaluator_deterministic():
    ev = ToyEvaluator(TOY_CFG)
    assert ev.evaluate(toy_request((0.0, 0.05))) == ev.evaluate(toy_request((0.0, 0.05)))


def test_toy_evaluator_huge_epsilon_near_chance():
    ev = ToyEvaluator(TOY_CFG)
    res = ev.evaluate(toy_request((1.0,)))
    assert abs(res.adversarial_accuracies[0] - 1.0 / TOY_CFG.classes) <= 0.15


def test_toy_evaluator_mean_sweep_non_increasing():
    ev = ToyEvaluator(TOY_CFG)
    grid = (0.0, 0.01, 0.05, 0.1, 0.3, 1.0)
    mean = np.zeros(len(grid))
    for seed in range(5):
        res = ev.evaluate(toy_request(grid, seed=seed))
        mean += np.asarray(res.adversarial_accuracies)
    mean /= 5
    assert all(b <= a + 1e-12 for a, b in zip(mean, mean[1:]))


def test_toy_evaluator_class_mismatch():
    ev = ToyEvaluator(TOY_CFG)
    with pytest.raises(ShapeMismatchError):
        ev.evaluate(toy_request((0.1,), classes=3))
    res = ev.evaluate_safe(toy_request((0.1,), classes=3))
    assert res.status is EvalStatus.FAILED
