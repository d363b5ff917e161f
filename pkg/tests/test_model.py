import math

import numpy as np
import pytest

from delaystream.model import (
    BudgetExceeded,
    BudgetLedger,
    Classifier,
    ModelConfig,
    OptimizerState,
    cross_entropy_backward,
    cross_entropy_loss,
    entropy_backward,
    entropy_loss,
    load_params_csv,
    momentum_clone_update,
    predict,
    save_params_csv,
    sgd_step,
    softmax,
    tta_adapt_clone,
)
from delaystream.selftest import numerical_gradient, random_instance, relative_error


def test_softmax_uniform_for_equal_logits():
    np.testing.assert_allclose(softmax(np.zeros((1, 4))), [[0.25] * 4])


def test_softmax_stable_for_large_logits():
    p = softmax(np.array([[1000.0, 1000.0]]))
    np.testing.assert_allclose(p, [[0.5, 0.5]])


def test_zero_model_loss_is_log_classes():
    clf = Classifier.zeros("linear", 3, 2)
    X = np.ones((4, 3))
    assert cross_entropy_loss(clf, X, [0, 1, 0, 1]) == pytest.approx(math.log(2), abs=1e-12)
    assert entropy_loss(clf, X) == pytest.approx(math.log(2), abs=1e-12)


def test_predict_ties_go_to_lowest_index():
    labels, probs, feats = predict(Classifier.zeros("mlp", 2, 3, hidden=4), np.ones((2, 2)))
    np.testing.assert_array_equal(labels, [0, 0])
    assert feats.shape == (2, 4)


def test_linear_features_are_inputs():
    clf = Classifier.initialize("linear", 3, 2, np.random.default_rng(0))
    X = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(clf.forward(X)[1], X)


def test_init_bounds():
    clf = Classifier.initialize("mlp", 16, 3, np.random.default_rng(0), hidden=4)
    assert np.all(np.abs(clf.params["W1"]) <= 0.25)
    assert np.all(np.abs(clf.params["W2"]) <= 0.5)
    assert not clf.params["b1"].any()


@pytest.mark.parametrize("arch", ["linear", "mlp"])
def test_gradients_match_finite_differences(arch):
    rng = np.random.default_rng(11)
    for _ in range(10):
        clf, X, y = random_instance(rng, arch)
        _, g = cross_entropy_backward(clf, X, y)
        assert relative_error(g, numerical_gradient(lambda c: cross_entropy_loss(c, X, y), clf)) < 1e-6
        _, g = entropy_backward(clf, X)
        assert relative_error(g, numerical_gradient(lambda c: entropy_loss(c, X), clf)) < 1e-6


def test_sgd_first_step_by_hand():
    state = OptimizerState(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    params = {"w": np.array([1.0])}
    sgd_step(state, params, {"w": np.array([2.0])})
    np.testing.assert_allclose(params["w"], [0.8])
    sgd_step(state, params, {"w": np.array([2.0])})
    # v = 0.9 * 2 + 2 = 3.8
    np.testing.assert_allclose(params["w"], [0.8 - 0.38])


def test_sgd_weight_decay_only():
    state = OptimizerState(learning_rate=0.5, momentum=0.0, weight_decay=0.1)
    params = {"w": np.array([2.0])}
    sgd_step(state, params, {"w": np.array([0.0])})
    np.testing.assert_allclose(params["w"], [1.9])


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step(OptimizerState(), {"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_momentum_clone_update():
    out = momentum_clone_update({"w": np.array([1.0])}, {"w": np.array([0.0])}, 0.99)
    np.testing.assert_allclose(out["w"], [0.99])
    out = momentum_clone_update({"w": np.array([1.0])}, {"w": np.array([3.0])}, 0.0)
    np.testing.assert_allclose(out["w"], [3.0])
    with pytest.raises(ValueError):
        momentum_clone_update({"w": np.zeros(1)}, {"w": np.zeros(1)}, 1.5)


def test_tta_leaves_original_untouched_and_lowers_entropy():
    rng = np.random.default_rng(4)
    clf = Classifier.initialize("mlp", 5, 3, rng, hidden=6)
    X = rng.normal(size=(16, 5))
    before = {k: v.copy() for k, v in clf.params.items()}
    adapted = tta_adapt_clone(clf, X, eps=1e-2)
    for k in before:
        np.testing.assert_array_equal(clf.params[k], before[k])
    assert entropy_loss(adapted, X) < entropy_loss(clf, X)


def test_loss_decreases_on_separable_batch():
    X = np.array([[2.0, 0.1], [1.5, -0.2], [-2.0, 0.3], [-1.7, -0.1]])
    y = np.array([0, 0, 1, 1])
    clf = Classifier.initialize("linear", 2, 2, np.random.default_rng(0))
    state = OptimizerState.from_config(ModelConfig())
    losses = []
    for _ in range(50):
        loss, g = cross_entropy_backward(clf, X, y)
        losses.append(loss)
        sgd_step(state, clf.params, g)
    increases = sum(b > a + 1e-9 for a, b in zip(losses, losses[1:]))
    assert increases <= 5
    assert losses[-1] < losses[0]


class TestBudget:
    def test_charges_accumulate(self):
        ledger = BudgetLedger(2)
        ledger.charge()
        assert ledger.remaining == 1
        ledger.charge()
        with pytest.raises(BudgetExceeded):
            ledger.charge()
        assert ledger.used_this_step == 2

    def test_overspend_does_not_mutate(self):
        ledger = BudgetLedger(3)
        ledger.charge(2)
        with pytest.raises(BudgetExceeded):
            ledger.charge(2)
        assert ledger.used_this_step == 2 and len(ledger.charges) == 1

    def test_backward_passes_charge(self):
        ledger = BudgetLedger(1)
        clf = Classifier.zeros("linear", 2, 2)
        cross_entropy_backward(clf, np.ones((1, 2)), [0], ledger)
        with pytest.raises(BudgetExceeded):
            entropy_backward(clf, np.ones((1, 2)), ledger)
        assert ledger.charges == [("cross_entropy", 1)]

    def test_bad_input_is_not_charged(self):
        ledger = BudgetLedger(1)
        with pytest.raises(ValueError):
            cross_entropy_backward(Classifier.zeros("linear", 2, 2), np.ones((1, 3)), [0], ledger)
        assert ledger.used_this_step == 0

    def test_reset(self):
        ledger = BudgetLedger(1)
        ledger.charge()
        ledger.reset()
        assert ledger.remaining == 1 and ledger.charges == []

    def test_budget_must_be_positive(self):
        with pytest.raises(ValueError):
            BudgetLedger(0)


@pytest.mark.parametrize("arch", ["linear", "mlp"])
def test_checkpoint_round_trip(tmp_path, arch):
    clf = Classifier.initialize(arch, 4, 3, np.random.default_rng(5), hidden=5)
    save_params_csv(tmp_path / "ckpt.csv", clf)
    restored = load_params_csv(tmp_path / "ckpt.csv", Classifier.zeros(arch, 4, 3, hidden=5))
    for k in clf.params:
        np.testing.assert_array_equal(restored.params[k], clf.params[k])


def test_invalid_model_config():
    with pytest.raises(ValueError, match="arch"):
        ModelConfig(arch="cnn").validate()
    with pytest.raises(ValueError, match="momentum"):
        ModelConfig(momentum=1.0).validate()


def test_softmax_rows_sum_to_one():
    logits = np.random.default_rng(0).normal(scale=30, size=(50, 7))
    p = softmax(logits)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_tta_zero_step_and_confident_batch_keep_parameters():
    clf = Classifier.initialize("linear", 2, 2, np.random.default_rng(1))
    X = np.ones((3, 2))
    for k, v in tta_adapt_clone(clf, X, eps=0.0).params.items():
        np.testing.assert_array_equal(v, clf.params[k])
    confident = Classifier.zeros("linear", 2, 2)
    confident.params["b"][:] = [1000.0, -1000.0]
    for k, v in tta_adapt_clone(confident, X, eps=0.1).params.items():
        np.testing.assert_array_equal(v, confident.params[k])
