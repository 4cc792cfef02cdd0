import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbnet.data import ImageSet
from cbnet.earlyexit import (
    LN10,
    ExitPolicy,
    entropy,
    entropy_rows,
    exit_statistics,
    infer_with_exit,
    train_joint,
    tune_threshold,
)
from cbnet.errors import ConfigError, DomainError, EmptyInputError
from cbnet.models import build_branchy_lenet, build_lenet
from cbnet.optim import SGD


class TestEntropy:
    def test_one_hot_is_zero(self):
        assert entropy(np.eye(10)[2]) == 0.0

    def test_uniform_is_ln_k(self):
        assert entropy(np.full(10, 0.1)) == pytest.approx(LN10, abs=1e-12)

    def test_nine_one_split(self):
        assert entropy(np.array([0.9, 0.1])) == pytest.approx(0.325083, abs=1e-6)

    def test_negative_entry_rejected(self):
        with pytest.raises(DomainError):
            entropy(np.array([1.1, -0.1]))

    def test_tiny_negative_tolerated(self):
        assert entropy(np.array([1.0, -1e-12])) == pytest.approx(0.0, abs=1e-9)

    @given(st.lists(st.floats(1e-9, 1.0), min_size=2, max_size=10))
    @settings(max_examples=60, deadline=None)
    def test_bounds_property(self, raw):
        p = np.array(raw)
        p /= p.sum()
        h = entropy(p)
        assert -1e-12 <= h <= np.log(len(p)) + 1e-9

    def test_rows_matches_scalar(self, rng):
        probs = rng.random((8, 10)) + 1e-6
        probs /= probs.sum(axis=1, keepdims=True)
        rows = entropy_rows(probs)
        for i in range(8):
            assert rows[i] == pytest.approx(entropy(probs[i]), rel=1e-12)


class TestExitPolicy:
    def test_threshold_range(self):
        ExitPolicy(0.0)
        ExitPolicy(LN10)
        with pytest.raises(DomainError):
            ExitPolicy(-0.1)
        with pytest.raises(DomainError):
            ExitPolicy(3.0)


@pytest.fixture(scope="module")
def net():
    return build_branchy_lenet(seed=2)


class TestInferWithExit:

    def test_threshold_above_ln10_always_exits_early(self, net, rng):
        policy = ExitPolicy(LN10)
        for _ in range(5):
            outcome = infer_with_exit(net, rng.random((1, 28, 28), dtype=np.float32), policy)
            assert outcome.exit_id == 1

    def test_threshold_zero_reaches_final_exit(self, net, rng):
        policy = ExitPolicy(0.0)
        outcome = infer_with_exit(net, rng.random((1, 28, 28), dtype=np.float32), policy)
        assert outcome.exit_id == net.exit_count

    def test_prediction_is_argmax_of_taken_exit(self, net, rng):
        for threshold in (0.0, 0.05, 1.0, LN10):
            outcome = infer_with_exit(net, rng.random((1, 28, 28), dtype=np.float32),
                                      ExitPolicy(threshold))
            assert outcome.predicted_class == int(np.argmax(outcome.probs))

    def test_consistency_invariant(self, net, rng):
        policy = ExitPolicy(0.8)
        for _ in range(20):
            outcome = infer_with_exit(net, rng.random((1, 28, 28), dtype=np.float32), policy)
            if outcome.exit_id == 1:
                assert outcome.entropies[0] < policy.threshold
            else:
                assert outcome.entropies[0] >= policy.threshold


class TestExitStatistics:
    def test_fractions_sum_to_one(self, synth_test):
        net = build_branchy_lenet(seed=0)
        stats = exit_statistics(net, synth_test, ExitPolicy(0.5))
        assert sum(stats.fractions) == pytest.approx(1.0)

    def test_everything_exits_with_max_threshold(self, synth_test):
        net = build_branchy_lenet(seed=0)
        stats = exit_statistics(net, synth_test, ExitPolicy(LN10))
        assert stats.fractions == (1.0, 0.0)

    def test_empty_set_rejected(self, synth_test):
        net = build_branchy_lenet(seed=0)
        empty = synth_test.take(np.array([], dtype=np.int64))
        with pytest.raises(EmptyInputError):
            exit_statistics(net, empty, ExitPolicy(0.05))

    def test_matches_per_image_inference(self, synth_test):
        net = build_branchy_lenet(seed=1)
        policy = ExitPolicy(1.2)
        stats = exit_statistics(net, synth_test, policy)
        outcomes = [infer_with_exit(net, synth_test.images[i], policy)
                    for i in range(len(synth_test))]
        frac1 = np.mean([o.exit_id == 1 for o in outcomes])
        assert stats.fractions[0] == pytest.approx(frac1, abs=1e-9)
        correct = np.mean([o.predicted_class == synth_test.labels[i]
                           for i, o in enumerate(outcomes)])
        assert stats.overall_accuracy == pytest.approx(correct, abs=1e-9)


class TestTrainJoint:
    def test_all_zero_weights_rejected(self, synth_train):
        net = build_branchy_lenet(seed=0)
        with pytest.raises(ConfigError):
            train_joint(net, synth_train, exit_weights=(0.0, 0.0), epochs=1)

    def test_weight_count_must_match_exits(self, synth_train):
        net = build_branchy_lenet(seed=0)
        with pytest.raises(ConfigError):
            train_joint(net, synth_train, exit_weights=(1.0,), epochs=1)

    def test_loss_decreases_on_learnable_data(self, synth_train):
        net = build_branchy_lenet(seed=0)
        history = train_joint(net, synth_train, epochs=5, batch_size=64, seed=0,
                              held_out=150, patience=10)
        assert history["train_loss"][-1] < history["train_loss"][0]

    def test_final_weighting_reduces_to_plain_training(self, synth_train):
        """w=(0,1): branch gets zero gradient; backbone matches the single-exit
        network trained the same way, bit for bit."""
        branchy = build_branchy_lenet(seed=21)
        branch_before = {k: v.copy() for k, v in branchy.params().items()
                         if k.startswith("branch_")}
        train_joint(branchy, synth_train, exit_weights=(0.0, 1.0), epochs=2,
                    batch_size=64, optimizer=SGD(lr=0.01, momentum=0.9), seed=21,
                    held_out=150, patience=10)
        for key, val in branch_before.items():
            np.testing.assert_array_equal(branchy.params()[key], val)

        lenet = build_lenet(seed=21)
        train_joint(lenet, synth_train, epochs=2, batch_size=64,
                    optimizer=SGD(lr=0.01, momentum=0.9), seed=21,
                    held_out=150, patience=10)
        lparams = lenet.params()
        for key, val in branchy.params().items():
            if not key.startswith("branch_"):
                np.testing.assert_array_equal(val, lparams[key],
                                              err_msg=f"{key} diverged")


@pytest.fixture(scope="module")
def trained(synth_train):
    tuned_net = build_branchy_lenet(seed=5)
    train_joint(tuned_net, synth_train, epochs=6, batch_size=64, seed=5,
                held_out=150, patience=10)
    return tuned_net


class TestTuneThreshold:

    def test_infinite_budget_returns_max_grid_threshold(self, trained, synth_test):
        policy = tune_threshold(trained, synth_test, accuracy_budget=float("inf"))
        assert policy.threshold == pytest.approx(LN10, rel=1e-6)

    def test_zero_budget_feasible(self, trained, synth_test):
        policy = tune_threshold(trained, synth_test, accuracy_budget=0.0)
        assert 0.0 <= policy.threshold <= LN10

    def test_fraction_monotone_in_threshold(self, trained, synth_test):
        fractions = []
        for t in np.linspace(0.0, LN10, 25):
            stats = exit_statistics(trained, synth_test, ExitPolicy(t))
            fractions.append(stats.fractions[0])
        assert all(b >= a - 1e-12 for a, b in zip(fractions, fractions[1:]))

    def test_single_exit_network_returns_zero(self, synth_test):
        policy = tune_threshold(build_lenet(seed=0), synth_test)
        assert policy.threshold == 0.0
