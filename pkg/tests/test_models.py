import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camobrew import (
    ConfigError,
    DataError,
    ModelError,
    ModelParams,
    ModelSpec,
    TrainConfig,
    TrainingDivergedError,
    forward,
    grad_params,
    loss,
    mixed_vjp,
    predict,
    train,
    validation_accuracy,
)
from camobrew.data import Dataset, make_example
from camobrew.models import (
    _batch_softmax,
    batch_loss_and_grad,
    dataset_loss,
    init_params,
    zeros_params,
)
from camobrew.data import preprocess_batch

from conftest import ALL_SPECS, away_from_kinks, fd_grad_theta, fd_mixed, random_case, rel_l2


def linear_spec(dim=3, prep="none"):
    return ModelSpec("linear-binary-linear-loss", dim, preprocessing=prep)


class TestForward:
    def test_unit_vector_dot_product(self):
        spec = linear_spec(4)
        params = ModelParams(np.array([1.0, 0, 0, 0, 0]), spec.param_layout())
        assert forward(spec, params, np.array([3.0, 1.0, -2.0, 5.0]))[0] == 3.0

    def test_zero_input_zero_bias(self):
        spec = linear_spec(4)
        rng = np.random.default_rng(0)
        theta = rng.normal(size=5)
        theta[-1] = 0.0
        params = ModelParams(theta, spec.param_layout())
        assert forward(spec, params, np.zeros(4))[0] == 0.0

    def test_zero_mlp_gives_zero_scores(self):
        spec = ModelSpec(
            "mlp1-softmax-crossentropy", 3, 4, hidden_width=2, activation="tanh"
        )
        scores = forward(spec, zeros_params(spec), np.array([1.0, 2.0, 3.0]))
        assert np.all(scores == 0.0)

    def test_dimension_mismatch(self):
        spec = linear_spec(4)
        with pytest.raises(ModelError):
            forward(spec, zeros_params(spec), np.zeros(5))


class TestLoss:
    def test_hinge_zero_beyond_margin(self):
        spec = ModelSpec("linear-binary-hinge", 2)
        params = ModelParams(np.array([2.0, 0.0, 0.0]), spec.param_layout())
        assert loss(spec, params, np.array([1.0, 0.0]), 1) == 0.0

    def test_linear_loss_value(self):
        spec = linear_spec(2)
        params = ModelParams(np.array([0.5, 0.0, 0.0]), spec.param_layout())
        assert loss(spec, params, np.array([1.0, 0.0]), 1) == -0.5

    def test_cross_entropy_uniform(self):
        spec = ModelSpec("linear-softmax-crossentropy", 3, 2)
        value = loss(spec, zeros_params(spec), np.ones(3), 0)
        assert value == pytest.approx(math.log(2.0), abs=1e-12)


class TestPredict:
    def test_binary_positive(self):
        spec = linear_spec(1)
        params = ModelParams(np.array([0.3, 0.0]), spec.param_layout())
        assert predict(spec, params, np.array([1.0])) == 1

    def test_binary_tie_breaks_positive(self):
        spec = linear_spec(1)
        assert predict(spec, zeros_params(spec), np.array([5.0])) == 1

    def test_softmax_argmax(self):
        spec = ModelSpec("linear-softmax-crossentropy", 2, 2)
        params = ModelParams(
            np.array([0.0, 0.0, 0.0, 0.0, 0.1, 0.9]), spec.param_layout()
        )
        assert predict(spec, params, np.zeros(2)) == 1


class TestGradParams:
    def test_linear_analytic(self):
        spec = linear_spec(3)
        rng = np.random.default_rng(1)
        params = ModelParams(rng.normal(size=4), spec.param_layout())
        x = rng.normal(size=3)
        for y in (-1, 1):
            g = grad_params(spec, params, x, y)
            assert np.allclose(g[:3], -y * x)
            assert g[3] == -y

    def test_hinge_inactive_is_zero(self):
        spec = ModelSpec("linear-binary-hinge", 2)
        params = ModelParams(np.array([3.0, 0.0, 0.0]), spec.param_layout())
        assert np.all(grad_params(spec, params, np.array([1.0, 0.0]), 1) == 0.0)

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.spec_id())
    def test_matches_finite_differences(self, spec):
        rng = np.random.default_rng(11)
        checked = 0
        while checked < 25:
            params, x, y = random_case(spec, rng)
            if not away_from_kinks(spec, params, x, y):
                continue
            expected = fd_grad_theta(spec, params, x, y)
            if np.linalg.norm(expected) < 1e-6:
                continue
            assert rel_l2(grad_params(spec, params, x, y), expected) < 1e-4
            checked += 1


class TestMixedVjp:
    def test_linear_analytic(self):
        spec = linear_spec(3)
        rng = np.random.default_rng(2)
        params = ModelParams(rng.normal(size=4), spec.param_layout())
        w = rng.normal(size=4)
        x = rng.normal(size=3)
        for y in (-1, 1):
            assert np.allclose(mixed_vjp(spec, params, x, y, w), -y * w[:3])

    def test_hinge_inactive_is_zero(self):
        spec = ModelSpec("linear-binary-hinge", 2)
        params = ModelParams(np.array([3.0, 0.0, 0.0]), spec.param_layout())
        out = mixed_vjp(spec, params, np.array([1.0, 0.0]), 1, np.ones(3))
        assert np.all(out == 0.0)

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.spec_id())
    def test_matches_finite_differences(self, spec):
        rng = np.random.default_rng(12)
        checked = 0
        while checked < 25:
            params, x, y = random_case(spec, rng)
            if not away_from_kinks(spec, params, x, y):
                continue
            w = rng.normal(size=spec.num_params())
            expected = fd_mixed(spec, params, x, y, w)
            if np.linalg.norm(expected) < 1e-6:
                continue
            assert rel_l2(mixed_vjp(spec, params, x, y, w), expected) < 1e-4
            checked += 1

    def test_cotangent_shape_checked(self):
        spec = linear_spec(3)
        with pytest.raises(ModelError):
            mixed_vjp(spec, zeros_params(spec), np.zeros(3), 1, np.zeros(7))


class TestTrain:
    def test_separable_reaches_perfect_training_accuracy(self, separable_blobs):
        train_ds, _ = separable_blobs
        spec = ModelSpec("linear-binary-hinge", train_ds.dim)
        params = train(
            spec, train_ds, TrainConfig(optimizer="full-batch-gd", lr=0.5, steps=400, seed=1)
        )
        correct = sum(
            predict(spec, params, ex.features) == ex.label for ex in train_ds
        )
        assert correct == len(train_ds)

    def test_zero_steps_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="full-batch-gd", lr=0.1, steps=0)
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="sgd", lr=0.1, epochs=0)

    def test_same_seed_bit_identical(self, binary_blobs):
        train_ds, _ = binary_blobs
        spec = ModelSpec("linear-binary-hinge", train_ds.dim)
        cfg = TrainConfig(optimizer="full-batch-gd", lr=0.2, steps=50, seed=9)
        a = train(spec, train_ds, cfg)
        b = train(spec, train_ds, cfg)
        assert np.array_equal(a.theta, b.theta)
        assert a.final_train_loss == b.final_train_loss

    def test_sgd_same_seed_bit_identical(self, binary_blobs):
        train_ds, _ = binary_blobs
        spec = ModelSpec("linear-binary-hinge", train_ds.dim)
        cfg = TrainConfig(
            optimizer="sgd", lr=0.05, momentum=0.9, epochs=5, batch_size=16, seed=4
        )
        a = train(spec, train_ds, cfg)
        b = train(spec, train_ds, cfg)
        assert np.array_equal(a.theta, b.theta)

    def test_divergence_raises_with_step(self, binary_blobs):
        train_ds, _ = binary_blobs
        spec = ModelSpec("linear-binary-linear-loss", train_ds.dim)
        with np.errstate(over="ignore"), pytest.raises(TrainingDivergedError) as err:
            train(
                spec, train_ds,
                TrainConfig(optimizer="full-batch-gd", lr=1e306, steps=50, seed=0),
            )
        assert err.value.step is not None

    def test_preprocessing_mismatch_rejected(self, binary_blobs):
        train_ds, _ = binary_blobs
        spec = ModelSpec("linear-binary-hinge", train_ds.dim, preprocessing="l2-normalize")
        with pytest.raises(ConfigError):
            train(spec, train_ds, TrainConfig())

    @pytest.mark.parametrize(
        "family,num_classes",
        [
            ("linear-binary-linear-loss", 2),
            ("linear-binary-hinge", 2),
            ("linear-softmax-crossentropy", 2),
        ],
    )
    def test_full_batch_gd_loss_non_increasing(self, binary_blobs, family, num_classes):
        train_ds, _ = binary_blobs
        spec = ModelSpec(family, train_ds.dim, num_classes)
        labels = train_ds.labels_array.astype(np.float64)
        if family == "linear-softmax-crossentropy":
            labels = ((train_ds.labels_array + 1) // 2).astype(np.int64)
        Z = preprocess_batch(train_ds.features_matrix, "none")
        params = init_params(spec, 0)
        lr = 0.01
        losses = []
        for _ in range(150):
            value, grad = batch_loss_and_grad(spec, params, Z, labels)
            losses.append(value)
            params.theta -= lr * grad
        diffs = np.diff(losses)
        assert np.all(diffs <= 1e-12)


class TestInvariants:
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
    @settings(max_examples=100, deadline=None)
    def test_softmax_sums_to_one(self, logits):
        probs = _batch_softmax(np.array([logits]))
        assert abs(probs.sum() - 1.0) < 1e-9
        assert np.all(probs >= 0.0)

    def test_losses_nonnegative(self):
        rng = np.random.default_rng(5)
        hinge = ModelSpec("linear-binary-hinge", 4)
        ce = ModelSpec("linear-softmax-crossentropy", 4, 3)
        for _ in range(100):
            params, x, y = random_case(hinge, rng)
            assert loss(hinge, params, x, y) >= 0.0
            params, x, y = random_case(ce, rng)
            assert loss(ce, params, x, y) >= 0.0


class TestValidationAccuracy:
    def test_all_correct(self):
        spec = linear_spec(2)
        params = ModelParams(np.array([1.0, 0.0, 0.0]), spec.param_layout())
        ds = Dataset(
            [
                make_example(0, [1.0, 0.0], 1),
                make_example(1, [-1.0, 0.0], -1),
            ],
            num_classes=2,
            binary=True,
        )
        assert validation_accuracy(spec, params, ds) == 1.0

    def test_constant_classifier_on_balanced_set(self):
        spec = linear_spec(2)
        params = ModelParams(np.array([0.0, 0.0, 5.0]), spec.param_layout())
        ds = Dataset(
            [make_example(i, [float(i), 0.0], 1 if i % 2 else -1) for i in range(10)],
            num_classes=2,
            binary=True,
        )
        assert validation_accuracy(spec, params, ds) == 0.5

    def test_rejects_attack_tagged_examples(self):
        spec = linear_spec(2)
        ds = Dataset(
            [
                make_example(0, [1.0, 0.0], 1),
                make_example(1, [-1.0, 0.0], -1, role="poison"),
            ],
            num_classes=2,
            binary=True,
        )
        with pytest.raises(DataError):
            validation_accuracy(spec, zeros_params(spec), ds)


class TestParams:
    def test_layout_length_enforced(self):
        spec = linear_spec(3)
        with pytest.raises(ModelError):
            ModelParams(np.zeros(3), spec.param_layout())

    def test_non_finite_rejected(self):
        spec = linear_spec(3)
        theta = np.zeros(4)
        theta[0] = np.nan
        with pytest.raises(ModelError):
            ModelParams(theta, spec.param_layout())

    def test_dataset_loss_matches_mean_of_losses(self, binary_blobs):
        train_ds, _ = binary_blobs
        spec = ModelSpec("linear-binary-hinge", train_ds.dim)
        params = init_params(spec, 1)
        per_example = [loss(spec, params, ex.features, ex.label) for ex in train_ds]
        assert dataset_loss(spec, params, train_ds) == pytest.approx(
            np.mean(per_example), rel=1e-12
        )
