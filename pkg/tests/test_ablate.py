import numpy as np
import pytest

from camobrew import (
    AugmentationPolicy,
    BrewConfig,
    ConfigError,
    DataError,
    ModelSpec,
    ScenarioConfig,
    ThreatModel,
    TrainConfig,
    hflip_rows,
    run_trials,
    aggregate,
)
from camobrew.ablate import (
    augmentation_policy,
    augmentation_sweep,
    budget_sweep,
    feature_distance_profile,
    ks_statistic,
    random_deletion,
    transfer_matrix,
)
from camobrew.data import Dataset, make_example
from camobrew.io import RunReport, SynthBlobsConfig, synth_blobs
from camobrew.models import init_params


def small_scenario(binary_blobs, **overrides):
    train_ds, val_ds = binary_blobs
    defaults = dict(
        train_dataset=train_ds,
        validation_dataset=val_ds,
        model_spec=ModelSpec("linear-binary-hinge", train_ds.dim),
        train_config=TrainConfig(
            optimizer="full-batch-gd", lr=0.2, steps=200, weight_decay=1e-4
        ),
        threat_model=ThreatModel(
            epsilon=6.0, poison_budget_pct=5.0, camouflage_budget_pct=10.0
        ),
        brew_config=BrewConfig(restarts=1, steps=80, adam_lr=0.1, quantize_deltas=False),
        camouflage_method="gradient-matching",
        num_trials=3,
        master_seed=42,
    )
    defaults.update(overrides)
    return ScenarioConfig(**defaults)


class TestRandomDeletion:
    def test_zero_fractions_reproduce_base_exactly(self, binary_blobs):
        scenario = small_scenario(binary_blobs)
        base = RunReport.build(scenario, run_trials(scenario))
        rows = random_deletion(scenario, [(0.0, 0.0)])
        deleted = RunReport.build(scenario, rows[0].results)
        assert base.to_json() == deleted.to_json()

    def test_floor_semantics_keep_at_least_one(self, binary_blobs):
        # 1% of 200 -> 2 poisons; deleting 99% floors to 1 but must keep 1.
        scenario = small_scenario(
            binary_blobs,
            threat_model=ThreatModel(
                epsilon=6.0, poison_budget_pct=1.0, camouflage_budget_pct=1.0
            ),
        )
        rows = random_deletion(scenario, [(0.99, 0.99)])
        for result in rows[0].results:
            assert result.num_poisons_submitted == 2
            assert result.num_poisons_kept == 1

    def test_invalid_fraction_rejected(self, binary_blobs):
        scenario = small_scenario(binary_blobs)
        with pytest.raises(ConfigError):
            random_deletion(scenario, [(1.0, 0.0)])


class TestTransferMatrix:
    def test_diagonal_equals_base(self, binary_blobs):
        scenario = small_scenario(binary_blobs)
        base_summary = aggregate(run_trials(scenario)).to_dict()
        rows = transfer_matrix(
            scenario, [scenario.model_spec], [scenario.model_spec]
        )
        assert rows[0].summary.to_dict() == base_summary

    def test_one_by_one_matrix_shape(self, binary_blobs):
        scenario = small_scenario(binary_blobs)
        rows = transfer_matrix(scenario, [scenario.model_spec], [scenario.model_spec])
        assert len(rows) == 1
        assert rows[0].key["brew_spec"] == rows[0].key["victim_spec"]

    def test_cross_model_transfer_runs(self, binary_blobs):
        scenario = small_scenario(binary_blobs)
        other = ModelSpec("linear-binary-linear-loss", scenario.train_dataset.dim)
        rows = transfer_matrix(scenario, [scenario.model_spec, other], [scenario.model_spec])
        assert len(rows) == 2
        for row in rows:
            assert row.summary.num_failed == 0

    def test_empty_axis_rejected(self, binary_blobs):
        scenario = small_scenario(binary_blobs)
        with pytest.raises(ConfigError):
            transfer_matrix(scenario, [], [scenario.model_spec])


class TestBudgetSweep:
    def test_zero_poison_budget_kills_poisoning(self, binary_blobs):
        scenario = small_scenario(binary_blobs)
        rows = budget_sweep(scenario, [(0.0, 10.0)])
        assert rows[0].summary.poisoning_rate == 0.0

    def test_zero_camouflage_budget_leaves_no_applicable_trials(self, binary_blobs):
        scenario = small_scenario(binary_blobs)
        rows = budget_sweep(scenario, [(10.0, 0.0)])
        assert rows[0].summary.camo_applicable == 0

    def test_empty_grid_rejected(self, binary_blobs):
        with pytest.raises(ConfigError):
            budget_sweep(small_scenario(binary_blobs), [])


def image_dataset():
    # 2x2 single-channel images, asymmetric in the width axis
    examples = [
        make_example(0, [1.0, 2.0, 3.0, 4.0], 1),
        make_example(1, [5.0, 6.0, 7.0, 8.0], -1),
    ]
    return Dataset(
        examples, num_classes=2, binary=True,
        feature_range=(0.0, 255.0), image_shape=(1, 2, 2),
    )


class TestAugmentation:
    def test_none_policy_is_identity(self):
        ds = image_dataset()
        out = augmentation_policy(ds, AugmentationPolicy("none"), seed=0, epoch=0)
        assert np.array_equal(out, ds.features_matrix.astype(np.float64))

    def test_hflip_is_involution(self):
        ds = image_dataset()
        X = ds.features_matrix.astype(np.float64)
        flipped = hflip_rows(X, ds.image_shape)
        assert np.array_equal(hflip_rows(flipped, ds.image_shape), X)

    def test_hflip_swaps_columns(self):
        flipped = hflip_rows(np.array([[1.0, 2.0, 3.0, 4.0]]), (1, 2, 2))
        assert np.array_equal(flipped, np.array([[2.0, 1.0, 4.0, 3.0]]))

    def test_flip_on_non_image_dataset_rejected(self, binary_blobs):
        train_ds, _ = binary_blobs
        with pytest.raises(DataError):
            augmentation_policy(train_ds, AugmentationPolicy("hflip"), seed=0, epoch=0)

    def test_draws_seeded_per_epoch(self):
        policy = AugmentationPolicy("hflip", p=0.5)
        a = policy.draw_mask(seed=1, epoch=0, n=100)
        b = policy.draw_mask(seed=1, epoch=0, n=100)
        c = policy.draw_mask(seed=1, epoch=1, n=100)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_augmentation_sweep_runs_on_image_data(self):
        rng = np.random.default_rng(0)
        train_examples = [
            make_example(i, rng.uniform(0, 255, size=4), -1 if i % 2 else 1)
            for i in range(40)
        ]
        val_examples = [
            make_example(100 + i, rng.uniform(0, 255, size=4), -1 if i % 2 else 1)
            for i in range(10)
        ]
        kwargs = dict(
            num_classes=2, binary=True, feature_range=(0.0, 255.0), image_shape=(1, 2, 2)
        )
        train_ds = Dataset(train_examples, **kwargs)
        val_ds = Dataset(val_examples, **kwargs)
        scenario = small_scenario(
            (train_ds, val_ds),
            model_spec=ModelSpec("linear-binary-hinge", 4),
            threat_model=ThreatModel(
                epsilon=16.0, poison_budget_pct=10.0, camouflage_budget_pct=10.0
            ),
            num_trials=2,
        )
        rows = augmentation_sweep(
            scenario, [AugmentationPolicy("none"), AugmentationPolicy("hflip", p=0.5)]
        )
        assert len(rows) == 2
        assert all(r.summary.num_failed == 0 for r in rows)


class TestDistanceProfile:
    def test_identical_features_zero_distance(self):
        examples = [make_example(i, [1.0, 1.0], 1) for i in range(3)] + [
            make_example(3 + i, [0.0, 0.0], -1) for i in range(3)
        ]
        ds = Dataset(examples, num_classes=2, binary=True)
        spec = ModelSpec("linear-binary-hinge", 2)
        params = init_params(spec, 0)
        profile = feature_distance_profile(
            spec, params, ds, make_example(99, [1.0, 1.0], 1)
        )
        assert np.all(profile.to_class_mean["clean"] == 0.0)

    def test_linear_feature_space_is_preprocessed_input(self, binary_blobs):
        train_ds, _ = binary_blobs
        spec = ModelSpec("linear-binary-hinge", train_ds.dim)
        params = init_params(spec, 0)
        profile = feature_distance_profile(spec, params, train_ds, train_ds.examples[0])
        feats = train_ds.features_matrix.astype(np.float64)
        labels = train_ds.labels_array
        means = {c: feats[labels == c].mean(axis=0) for c in (-1, 1)}
        expected = np.array(
            [np.linalg.norm(f - means[label]) for f, label in zip(feats, labels)]
        )
        assert profile.group_sizes()["clean"] == len(train_ds)
        assert np.allclose(profile.to_class_mean["clean"], expected, atol=1e-12)

    def test_counts_sum_to_group_sizes(self, binary_blobs):
        train_ds, _ = binary_blobs
        spec = ModelSpec("linear-binary-hinge", train_ds.dim)
        profile = feature_distance_profile(
            spec, init_params(spec, 0), train_ds, train_ds.examples[0]
        )
        for role, size in profile.group_sizes().items():
            assert profile.counts[role].sum() == size

    def test_mlp_uses_hidden_layer(self):
        spec = ModelSpec(
            "mlp1-softmax-crossentropy", 2, 2, hidden_width=3, activation="tanh"
        )
        params = init_params(spec, 1)
        examples = [make_example(i, [float(i), 0.0], i % 2) for i in range(4)]
        ds = Dataset(examples, num_classes=2)
        profile = feature_distance_profile(spec, params, ds, examples[0])
        assert profile.group_sizes()["clean"] == 4

    def test_empty_class_rejected(self):
        examples = [make_example(0, [0.0], 0), make_example(1, [1.0], 0)]
        ds = Dataset(examples, num_classes=2)
        spec = ModelSpec("linear-softmax-crossentropy", 1, 2)
        with pytest.raises(DataError):
            feature_distance_profile(spec, init_params(spec, 0), ds, examples[0])


class TestKsStatistic:
    def test_matches_scipy(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        rng = np.random.default_rng(4)
        for _ in range(10):
            a = rng.normal(size=40)
            b = rng.normal(loc=rng.uniform(-1, 1), size=55)
            expected = scipy_stats.ks_2samp(a, b).statistic
            assert ks_statistic(a, b) == pytest.approx(expected, abs=1e-12)

    def test_identical_samples_zero(self):
        a = np.array([1.0, 2.0, 3.0])
        assert ks_statistic(a, a) == 0.0

    def test_disjoint_supports_one(self):
        assert ks_statistic(np.array([0.0, 1.0]), np.array([5.0, 6.0])) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            ks_statistic(np.array([]), np.array([1.0]))
