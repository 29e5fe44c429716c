"""Desk-scale ablations: budget grid, random deletions, model transfer,
augmentation toggle, and feature-space distance analysis."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentationPolicy, hflip_rows
from .data import Dataset, Example, ROLE_CLEAN, preprocess_batch
from .errors import ConfigError, DataError
from .models import FAMILY_MLP1, ModelParams, ModelSpec, _activation
from .pipeline import RunSummary, ScenarioConfig, TrialResult, aggregate, run_trials


@dataclass
class SweepRow:
    """One swept configuration and its aggregated outcome."""

    key: dict
    summary: RunSummary
    results: list[TrialResult]

    def to_dict(self, include_volatile: bool = False) -> dict:
        return {
            "key": dict(self.key),
            "summary": self.summary.to_dict(),
            "trials": [r.to_dict(include_volatile) for r in self.results],
        }


def budget_sweep(
    scenario: ScenarioConfig, grid: Sequence[tuple[float, float]]
) -> list[SweepRow]:
    """Re-run the scenario for each (poison %, camouflage %) grid cell."""
    if not grid:
        raise ConfigError("budget grid must be nonempty")
    rows = []
    for poison_pct, camo_pct in grid:
        threat = replace(
            scenario.threat_model,
            poison_budget_pct=poison_pct,
            camouflage_budget_pct=camo_pct,
        )
        cell = replace(scenario, threat_model=threat)
        results = run_trials(cell)
        rows.append(
            SweepRow(
                key={"poison_budget_pct": poison_pct, "camouflage_budget_pct": camo_pct},
                summary=aggregate(results),
                results=results,
            )
        )
    return rows


def random_deletion(
    scenario: ScenarioConfig, fraction_pairs: Sequence[tuple[float, float]]
) -> list[SweepRow]:
    """Victim-side uniform deletion of brewed entries before training.

    Fractions apply floor semantics with at least one entry retained per
    nonzero set; (0, 0) reproduces the base scenario exactly.
    """
    rows = []
    for poison_frac, camo_frac in fraction_pairs:
        if not (0.0 <= poison_frac < 1.0) or not (0.0 <= camo_frac < 1.0):
            raise ConfigError("deletion fractions must lie in [0, 1)")
        results = run_trials(scenario, deletion=(poison_frac, camo_frac))
        rows.append(
            SweepRow(
                key={"poison_deletion_frac": poison_frac, "camouflage_deletion_frac": camo_frac},
                summary=aggregate(results),
                results=results,
            )
        )
    return rows


def transfer_matrix(
    scenario: ScenarioConfig,
    brew_specs: Sequence[ModelSpec],
    victim_specs: Sequence[ModelSpec],
) -> list[SweepRow]:
    """Joint success when brewing on one model and attacking another.

    The cell where both specs equal the scenario's model reproduces the
    base pipeline under identical seeds.
    """
    if not brew_specs or not victim_specs:
        raise ConfigError("transfer matrix needs at least one spec per axis")
    rows = []
    for brew_spec in brew_specs:
        for victim_spec in victim_specs:
            results = run_trials(scenario, brew_spec=brew_spec, victim_spec=victim_spec)
            rows.append(
                SweepRow(
                    key={"brew_spec": brew_spec.spec_id(), "victim_spec": victim_spec.spec_id()},
                    summary=aggregate(results),
                    results=results,
                )
            )
    return rows


def augmentation_sweep(
    scenario: ScenarioConfig, policies: Sequence[AugmentationPolicy]
) -> list[SweepRow]:
    """Re-run the scenario with each training-time augmentation policy."""
    if not policies:
        raise ConfigError("augmentation sweep needs at least one policy")
    rows = []
    for policy in policies:
        cfg = replace(scenario.train_config, augmentation=policy)
        cell = replace(scenario, train_config=cfg)
        results = run_trials(cell)
        rows.append(
            SweepRow(
                key={"augmentation": policy.kind, "p": policy.p},
                summary=aggregate(results),
                results=results,
            )
        )
    return rows


def augmentation_policy(
    dataset: Dataset, policy: AugmentationPolicy, seed: int, epoch: int
) -> np.ndarray:
    """Raw features with the policy applied for one epoch's draws.

    Training applies the same masks internally; this surface exists so the
    transform itself can be inspected and tested.
    """
    X = dataset.features_matrix.astype(np.float64)
    if not policy.active:
        return X
    if dataset.image_shape is None:
        raise DataError("flip augmentation requires image-shaped features")
    mask = policy.draw_mask(seed, epoch, X.shape[0])
    out = X.copy()
    if mask.any():
        out[mask] = hflip_rows(out[mask], dataset.image_shape)
    return out


@dataclass
class DistanceProfile:
    """Feature-space distances grouped by attack role.

    `to_class_mean[role]` and `to_target[role]` hold per-example Euclidean
    distances; histogram counts share `bin_edges` across groups.
    """

    to_class_mean: dict
    to_target: dict
    bin_edges: np.ndarray
    counts: dict

    def group_sizes(self) -> dict:
        return {role: len(v) for role, v in self.to_class_mean.items()}


def _feature_map(spec: ModelSpec, params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Model feature space: hidden activations for mlp1, else the
    preprocessed input."""
    Z = preprocess_batch(X, spec.preprocessing)
    if spec.family == FAMILY_MLP1:
        u = Z @ params.view("W1").T + params.view("b1")
        return _activation(spec.activation, u)
    return Z


def feature_distance_profile(
    spec: ModelSpec,
    params: ModelParams,
    dataset: Dataset,
    target: Example,
    bins: int = 30,
) -> DistanceProfile:
    """Distances of every example to its class-mean feature and to the
    target's feature, grouped by role tag."""
    for label in dataset.class_labels():
        if not any(ex.label == label for ex in dataset.examples):
            raise DataError(f"class {label} has no examples")
    feats = _feature_map(spec, params, dataset.features_matrix)
    target_feat = _feature_map(spec, params, target.features[None, :])[0]
    labels = dataset.labels_array
    class_means = {
        label: feats[labels == label].mean(axis=0) for label in dataset.class_labels()
    }
    to_mean: dict[str, list[float]] = {}
    to_target: dict[str, list[float]] = {}
    for ex, feat in zip(dataset.examples, feats):
        to_mean.setdefault(ex.role, []).append(
            float(np.linalg.norm(feat - class_means[ex.label]))
        )
        to_target.setdefault(ex.role, []).append(float(np.linalg.norm(feat - target_feat)))
    to_mean_arr = {role: np.array(v) for role, v in to_mean.items()}
    to_target_arr = {role: np.array(v) for role, v in to_target.items()}
    all_dists = np.concatenate(list(to_mean_arr.values()))
    bin_edges = np.histogram_bin_edges(all_dists, bins=bins)
    counts = {
        role: np.histogram(v, bins=bin_edges)[0] for role, v in to_mean_arr.items()
    }
    return DistanceProfile(
        to_class_mean=to_mean_arr,
        to_target=to_target_arr,
        bin_edges=bin_edges,
        counts=counts,
    )


def ks_statistic(sample_a: np.ndarray, sample_b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic: sup |ECDF_a - ECDF_b|."""
    a = np.sort(np.asarray(sample_a, dtype=np.float64))
    b = np.sort(np.asarray(sample_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise DataError("KS statistic needs nonempty samples")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))
