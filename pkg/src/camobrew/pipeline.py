"""Attacker/victim interaction pipeline with retrain-from-scratch unlearning.

One trial walks the four-step interaction: brew poisons against the
clean-trained model, train the victim on clean + poisons and record
whether the target flips to the adversarial label, brew (or label-flip)
camouflages against the poisoned model, train the victim on the full
corrupted set and record that the target looks correct, then serve the
unlearning request by retraining from scratch without the camouflages.

Poison and camouflage entries are appended to the training set as new
examples derived from their base examples; unlearning removes exactly the
camouflage-tagged entries.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from .brew import (
    BrewConfig,
    PerturbationSet,
    TargetSpec,
    ThreatModel,
    brew_camouflages,
    brew_poisons,
    label_flip_camouflage,
)
from .data import Dataset, Example, ROLE_CAMOUFLAGE, ROLE_CLEAN, ROLE_POISON, make_example
from .errors import BudgetError, CamobrewError, ConfigError
from .models import (
    ModelParams,
    ModelSpec,
    TrainConfig,
    predict,
    train,
    validation_accuracy,
)

logger = logging.getLogger(__name__)

CAMO_GRADIENT_MATCHING = "gradient-matching"
CAMO_LABEL_FLIP = "label-flip"

# Stage tags feeding per-stage seed derivation.
STAGE_CLEAN_TRAIN = 1
STAGE_BREW_POISON = 2
STAGE_TRAIN_POISONED = 3
STAGE_BREW_CAMO = 4
STAGE_TRAIN_CAMOUFLAGED = 5
STAGE_UNLEARN = 6
STAGE_DELETION = 7


def derive_seed(*components: int) -> int:
    """Stable 64-bit seed from integer components."""
    return int(np.random.SeedSequence(list(components)).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything one experiment run needs, including its seeding root."""

    train_dataset: Dataset
    validation_dataset: Dataset
    model_spec: ModelSpec
    train_config: TrainConfig
    threat_model: ThreatModel
    brew_config: BrewConfig
    camouflage_method: str = CAMO_GRADIENT_MATCHING
    num_trials: int = 10
    master_seed: int = 0
    unlearn_seed_mode: str = "fresh"
    workers: int = 1
    source_descriptor: Optional[dict] = None

    def __post_init__(self):
        if self.camouflage_method not in (CAMO_GRADIENT_MATCHING, CAMO_LABEL_FLIP):
            raise ConfigError(f"unknown camouflage method {self.camouflage_method!r}")
        if self.camouflage_method == CAMO_LABEL_FLIP and not self.train_dataset.binary:
            raise ConfigError("label-flip camouflage requires a binary dataset")
        if self.num_trials < 1:
            raise ConfigError("num_trials must be >= 1")
        if self.unlearn_seed_mode not in ("fresh", "reuse"):
            raise ConfigError("unlearn_seed_mode must be 'fresh' or 'reuse'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.train_dataset.dim != self.validation_dataset.dim:
            raise ConfigError("train/validation dimension mismatch")
        overlap = {ex.id for ex in self.train_dataset} & {
            ex.id for ex in self.validation_dataset
        }
        if overlap:
            raise ConfigError(
                f"validation split shares {len(overlap)} ids with the training split"
            )
        if self.train_dataset.preprocessing != self.model_spec.preprocessing:
            raise ConfigError("dataset preprocessing must match the model spec")

    def resolved_quantize(self) -> bool:
        if self.brew_config.quantize_deltas is not None:
            return self.brew_config.quantize_deltas
        return self.train_dataset.image_shape is not None


@dataclass(frozen=True)
class TrialPlan:
    """Seed-determined choices for one trial."""

    trial_index: int
    trial_seed: int
    target_id: int
    target_label: int
    adversarial_label: int
    poison_base_ids: tuple[int, ...]
    camouflage_base_ids: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "trial_index": self.trial_index,
            "trial_seed": self.trial_seed,
            "target_id": self.target_id,
            "target_label": self.target_label,
            "adversarial_label": self.adversarial_label,
            "poison_base_ids": list(self.poison_base_ids),
            "camouflage_base_ids": list(self.camouflage_base_ids),
        }


def derive_trial_plan(scenario: ScenarioConfig, trial_index: int) -> TrialPlan:
    """Deterministically derive target, adversarial label, and base ids.

    The draw order is fixed: target index, adversarial label (multiclass
    only), poison pool shuffle, camouflage pool shuffle.
    """
    if not (0 <= trial_index < scenario.num_trials):
        raise ConfigError(f"trial index {trial_index} outside 0..{scenario.num_trials - 1}")
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([scenario.master_seed, trial_index]))
    )
    val = scenario.validation_dataset
    target = val.examples[int(rng.integers(len(val)))]
    target_label = target.label
    if scenario.train_dataset.binary:
        adversarial_label = -target_label
    else:
        others = [c for c in range(scenario.train_dataset.num_classes) if c != target_label]
        adversarial_label = others[int(rng.integers(len(others)))]

    train_ds = scenario.train_dataset
    n_clean = len(train_ds)
    poison_count = scenario.threat_model.poison_count(n_clean)
    camo_count = scenario.threat_model.camouflage_count(n_clean)

    def draw(label: int, count: int, kind: str) -> tuple[int, ...]:
        pool = train_ds.ids_with_label(label, role=ROLE_CLEAN)
        if len(pool) < count:
            raise BudgetError(
                f"{kind} budget {count} exceeds pool of {len(pool)} clean examples "
                f"with label {label}",
                class_label=label,
                needed=count,
                available=len(pool),
            )
        order = rng.permutation(len(pool))
        return tuple(pool[i] for i in order[:count])

    poison_ids = draw(adversarial_label, poison_count, "poison")
    if scenario.camouflage_method == CAMO_LABEL_FLIP:
        # Flipped twins of the poison entries; budgets coincide.
        camo_ids = poison_ids
    else:
        camo_ids = draw(target_label, camo_count, "camouflage")
    return TrialPlan(
        trial_index=trial_index,
        trial_seed=derive_seed(scenario.master_seed, trial_index),
        target_id=target.id,
        target_label=target_label,
        adversarial_label=adversarial_label,
        poison_base_ids=poison_ids,
        camouflage_base_ids=camo_ids,
    )


@dataclass
class TrialResult:
    """Outcome of one trial; failed stages leave a structured error record."""

    trial_index: int
    plan: TrialPlan
    poison_success: Optional[bool] = None
    camo_success: Optional[bool] = None
    joint_success: Optional[bool] = None
    stage_sanity: Optional[bool] = None
    val_acc_clean: Optional[float] = None
    val_acc_poisoned: Optional[float] = None
    val_acc_camouflaged: Optional[float] = None
    val_acc_unlearned: Optional[float] = None
    phi_poison: Optional[float] = None
    phi_camo: Optional[float] = None
    predictions: dict = field(default_factory=dict)
    num_poisons_submitted: int = 0
    num_poisons_kept: int = 0
    num_camouflages_submitted: int = 0
    num_camouflages_kept: int = 0
    timings: dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_dict(self, include_volatile: bool = False) -> dict:
        out = {
            "trial_index": self.trial_index,
            "plan": self.plan.to_dict(),
            "poison_success": self.poison_success,
            "camo_success": self.camo_success,
            "joint_success": self.joint_success,
            "stage_sanity": self.stage_sanity,
            "val_acc_clean": self.val_acc_clean,
            "val_acc_poisoned": self.val_acc_poisoned,
            "val_acc_camouflaged": self.val_acc_camouflaged,
            "val_acc_unlearned": self.val_acc_unlearned,
            "phi_poison": self.phi_poison,
            "phi_camo": self.phi_camo,
            "predictions": dict(self.predictions),
            "num_poisons_submitted": self.num_poisons_submitted,
            "num_poisons_kept": self.num_poisons_kept,
            "num_camouflages_submitted": self.num_camouflages_submitted,
            "num_camouflages_kept": self.num_camouflages_kept,
            "error": self.error,
        }
        if include_volatile:
            out["timings"] = dict(self.timings)
        return out


def perturbation_entries(
    pset: PerturbationSet, base_dataset: Dataset, role: str, id_start: int
) -> list[Example]:
    """Materialize perturbed examples (base features + delta, base label)."""
    out = []
    for k, (base_id, delta) in enumerate(pset.entries):
        base = base_dataset.by_id(base_id)
        features = base.features.astype(np.float64) + delta
        out.append(make_example(id_start + k, features, base.label, role=role))
    return out


def unlearn_retrain(
    spec: ModelSpec, dataset_without_camouflage: Dataset, config: TrainConfig
) -> ModelParams:
    """Serve the unlearning request: retrain from scratch on what remains."""
    leftover = [ex for ex in dataset_without_camouflage if ex.role == ROLE_CAMOUFLAGE]
    if leftover:
        raise ConfigError(
            f"{len(leftover)} camouflage-tagged examples still present before retraining"
        )
    return train(spec, dataset_without_camouflage, config)


def evaluate_success(
    spec: ModelSpec,
    theta_poisoned: ModelParams,
    theta_camouflaged: Optional[ModelParams],
    plan: TrialPlan,
    target: Example,
) -> tuple[bool, Optional[bool]]:
    """Success predicates: poisoned model flips the target; camouflaged
    model (when poisoning succeeded) restores the true label."""
    poison_success = predict(spec, theta_poisoned, target.features) == plan.adversarial_label
    if not poison_success or theta_camouflaged is None:
        return poison_success, None
    camo_success = predict(spec, theta_camouflaged, target.features) == plan.target_label
    return poison_success, camo_success


def _select_deletions(
    entries: list[Example], fraction: float, rng: np.random.Generator
) -> set[int]:
    """Uniformly chosen entry ids to drop; floor count, always keep >= 1."""
    n = len(entries)
    if n == 0 or fraction <= 0.0:
        return set()
    count = min(int(fraction * n), n - 1)
    if count <= 0:
        return set()
    picked = rng.choice(n, size=count, replace=False)
    return {entries[i].id for i in picked}


def _stage_train_config(scenario: ScenarioConfig, seed: int) -> TrainConfig:
    return replace(scenario.train_config, seed=seed)


def run_trial(
    scenario: ScenarioConfig,
    plan: TrialPlan,
    theta_clean: Optional[ModelParams] = None,
    deletion: Optional[tuple[float, float]] = None,
    brew_spec: Optional[ModelSpec] = None,
    victim_spec: Optional[ModelSpec] = None,
    theta_clean_brew: Optional[ModelParams] = None,
) -> TrialResult:
    """Execute one full trial; stage errors become failure records.

    `deletion` optionally drops victim-side fractions of the submitted
    poison/camouflage entries. `brew_spec`/`victim_spec` split the model
    used for brewing from the one the victim trains (transfer study); both
    default to the scenario's model.
    """
    result = TrialResult(trial_index=plan.trial_index, plan=plan)
    try:
        _run_trial_inner(
            scenario, plan, result, theta_clean, deletion, brew_spec,
            victim_spec, theta_clean_brew,
        )
    except CamobrewError as exc:
        result.error = f"{type(exc).__name__}: {exc}"
        logger.warning("trial %d failed: %s", plan.trial_index, result.error)
    return result


def _run_trial_inner(
    scenario: ScenarioConfig,
    plan: TrialPlan,
    result: TrialResult,
    theta_clean: Optional[ModelParams],
    deletion: Optional[tuple[float, float]],
    brew_spec: Optional[ModelSpec],
    victim_spec: Optional[ModelSpec],
    theta_clean_brew: Optional[ModelParams],
) -> None:
    master = scenario.master_seed
    trial = plan.trial_index
    train_ds = scenario.train_dataset
    val_ds = scenario.validation_dataset
    victim_spec = victim_spec or scenario.model_spec
    brew_spec = brew_spec or scenario.model_spec
    same_spec = brew_spec == victim_spec
    target = val_ds.by_id(plan.target_id)
    target_spec = TargetSpec(
        targets=((target, plan.target_label),), adversarial_label=plan.adversarial_label
    )
    quantize = scenario.resolved_quantize()
    clock = time.perf_counter

    t0 = clock()
    if theta_clean is None:
        theta_clean = train(
            victim_spec, train_ds, _stage_train_config(scenario, derive_seed(master, STAGE_CLEAN_TRAIN))
        )
    if theta_clean_brew is None:
        theta_clean_brew = theta_clean if same_spec else train(
            brew_spec, train_ds, _stage_train_config(scenario, derive_seed(master, STAGE_CLEAN_TRAIN))
        )
    result.val_acc_clean = validation_accuracy(victim_spec, theta_clean, val_ds)
    result.predictions["clean"] = predict(victim_spec, theta_clean, target.features)
    result.timings["train_clean"] = clock() - t0

    # Brew the poison set against the clean model.
    t0 = clock()
    poison_entries: list[Example] = []
    if plan.poison_base_ids:
        bases = [train_ds.by_id(i) for i in plan.poison_base_ids]
        brew_cfg = replace(
            scenario.brew_config,
            seed=derive_seed(master, trial, STAGE_BREW_POISON),
            quantize_deltas=quantize,
        )
        poison_set = brew_poisons(
            brew_spec, theta_clean_brew, target_spec, bases,
            scenario.threat_model, brew_cfg, train_ds.feature_range,
        )
        result.phi_poison = poison_set.loss_value
        poison_entries = perturbation_entries(
            poison_set, train_ds, ROLE_POISON, id_start=train_ds.next_id()
        )
    result.num_poisons_submitted = len(poison_entries)
    result.timings["brew_poison"] = clock() - t0

    deletion_rng = None
    dropped_poison_ids: set[int] = set()
    if deletion is not None:
        deletion_rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([master, trial, STAGE_DELETION]))
        )
        dropped_poison_ids = _select_deletions(poison_entries, deletion[0], deletion_rng)
    kept_poisons = [ex for ex in poison_entries if ex.id not in dropped_poison_ids]
    result.num_poisons_kept = len(kept_poisons)

    # Victim trains on clean + (surviving) poisons.
    t0 = clock()
    poisoned_ds = train_ds.with_examples_added(kept_poisons) if kept_poisons else train_ds
    seed_cp = derive_seed(master, trial, STAGE_TRAIN_POISONED)
    theta_poisoned = train(victim_spec, poisoned_ds, _stage_train_config(scenario, seed_cp))
    result.predictions["poisoned"] = predict(victim_spec, theta_poisoned, target.features)
    result.poison_success = result.predictions["poisoned"] == plan.adversarial_label
    result.val_acc_poisoned = validation_accuracy(victim_spec, theta_poisoned, val_ds)
    result.timings["train_poisoned"] = clock() - t0

    if not result.poison_success or not plan.camouflage_base_ids:
        result.joint_success = False
        return

    # Brew camouflages against the poisoned model (attacker side: full
    # poison set, no victim deletions).
    t0 = clock()
    if scenario.camouflage_method == CAMO_LABEL_FLIP:
        camo_entries = label_flip_camouflage(
            poison_entries, id_start=train_ds.next_id() + len(poison_entries)
        )
    else:
        if same_spec and len(kept_poisons) == len(poison_entries):
            theta_poisoned_brew = theta_poisoned
        else:
            attacker_ds = train_ds.with_examples_added(poison_entries)
            theta_poisoned_brew = train(
                brew_spec, attacker_ds, _stage_train_config(scenario, seed_cp)
            )
        camo_bases = [train_ds.by_id(i) for i in plan.camouflage_base_ids]
        camo_cfg = replace(
            scenario.brew_config,
            seed=derive_seed(master, trial, STAGE_BREW_CAMO),
            quantize_deltas=quantize,
        )
        camo_set = brew_camouflages(
            brew_spec, theta_poisoned_brew, target_spec, camo_bases,
            scenario.threat_model, camo_cfg, train_ds.feature_range,
        )
        result.phi_camo = camo_set.loss_value
        camo_entries = perturbation_entries(
            camo_set, train_ds, ROLE_CAMOUFLAGE,
            id_start=train_ds.next_id() + len(poison_entries),
        )
    result.num_camouflages_submitted = len(camo_entries)
    result.timings["brew_camouflage"] = clock() - t0

    dropped_camo_ids: set[int] = set()
    if deletion is not None:
        dropped_camo_ids = _select_deletions(camo_entries, deletion[1], deletion_rng)
    kept_camo = [ex for ex in camo_entries if ex.id not in dropped_camo_ids]
    result.num_camouflages_kept = len(kept_camo)

    # Victim trains on the fully corrupted set.
    t0 = clock()
    corrupted_ds = poisoned_ds.with_examples_added(kept_camo)
    theta_camouflaged = train(
        victim_spec, corrupted_ds,
        _stage_train_config(scenario, derive_seed(master, trial, STAGE_TRAIN_CAMOUFLAGED)),
    )
    result.predictions["camouflaged"] = predict(victim_spec, theta_camouflaged, target.features)
    result.camo_success = result.predictions["camouflaged"] == plan.target_label
    result.stage_sanity = result.camo_success
    result.val_acc_camouflaged = validation_accuracy(victim_spec, theta_camouflaged, val_ds)
    result.timings["train_camouflaged"] = clock() - t0

    # Unlearning request: drop the camouflages, retrain from scratch.
    t0 = clock()
    camo_ids = [ex.id for ex in kept_camo]
    remaining_ds = corrupted_ds.without_ids(camo_ids)
    if scenario.unlearn_seed_mode == "reuse":
        unlearn_seed = seed_cp
    else:
        unlearn_seed = derive_seed(master, trial, STAGE_UNLEARN)
    theta_unlearned = unlearn_retrain(
        victim_spec, remaining_ds, _stage_train_config(scenario, unlearn_seed)
    )
    result.predictions["unlearned"] = predict(victim_spec, theta_unlearned, target.features)
    result.val_acc_unlearned = validation_accuracy(victim_spec, theta_unlearned, val_ds)
    result.timings["unlearn_retrain"] = clock() - t0

    result.joint_success = bool(result.poison_success and result.camo_success)


def run_trials(
    scenario: ScenarioConfig,
    deletion: Optional[tuple[float, float]] = None,
    brew_spec: Optional[ModelSpec] = None,
    victim_spec: Optional[ModelSpec] = None,
) -> list[TrialResult]:
    """All trials of a scenario, optionally thread-parallel, sorted by index."""
    victim = victim_spec or scenario.model_spec
    brew = brew_spec or scenario.model_spec
    seed_clean = derive_seed(scenario.master_seed, STAGE_CLEAN_TRAIN)
    theta_clean = train(victim, scenario.train_dataset, _stage_train_config(scenario, seed_clean))
    theta_clean_brew = (
        theta_clean
        if brew == victim
        else train(brew, scenario.train_dataset, _stage_train_config(scenario, seed_clean))
    )
    plans = [derive_trial_plan(scenario, i) for i in range(scenario.num_trials)]

    def one(plan: TrialPlan) -> TrialResult:
        return run_trial(
            scenario, plan, theta_clean=theta_clean, deletion=deletion,
            brew_spec=brew, victim_spec=victim, theta_clean_brew=theta_clean_brew,
        )

    if scenario.workers == 1:
        results = [one(p) for p in plans]
    else:
        with ThreadPoolExecutor(max_workers=scenario.workers) as pool:
            results = list(pool.map(one, plans))
    return sorted(results, key=lambda r: r.trial_index)


@dataclass
class AccuracyStat:
    mean: float
    std: float
    count: int
    std_degenerate: bool

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "count": self.count,
            "std_degenerate": self.std_degenerate,
        }


def _stat(values: list[float]) -> Optional[AccuracyStat]:
    if not values:
        return None
    if len(values) == 1:
        return AccuracyStat(mean=values[0], std=0.0, count=1, std_degenerate=True)
    return AccuracyStat(
        mean=statistics.fmean(values),
        std=statistics.stdev(values),
        count=len(values),
        std_degenerate=False,
    )


@dataclass
class RunSummary:
    """Aggregated trial outcomes in the shape of the headline results table."""

    num_trials: int
    num_failed: int
    poisoning_rate: float
    camouflaging_rate: Optional[float]
    joint_rate: float
    camo_applicable: int
    acc_clean: Optional[AccuracyStat]
    acc_poisoned: Optional[AccuracyStat]
    acc_camouflaged: Optional[AccuracyStat]
    acc_unlearned: Optional[AccuracyStat]

    def to_dict(self) -> dict:
        return {
            "num_trials": self.num_trials,
            "num_failed": self.num_failed,
            "poisoning_rate": self.poisoning_rate,
            "camouflaging_rate": self.camouflaging_rate,
            "joint_rate": self.joint_rate,
            "camo_applicable": self.camo_applicable,
            "acc_clean": self.acc_clean.to_dict() if self.acc_clean else None,
            "acc_poisoned": self.acc_poisoned.to_dict() if self.acc_poisoned else None,
            "acc_camouflaged": self.acc_camouflaged.to_dict() if self.acc_camouflaged else None,
            "acc_unlearned": self.acc_unlearned.to_dict() if self.acc_unlearned else None,
        }


def aggregate(results: Sequence[TrialResult]) -> RunSummary:
    """Success rates and accuracy statistics over a trial list.

    The poisoning rate is over all trials; the camouflaging rate is
    conditional on successful poisonings and absent when there were none.
    """
    results = list(results)
    if not results:
        raise ConfigError("cannot aggregate an empty result list")
    n = len(results)
    n_failed = sum(1 for r in results if r.failed)
    poison_successes = sum(1 for r in results if r.poison_success)
    camo_successes = sum(1 for r in results if r.camo_success)
    joint = sum(1 for r in results if r.joint_success)
    return RunSummary(
        num_trials=n,
        num_failed=n_failed,
        poisoning_rate=poison_successes / n,
        camouflaging_rate=(camo_successes / poison_successes) if poison_successes else None,
        joint_rate=joint / n,
        camo_applicable=sum(1 for r in results if r.camo_success is not None),
        acc_clean=_stat([r.val_acc_clean for r in results if r.val_acc_clean is not None]),
        acc_poisoned=_stat([r.val_acc_poisoned for r in results if r.val_acc_poisoned is not None]),
        acc_camouflaged=_stat(
            [r.val_acc_camouflaged for r in results if r.val_acc_camouflaged is not None]
        ),
        acc_unlearned=_stat(
            [r.val_acc_unlearned for r in results if r.val_acc_unlearned is not None]
        ),
    )
