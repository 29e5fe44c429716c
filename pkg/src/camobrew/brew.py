"""Perturbation brewing by gradient matching.

Given a trained model, an attack target, and a set of base examples, find
bounded perturbations of the bases whose summed loss gradient aligns (in
cosine similarity) with the gradient of the target under the desired
label. Poison brewing matches the target's gradient under the adversarial
label against a clean-trained model; camouflage brewing matches the
target's gradient under its true label against the poisoned model. The
label-flip construction builds camouflages for binary linear-loss tasks
directly, with exact gradient cancellation.

Optimization is restart-based Adam on the stacked perturbation array with
projection onto the feasible set (per-coordinate bound `epsilon`, and
base + delta inside the valid feature range) after every step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import Example, ROLE_CAMOUFLAGE, make_example
from .errors import ConfigError, DataError, DegenerateGradientError
from .models import ModelParams, ModelSpec, grad_params, mixed_vjp

logger = logging.getLogger(__name__)

MAX_INIT_REDRAWS = 10


@dataclass(frozen=True)
class ThreatModel:
    """Perturbation bound (raw feature units) and relative budgets in percent.

    Zero values are allowed so that no-perturbation / no-poison control
    scenarios can run through the same machinery.
    """

    epsilon: float
    poison_budget_pct: float
    camouflage_budget_pct: float

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if not (0 <= self.poison_budget_pct <= 100):
            raise ConfigError("poison budget percent must be in [0, 100]")
        if not (0 <= self.camouflage_budget_pct <= 100):
            raise ConfigError("camouflage budget percent must be in [0, 100]")

    def poison_count(self, clean_size: int) -> int:
        return int(round(self.poison_budget_pct * clean_size / 100.0))

    def camouflage_count(self, clean_size: int) -> int:
        return int(round(self.camouflage_budget_pct * clean_size / 100.0))


@dataclass(frozen=True)
class TargetSpec:
    """Held-out examples to attack, plus the label the attack should force.

    Each entry pairs a target example with its true label; all entries
    share one adversarial label distinct from every true label.
    """

    targets: tuple
    adversarial_label: int

    def __post_init__(self):
        if not self.targets:
            raise ConfigError("target spec needs at least one target")
        for _, true_label in self.targets:
            if true_label == self.adversarial_label:
                raise ConfigError("adversarial label must differ from every target label")


@dataclass(frozen=True)
class BrewConfig:
    """Restart/step schedule and Adam hyperparameters for brewing."""

    restarts: int = 1
    steps: int = 250
    adam_lr: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    quantize_deltas: Optional[bool] = None
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.adam_lr <= 0:
            raise ConfigError("adam_lr must be positive")


class PerturbationSet:
    """Per-example deltas plus the bound they satisfy.

    Entries pair a base example id with its raw-feature-space delta. When
    `bases` and `feature_range` are supplied the feasibility constraints
    (inf-norm bound, budgeted ids only, in-range perturbed features) are
    enforced at construction.
    """

    def __init__(
        self,
        entries: Sequence[tuple[int, np.ndarray]],
        epsilon: float,
        quantized: bool = False,
        loss_value: Optional[float] = None,
        loss_value_pre_quantize: Optional[float] = None,
        restart_losses: Optional[list[float]] = None,
        bases: Optional[Sequence[Example]] = None,
        feature_range: Optional[tuple[float, float]] = None,
    ):
        self.entries = [(int(i), np.asarray(d, dtype=np.float64)) for i, d in entries]
        self.epsilon = float(epsilon)
        self.quantized = bool(quantized)
        self.loss_value = loss_value
        self.loss_value_pre_quantize = loss_value_pre_quantize
        self.restart_losses = list(restart_losses or [])
        if bases is not None:
            self.validate(bases, feature_range)

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[int]:
        return [i for i, _ in self.entries]

    def deltas_by_id(self) -> dict[int, np.ndarray]:
        return dict(self.entries)

    def validate(
        self,
        bases: Sequence[Example],
        feature_range: Optional[tuple[float, float]],
        atol: float = 1e-9,
    ) -> None:
        base_by_id = {ex.id: ex for ex in bases}
        allowed = set(base_by_id)
        for example_id, delta in self.entries:
            if example_id not in allowed:
                raise DataError(f"perturbation touches non-budgeted example id {example_id}")
            if delta.shape != base_by_id[example_id].features.shape:
                raise DataError(f"delta for id {example_id} has wrong dimension")
            if np.max(np.abs(delta), initial=0.0) > self.epsilon + atol:
                raise DataError(
                    f"delta for id {example_id} exceeds the inf-norm bound {self.epsilon}"
                )
            if feature_range is not None:
                lo, hi = feature_range
                perturbed = base_by_id[example_id].features.astype(np.float64) + delta
                if perturbed.min() < lo - atol or perturbed.max() > hi + atol:
                    raise DataError(
                        f"perturbed features for id {example_id} leave the range [{lo}, {hi}]"
                    )


def cosine_loss(target_grad: np.ndarray, summed_grad: np.ndarray) -> float:
    """1 - cos(angle) between two parameter-space vectors; range [0, 2]."""
    t = np.asarray(target_grad, dtype=np.float64)
    s = np.asarray(summed_grad, dtype=np.float64)
    norm_t = np.linalg.norm(t)
    norm_s = np.linalg.norm(s)
    if norm_t == 0.0 or norm_s == 0.0:
        raise DegenerateGradientError("cosine loss undefined for a zero-norm gradient")
    return float(1.0 - np.dot(t, s) / (norm_t * norm_s))


def target_gradient(
    spec: ModelSpec,
    params: ModelParams,
    target_spec: TargetSpec,
    use_adversarial_label: bool,
) -> np.ndarray:
    """Mean parameter gradient over the targets, under the chosen labels."""
    total = np.zeros_like(params.theta)
    for target, true_label in target_spec.targets:
        label = target_spec.adversarial_label if use_adversarial_label else true_label
        total += grad_params(spec, params, target.features, label)
    return total / len(target_spec.targets)


def perturbed_grad_sum(
    spec: ModelSpec,
    params: ModelParams,
    bases: Sequence[Example],
    labels: Sequence[int],
    deltas: np.ndarray,
) -> np.ndarray:
    """Sum of per-example gradients at base + delta, in fixed index order."""
    if len(bases) != len(deltas):
        raise ConfigError("bases and deltas must have equal length")
    total = np.zeros_like(params.theta)
    for base, label, delta in zip(bases, labels, deltas):
        total += grad_params(spec, params, base.features.astype(np.float64) + delta, label)
    return total


def cosine_loss_delta_grads(
    spec: ModelSpec,
    params: ModelParams,
    target_grad: np.ndarray,
    bases: Sequence[Example],
    labels: Sequence[int],
    deltas: np.ndarray,
) -> list[np.ndarray]:
    """Gradient of the cosine loss with respect to each delta.

    Writing s for the summed perturbed gradient and t for the target
    gradient, d(loss)/ds = -(t/(|t||s|) - (t.s/(|t||s|^3)) s); the per-base
    input-space gradients follow by the mixed vector-Jacobian product.
    """
    t = np.asarray(target_grad, dtype=np.float64)
    s = perturbed_grad_sum(spec, params, bases, labels, deltas)
    norm_t = np.linalg.norm(t)
    norm_s = np.linalg.norm(s)
    if norm_t == 0.0 or norm_s == 0.0:
        raise DegenerateGradientError("cosine loss gradient undefined for zero-norm input")
    w_vec = t / (norm_t * norm_s) - (np.dot(t, s) / (norm_t * norm_s**3)) * s
    return [
        -mixed_vjp(spec, params, base.features.astype(np.float64) + delta, label, w_vec)
        for base, label, delta in zip(bases, labels, deltas)
    ]


@dataclass
class AdamState:
    """First/second moment accumulators plus the perturbations they drive."""

    deltas: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, deltas: np.ndarray) -> "AdamState":
        deltas = np.asarray(deltas, dtype=np.float64)
        return cls(deltas=deltas, m=np.zeros_like(deltas), v=np.zeros_like(deltas), t=0)


def adam_step(
    state: AdamState,
    grads: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam minimization step; returns the new state."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != state.deltas.shape:
        raise ConfigError("gradient shape does not match state")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    deltas = state.deltas - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(deltas=deltas, m=m, v=v, t=t)


def project_deltas(
    deltas: np.ndarray,
    epsilon: float,
    base_features: np.ndarray,
    feature_range: Optional[tuple[float, float]],
) -> np.ndarray:
    """Clamp deltas into the inf-norm ball, then keep base + delta in range.

    Idempotent when bases are themselves in range; the trailing re-clamp
    absorbs the one-ulp spill the range round trip can introduce.
    """
    out = np.clip(deltas, -epsilon, epsilon)
    if feature_range is not None:
        lo, hi = feature_range
        out = np.clip(base_features + out, lo, hi) - base_features
        out = np.clip(out, -epsilon, epsilon)
    return out


@dataclass
class BrewOutcome:
    """Internal record of one restart."""

    deltas: np.ndarray
    loss_value: float


def _run_restart(
    spec: ModelSpec,
    params: ModelParams,
    target_grad: np.ndarray,
    bases: Sequence[Example],
    labels: Sequence[int],
    base_features: np.ndarray,
    epsilon: float,
    feature_range,
    config: BrewConfig,
    restart_seed,
) -> Optional[BrewOutcome]:
    rng = np.random.Generator(np.random.PCG64(restart_seed))
    deltas = None
    for _ in range(MAX_INIT_REDRAWS):
        candidate = rng.uniform(-epsilon, epsilon, size=base_features.shape)
        candidate = project_deltas(candidate, epsilon, base_features, feature_range)
        s = perturbed_grad_sum(spec, params, bases, labels, candidate)
        if np.linalg.norm(s) > 0.0:
            deltas = candidate
            break
    if deltas is None:
        raise DegenerateGradientError(
            "summed gradient stayed at zero norm across initialization redraws"
        )

    state = AdamState.fresh(deltas)
    for _ in range(config.steps):
        try:
            grads = cosine_loss_delta_grads(
                spec, params, target_grad, bases, labels, state.deltas
            )
        except DegenerateGradientError:
            logger.warning("restart aborted: degenerate summed gradient mid-optimization")
            return None
        state = adam_step(
            state,
            np.stack(grads),
            config.adam_lr,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        )
        state.deltas = project_deltas(state.deltas, epsilon, base_features, feature_range)

    final = perturbed_grad_sum(spec, params, bases, labels, state.deltas)
    if np.linalg.norm(final) == 0.0:
        logger.warning("restart aborted: degenerate summed gradient at final deltas")
        return None
    value = cosine_loss(target_grad, final)
    if not math.isfinite(value):
        logger.warning("restart aborted: non-finite cosine loss")
        return None
    return BrewOutcome(deltas=state.deltas, loss_value=value)


def _quantize(
    spec: ModelSpec,
    params: ModelParams,
    target_grad: np.ndarray,
    bases: Sequence[Example],
    labels: Sequence[int],
    base_features: np.ndarray,
    deltas: np.ndarray,
    epsilon: float,
    feature_range,
) -> tuple[np.ndarray, float]:
    rounded = np.rint(base_features + deltas) - base_features
    rounded = project_deltas(rounded, epsilon, base_features, feature_range)
    value = cosine_loss(
        target_grad, perturbed_grad_sum(spec, params, bases, labels, rounded)
    )
    return rounded, value


def _brew(
    spec: ModelSpec,
    params: ModelParams,
    target_grad: np.ndarray,
    bases: Sequence[Example],
    threat_model: ThreatModel,
    config: BrewConfig,
    feature_range: Optional[tuple[float, float]],
) -> PerturbationSet:
    if np.linalg.norm(target_grad) == 0.0:
        raise DegenerateGradientError("target gradient has zero norm")
    bases = list(bases)
    if not bases:
        raise ConfigError("brewing requires at least one base example")
    labels = [ex.label for ex in bases]
    base_features = np.stack([ex.features for ex in bases]).astype(np.float64)
    epsilon = threat_model.epsilon

    seed_seq = np.random.SeedSequence(config.seed)
    restart_seeds = seed_seq.spawn(config.restarts)
    best: Optional[BrewOutcome] = None
    restart_losses: list[float] = []
    for outcome_seed in restart_seeds:
        outcome = _run_restart(
            spec, params, target_grad, bases, labels, base_features,
            epsilon, feature_range, config, outcome_seed,
        )
        if outcome is None:
            continue
        restart_losses.append(outcome.loss_value)
        if best is None or outcome.loss_value < best.loss_value:
            best = outcome
    if best is None:
        raise DegenerateGradientError("every brewing restart aborted")

    quantize = bool(config.quantize_deltas)
    pre_quantize_value = None
    deltas, value = best.deltas, best.loss_value
    if quantize:
        pre_quantize_value = value
        deltas, value = _quantize(
            spec, params, target_grad, bases, labels, base_features,
            deltas, epsilon, feature_range,
        )
    return PerturbationSet(
        entries=list(zip([ex.id for ex in bases], deltas)),
        epsilon=epsilon,
        quantized=quantize,
        loss_value=value,
        loss_value_pre_quantize=pre_quantize_value,
        restart_losses=restart_losses,
        bases=bases,
        feature_range=feature_range,
    )


def brew_poisons(
    spec: ModelSpec,
    params_clean: ModelParams,
    target_spec: TargetSpec,
    bases: Sequence[Example],
    threat_model: ThreatModel,
    config: BrewConfig,
    feature_range: Optional[tuple[float, float]] = None,
) -> PerturbationSet:
    """Brew poison perturbations against a clean-trained model.

    Bases must carry the adversarial label; the matched target gradient is
    taken under the adversarial label.
    """
    for ex in bases:
        if ex.label != target_spec.adversarial_label:
            raise ConfigError(
                f"poison base {ex.id} has label {ex.label}, "
                f"expected {target_spec.adversarial_label}"
            )
    t = target_gradient(spec, params_clean, target_spec, use_adversarial_label=True)
    return _brew(spec, params_clean, t, bases, threat_model, config, feature_range)


def brew_camouflages(
    spec: ModelSpec,
    params_poisoned: ModelParams,
    target_spec: TargetSpec,
    bases: Sequence[Example],
    threat_model: ThreatModel,
    config: BrewConfig,
    feature_range: Optional[tuple[float, float]] = None,
) -> PerturbationSet:
    """Brew camouflage perturbations against the poisoned model.

    Bases must carry the target's true label; the matched target gradient
    is taken under the true label.
    """
    true_labels = {true_label for _, true_label in target_spec.targets}
    for ex in bases:
        if ex.label not in true_labels:
            raise ConfigError(
                f"camouflage base {ex.id} has label {ex.label}, expected one of {sorted(true_labels)}"
            )
    t = target_gradient(spec, params_poisoned, target_spec, use_adversarial_label=False)
    return _brew(spec, params_poisoned, t, bases, threat_model, config, feature_range)


def label_flip_camouflage(
    poison_examples: Sequence[Example], id_start: Optional[int] = None
) -> list[Example]:
    """Binary-only camouflage: each poison's features with the negated label.

    For linear loss the paired gradients cancel exactly for every theta,
    so training with poisons plus these camouflages reproduces clean
    training.
    """
    out = []
    for k, ex in enumerate(poison_examples):
        if ex.label not in (-1, 1):
            raise DataError("label-flip camouflage is defined for binary (-1/+1) tasks only")
        new_id = ex.id if id_start is None else id_start + k
        out.append(make_example(new_id, ex.features, -ex.label, role=ROLE_CAMOUFLAGE))
    return out
