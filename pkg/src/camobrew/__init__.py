"""Camouflaged data poisoning against retrain-from-scratch unlearning."""

__version__ = "0.1.0"

from .augment import AugmentationPolicy, hflip_rows
from .brew import (
    AdamState,
    BrewConfig,
    PerturbationSet,
    TargetSpec,
    ThreatModel,
    adam_step,
    brew_camouflages,
    brew_poisons,
    cosine_loss,
    cosine_loss_delta_grads,
    label_flip_camouflage,
    perturbed_grad_sum,
    project_deltas,
    target_gradient,
)
from .data import Dataset, Example, make_example
from .errors import (
    BudgetError,
    CamobrewError,
    ConfigError,
    DataError,
    DegenerateGradientError,
    FileFormatError,
    ModelError,
    TrainingDivergedError,
)
from .models import (
    ModelParams,
    ModelSpec,
    TrainConfig,
    forward,
    grad_params,
    loss,
    mixed_vjp,
    predict,
    train,
    validation_accuracy,
)
from .pipeline import (
    RunSummary,
    ScenarioConfig,
    TrialPlan,
    TrialResult,
    aggregate,
    derive_trial_plan,
    evaluate_success,
    run_trial,
    run_trials,
    unlearn_retrain,
)

__all__ = [name for name in dir() if not name.startswith("_")]
