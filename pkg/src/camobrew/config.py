"""Strict JSON configuration: documented schema, unknown keys are errors.

Top-level keys:

  dataset            required; see the per-kind key sets below
  model              required; family plus optional hidden_width/activation
  train              optimizer settings (defaults: full-batch-gd)
  threat             epsilon + poison/camouflage budget percents
  brew               restart/step schedule and Adam settings
  camouflage_method  "gradient-matching" (default) or "label-flip"
  trials             number of trials (default 10)
  master_seed        root seed (default 0)
  unlearn_seed_mode  "fresh" (default) or "reuse"
  workers            trial parallelism (default 1)
  output_dir         where artifacts land (env CAMOBREW_OUTPUT_DIR wins)
  ablation           only used by the `ablate` subcommand
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .augment import AugmentationPolicy
from .brew import BrewConfig, ThreatModel
from .data import Dataset, PREP_NONE
from .errors import ConfigError
from .io import (
    SynthBlobsConfig,
    load_cifar10_binary,
    load_csv_dataset,
    synth_blobs,
    to_binary_cifar,
)
from .models import ModelSpec, TrainConfig
from .pipeline import ScenarioConfig

OUTPUT_DIR_ENV_NAME = "CAMOBREW_OUTPUT_DIR"

TOP_LEVEL_KEYS = {
    "dataset", "model", "train", "threat", "brew", "camouflage_method",
    "trials", "master_seed", "unlearn_seed_mode", "workers", "output_dir",
    "ablation",
}

DATASET_KEYS = {
    "synthetic-blobs": {
        "kind", "dim", "classes", "train_per_class", "val_per_class",
        "cluster_std", "center_scale", "seed", "preprocessing",
    },
    "cifar10-binary": {"kind", "dir", "preprocessing", "binary_reduction"},
    "csv": {"kind", "train_path", "val_path", "preprocessing"},
}
MODEL_KEYS = {"family", "hidden_width", "activation"}
TRAIN_KEYS = {
    "optimizer", "lr", "steps", "epochs", "batch_size", "momentum",
    "weight_decay", "shuffle_each_epoch", "loss_reduction", "stop_tol",
    "augmentation",
}
AUGMENT_KEYS = {"kind", "p"}
THREAT_KEYS = {"epsilon", "poison_budget_pct", "camouflage_budget_pct"}
BREW_KEYS = {
    "restarts", "steps", "adam_lr", "adam_beta1", "adam_beta2", "adam_eps",
    "quantize_deltas", "seed",
}
ABLATION_KEYS = {"kind", "grid", "fraction_pairs", "brew_models", "victim_models", "policies", "bins"}


def _check_keys(section: dict, allowed: set, context: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{context} must be a JSON object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown {context} keys: {sorted(unknown)}")


@dataclass(frozen=True)
class DatasetSource:
    """Where training/validation data comes from."""

    kind: str
    options: dict

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.options}


def parse_dataset_source(section: dict) -> DatasetSource:
    if not isinstance(section, dict) or "kind" not in section:
        raise ConfigError("dataset section must declare a 'kind'")
    kind = section["kind"]
    if kind not in DATASET_KEYS:
        raise ConfigError(
            f"unknown dataset kind {kind!r}; expected one of {sorted(DATASET_KEYS)}"
        )
    _check_keys(section, DATASET_KEYS[kind], f"dataset[{kind}]")
    options = {k: v for k, v in section.items() if k != "kind"}
    return DatasetSource(kind=kind, options=options)


def build_datasets(source: DatasetSource) -> tuple[Dataset, Dataset]:
    opts = source.options
    if source.kind == "synthetic-blobs":
        cfg = SynthBlobsConfig(
            dim=opts.get("dim", 2),
            classes=opts.get("classes", 2),
            train_per_class=opts.get("train_per_class", 50),
            val_per_class=opts.get("val_per_class", 20),
            cluster_std=opts.get("cluster_std", 1.0),
            center_scale=opts.get("center_scale", 4.0),
            seed=opts.get("seed", 0),
            preprocessing=opts.get("preprocessing", PREP_NONE),
        )
        return synth_blobs(cfg)
    if source.kind == "cifar10-binary":
        if "dir" not in opts:
            raise ConfigError("cifar10-binary dataset requires 'dir'")
        train, test = load_cifar10_binary(
            opts["dir"], preprocessing=opts.get("preprocessing", PREP_NONE)
        )
        if opts.get("binary_reduction", True):
            train, test = to_binary_cifar(train), to_binary_cifar(test)
        return train, test
    if source.kind == "csv":
        if "train_path" not in opts or "val_path" not in opts:
            raise ConfigError("csv dataset requires 'train_path' and 'val_path'")
        prep = opts.get("preprocessing", PREP_NONE)
        return load_csv_dataset(opts["train_path"], prep), load_csv_dataset(
            opts["val_path"], prep
        )
    raise ConfigError(f"unhandled dataset kind {source.kind!r}")


def parse_model_spec(section: dict, train_dataset: Dataset) -> ModelSpec:
    _check_keys(section, MODEL_KEYS, "model")
    if "family" not in section:
        raise ConfigError("model section requires 'family'")
    return ModelSpec(
        family=section["family"],
        input_dim=train_dataset.dim,
        num_classes=train_dataset.num_classes,
        hidden_width=section.get("hidden_width"),
        activation=section.get("activation"),
        preprocessing=train_dataset.preprocessing,
    )


def parse_train_config(section: dict) -> TrainConfig:
    _check_keys(section, TRAIN_KEYS, "train")
    augmentation = None
    if section.get("augmentation") is not None:
        aug = section["augmentation"]
        _check_keys(aug, AUGMENT_KEYS, "train.augmentation")
        augmentation = AugmentationPolicy(kind=aug.get("kind", "none"), p=aug.get("p", 0.5))
    kwargs = {k: v for k, v in section.items() if k != "augmentation"}
    return TrainConfig(augmentation=augmentation, **kwargs)


def parse_threat_model(section: dict) -> ThreatModel:
    _check_keys(section, THREAT_KEYS, "threat")
    missing = THREAT_KEYS - set(section)
    if missing:
        raise ConfigError(f"threat section missing keys: {sorted(missing)}")
    return ThreatModel(
        epsilon=section["epsilon"],
        poison_budget_pct=section["poison_budget_pct"],
        camouflage_budget_pct=section["camouflage_budget_pct"],
    )


def parse_brew_config(section: dict) -> BrewConfig:
    _check_keys(section, BREW_KEYS, "brew")
    return BrewConfig(**section)


@dataclass
class LoadedConfig:
    scenario: ScenarioConfig
    source: DatasetSource
    output_dir: Path
    ablation: Optional[dict]


def load_config_file(path: str | Path, overrides: Optional[dict] = None) -> LoadedConfig:
    """Read, validate, and materialize a run configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    doc = apply_overrides(doc, overrides or {})
    return build_config(doc)


def apply_overrides(doc: dict, overrides: dict) -> dict:
    """Apply dotted-path overrides like {'threat.epsilon': 8}."""
    out = json.loads(json.dumps(doc))
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = out
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return out


def build_config(doc: dict) -> LoadedConfig:
    _check_keys(doc, TOP_LEVEL_KEYS, "top-level config")
    for required in ("dataset", "model", "threat"):
        if required not in doc:
            raise ConfigError(f"config missing required section {required!r}")
    source = parse_dataset_source(doc["dataset"])
    train_ds, val_ds = build_datasets(source)
    spec = parse_model_spec(doc["model"], train_ds)
    train_cfg = parse_train_config(doc.get("train", {}))
    threat = parse_threat_model(doc["threat"])
    brew_cfg = parse_brew_config(doc.get("brew", {}))
    ablation = doc.get("ablation")
    if ablation is not None:
        _check_keys(ablation, ABLATION_KEYS, "ablation")
    scenario = ScenarioConfig(
        train_dataset=train_ds,
        validation_dataset=val_ds,
        model_spec=spec,
        train_config=train_cfg,
        threat_model=threat,
        brew_config=brew_cfg,
        camouflage_method=doc.get("camouflage_method", "gradient-matching"),
        num_trials=doc.get("trials", 10),
        master_seed=doc.get("master_seed", 0),
        unlearn_seed_mode=doc.get("unlearn_seed_mode", "fresh"),
        workers=doc.get("workers", 1),
        source_descriptor=source.to_dict(),
    )
    output_dir = Path(os.environ.get(OUTPUT_DIR_ENV_NAME) or doc.get("output_dir", "out"))
    return LoadedConfig(scenario=scenario, source=source, output_dir=output_dir, ablation=ablation)
