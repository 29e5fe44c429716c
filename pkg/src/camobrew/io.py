"""Dataset ingestion, artifact persistence, and report emission.

File formats owned here:

  * CIFAR-10 binary batches: 10000 records of 3073 bytes (label byte then
    3072 channel-major pixel bytes) per file.
  * `CAMOBREW-PERT v1` perturbation files: magic line, one-line JSON
    metadata (dataset hash, epsilon, spec id, brew config digest, final
    loss), then one CSV record per entry.
  * `CAMOBREW-MODEL v1` checkpoints: magic line, one-line JSON header,
    raw little-endian float64 parameter payload.
  * Run reports: canonical JSON (volatile timings/timestamps opted in
    explicitly) plus a summary CSV shaped like the headline results table.

All writes are atomic (temp file + rename).
"""

from __future__ import annotations

import csv
import hashlib
import io as _stdio
import json
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .augment import AugmentationPolicy
from .brew import BrewConfig, PerturbationSet, ThreatModel
from .data import (
    Dataset,
    Example,
    PREP_NONE,
    VALID_PREPROCESSING,
    make_example,
)
from .errors import ConfigError, DataError, FileFormatError
from .models import ModelParams, ModelSpec, TrainConfig
from .pipeline import (
    RunSummary,
    ScenarioConfig,
    TrialResult,
    aggregate,
    run_trials,
)

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_RECORD_BYTES = 3073
CIFAR_RECORDS_PER_FILE = 10000
CIFAR_CLASS_NAMES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]
# animal (+1) vs machine (-1) class split for the binary reduction
ANIMAL_LABELS = {2, 3, 4, 5, 6, 7}

PERT_MAGIC = "CAMOBREW-PERT v1"
MODEL_MAGIC = b"CAMOBREW-MODEL v1"

OUTPUT_DIR_ENV = "CAMOBREW_OUTPUT_DIR"


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# CIFAR-10 binary ingestion


def _parse_cifar_file(path: Path, id_start: int) -> list[Example]:
    # Real batches are exactly 10000 records; any positive multiple of the
    # record size parses, so small hand-built fixtures stay testable.
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}", path=str(path)) from exc
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        expected = CIFAR_RECORD_BYTES * max(1, round(len(raw) / CIFAR_RECORD_BYTES))
        raise FileFormatError(
            f"{path}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte "
            f"records (nearest whole layout: {expected} bytes)",
            path=str(path),
        )
    n_records = len(raw) // CIFAR_RECORD_BYTES
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n_records, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        offset = int(bad[0]) * CIFAR_RECORD_BYTES
        raise FileFormatError(
            f"{path}: label byte {int(labels[bad[0]])} > 9 at offset {offset}",
            path=str(path),
            offset=offset,
        )
    features = records[:, 1:].astype(np.float32)
    return [
        Example(id=id_start + i, features=features[i], label=int(labels[i]))
        for i in range(n_records)
    ]


def load_cifar10_binary(
    directory: str | Path, preprocessing: str = PREP_NONE
) -> tuple[Dataset, Dataset]:
    """Parse the six binary batch files into (train, test) datasets.

    Features are pixel intensities in [0, 255]; test ids continue after
    the 50000 train ids so the splits never collide.
    """
    directory = Path(directory)
    train_examples: list[Example] = []
    for name in CIFAR_TRAIN_FILES:
        train_examples.extend(_parse_cifar_file(directory / name, len(train_examples)))
    test_examples = _parse_cifar_file(directory / CIFAR_TEST_FILE, len(train_examples))
    common = dict(
        num_classes=10,
        preprocessing=preprocessing,
        feature_range=(0.0, 255.0),
        image_shape=(3, 32, 32),
        metadata={"class_names": CIFAR_CLASS_NAMES},
    )
    return Dataset(train_examples, **common), Dataset(test_examples, **common)


def to_binary_cifar(dataset: Dataset) -> Dataset:
    """Map the ten classes onto animal (+1) vs machine (-1)."""
    if dataset.num_classes != 10:
        raise DataError("binary reduction expects a 10-class dataset")
    examples = []
    for ex in dataset.examples:
        if not (0 <= ex.label <= 9):
            raise DataError(f"example {ex.id} has unknown label {ex.label}")
        label = 1 if ex.label in ANIMAL_LABELS else -1
        examples.append(Example(id=ex.id, features=ex.features, label=label, role=ex.role))
    metadata = dict(dataset.metadata)
    metadata["binary_mapping"] = {
        "+1": [CIFAR_CLASS_NAMES[i] for i in sorted(ANIMAL_LABELS)],
        "-1": [CIFAR_CLASS_NAMES[i] for i in range(10) if i not in ANIMAL_LABELS],
    }
    return Dataset(
        examples,
        num_classes=2,
        preprocessing=dataset.preprocessing,
        feature_range=dataset.feature_range,
        image_shape=dataset.image_shape,
        binary=True,
        metadata=metadata,
    )


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SynthBlobsConfig:
    """Seeded Gaussian clusters with a disjoint train/validation split."""

    dim: int
    classes: int
    train_per_class: int
    val_per_class: int
    cluster_std: float = 1.0
    center_scale: float = 4.0
    seed: int = 0
    preprocessing: str = PREP_NONE

    def __post_init__(self):
        if self.dim < 1 or self.classes < 2:
            raise ConfigError("synthetic blobs need dim >= 1 and classes >= 2")
        if self.train_per_class < 1 or self.val_per_class < 1:
            raise ConfigError("per-class counts must be >= 1")
        if self.cluster_std < 0:
            raise ConfigError("cluster_std must be >= 0")
        if self.preprocessing not in VALID_PREPROCESSING:
            raise ConfigError(f"unknown preprocessing {self.preprocessing!r}")


def synth_blobs(config: SynthBlobsConfig) -> tuple[Dataset, Dataset]:
    """Generate (train, validation) datasets; identical seeds give
    identical datasets."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    centers = rng.normal(0.0, 1.0, size=(config.classes, config.dim)) * config.center_scale
    binary = config.classes == 2
    labels = [-1, 1] if binary else list(range(config.classes))

    def sample_split(per_class: int, id_start: int) -> list[Example]:
        out = []
        next_id = id_start
        for class_index in range(config.classes):
            points = centers[class_index] + rng.normal(
                0.0, 1.0, size=(per_class, config.dim)
            ) * config.cluster_std
            for row in points:
                out.append(make_example(next_id, row, labels[class_index]))
                next_id += 1
        return out

    train_examples = sample_split(config.train_per_class, 0)
    val_examples = sample_split(config.val_per_class, len(train_examples))
    common = dict(
        num_classes=config.classes,
        preprocessing=config.preprocessing,
        feature_range=None,
        binary=binary,
    )
    return Dataset(train_examples, **common), Dataset(val_examples, **common)


# ---------------------------------------------------------------------------
# CSV datasets


def save_csv_dataset(dataset: Dataset, path: str | Path) -> None:
    buf = _stdio.StringIO()
    writer = csv.writer(buf)
    writer.writerow([f"f{i}" for i in range(dataset.dim)] + ["label"])
    for ex in dataset.examples:
        writer.writerow([repr(float(v)) for v in ex.features] + [ex.label])
    _atomic_write_text(Path(path), buf.getvalue())


def load_csv_dataset(path: str | Path, preprocessing: str = PREP_NONE) -> Dataset:
    """Load features + labels from CSV.

    The column named "label" holds labels when a header is present;
    otherwise the last column does. Labels in {-1, +1} select the binary
    convention, otherwise labels must be 0..K-1.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}", path=str(path)) from exc
    rows = list(csv.reader(_stdio.StringIO(text)))
    rows = [r for r in rows if r]
    if not rows:
        raise FileFormatError(f"{path}: no rows", path=str(path))

    def is_number(token: str) -> bool:
        try:
            float(token)
            return True
        except ValueError:
            return False

    label_col = len(rows[0]) - 1
    start = 0
    if not all(is_number(tok) for tok in rows[0]):
        header = [h.strip().lower() for h in rows[0]]
        if "label" in header:
            label_col = header.index("label")
        start = 1
    examples = []
    labels = []
    for i, row in enumerate(rows[start:]):
        try:
            values = [float(tok) for tok in row]
        except ValueError as exc:
            raise FileFormatError(
                f"{path}: non-numeric value in data row {i}", path=str(path), offset=i
            ) from exc
        label = values[label_col]
        if label != int(label):
            raise FileFormatError(
                f"{path}: non-integer label {label} in row {i}", path=str(path), offset=i
            )
        feats = [v for j, v in enumerate(values) if j != label_col]
        examples.append(make_example(i, feats, int(label)))
        labels.append(int(label))
    label_set = set(labels)
    binary = label_set <= {-1, 1}
    if binary:
        num_classes = 2
    else:
        num_classes = max(label_set) + 1
        if min(label_set) < 0:
            raise DataError(f"{path}: labels must be -1/+1 or 0..K-1")
    return Dataset(
        examples, num_classes=num_classes, preprocessing=preprocessing, binary=binary
    )


# ---------------------------------------------------------------------------
# Perturbation files


def _brew_config_digest(config: BrewConfig) -> str:
    payload = json.dumps(
        {
            "restarts": config.restarts,
            "steps": config.steps,
            "adam_lr": config.adam_lr,
            "adam_beta1": config.adam_beta1,
            "adam_beta2": config.adam_beta2,
            "adam_eps": config.adam_eps,
            "quantize_deltas": config.quantize_deltas,
            "seed": config.seed,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def save_perturbations(
    pset: PerturbationSet,
    path: str | Path,
    dataset_hash: str,
    spec: ModelSpec,
    brew_config: BrewConfig,
) -> None:
    meta = {
        "dataset_hash": dataset_hash,
        "epsilon": pset.epsilon,
        "spec_id": spec.spec_id(),
        "brew_config_digest": _brew_config_digest(brew_config),
        "loss_value": pset.loss_value,
        "quantized": pset.quantized,
    }
    lines = [PERT_MAGIC, json.dumps(meta, sort_keys=True)]
    for example_id, delta in pset.entries:
        if pset.quantized:
            rendered = [str(int(v)) for v in delta]
        else:
            rendered = [format(float(v), ".9g") for v in delta]
        lines.append(",".join([str(example_id)] + rendered))
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def load_perturbations(
    path: str | Path, dataset: Optional[Dataset] = None
) -> tuple[PerturbationSet, dict]:
    """Read a perturbation file; verifies the dataset hash when a dataset
    is supplied and validates feasibility against it."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}", path=str(path)) from exc
    if not lines or lines[0] != PERT_MAGIC:
        raise FileFormatError(
            f"{path}: bad magic line (expected {PERT_MAGIC!r})", path=str(path), offset=0
        )
    if len(lines) < 2:
        raise FileFormatError(f"{path}: missing metadata line", path=str(path), offset=1)
    try:
        meta = json.loads(lines[1])
    except json.JSONDecodeError as exc:
        raise FileFormatError(
            f"{path}: metadata is not valid JSON: {exc}", path=str(path), offset=1
        ) from exc
    entries = []
    for k, line in enumerate(lines[2:]):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            example_id = int(parts[0])
            delta = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        except ValueError as exc:
            raise FileFormatError(
                f"{path}: malformed entry on line {k + 3}", path=str(path), offset=k + 2
            ) from exc
        entries.append((example_id, delta))
    pset = PerturbationSet(
        entries,
        epsilon=float(meta.get("epsilon", 0.0)),
        quantized=bool(meta.get("quantized", False)),
        loss_value=meta.get("loss_value"),
    )
    if dataset is not None:
        actual = dataset.content_hash()
        if meta.get("dataset_hash") != actual:
            raise DataError(
                f"{path}: dataset hash mismatch (file {meta.get('dataset_hash')!r}, "
                f"dataset {actual!r})"
            )
        bases = [dataset.by_id(i) for i, _ in entries]
        pset.validate(bases, dataset.feature_range)
    return pset, meta


# ---------------------------------------------------------------------------
# Model checkpoints


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "family": spec.family,
        "input_dim": spec.input_dim,
        "num_classes": spec.num_classes,
        "hidden_width": spec.hidden_width,
        "activation": spec.activation,
        "preprocessing": spec.preprocessing,
    }


def spec_from_dict(payload: dict) -> ModelSpec:
    allowed = {"family", "input_dim", "num_classes", "hidden_width", "activation", "preprocessing"}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown model spec keys: {sorted(unknown)}")
    if "family" not in payload or "input_dim" not in payload:
        raise ConfigError("model spec requires 'family' and 'input_dim'")
    return ModelSpec(**payload)


def save_model(spec: ModelSpec, params: ModelParams, path: str | Path) -> None:
    header = {
        "spec": spec_to_dict(spec),
        "length": int(params.theta.size),
        "dtype": "<f8",
        "final_train_loss": params.final_train_loss,
    }
    payload = (
        MODEL_MAGIC
        + b"\n"
        + json.dumps(header, sort_keys=True).encode()
        + b"\n"
        + np.ascontiguousarray(params.theta, dtype="<f8").tobytes()
    )
    _atomic_write_bytes(Path(path), payload)


def load_model(path: str | Path) -> tuple[ModelSpec, ModelParams]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FileFormatError(f"cannot read {path}: {exc}", path=str(path)) from exc
    magic_end = raw.find(b"\n")
    if magic_end < 0 or raw[:magic_end] != MODEL_MAGIC:
        raise FileFormatError(f"{path}: bad magic", path=str(path), offset=0)
    header_end = raw.find(b"\n", magic_end + 1)
    if header_end < 0:
        raise FileFormatError(f"{path}: missing header", path=str(path), offset=magic_end)
    try:
        header = json.loads(raw[magic_end + 1 : header_end])
        spec = spec_from_dict(header["spec"])
        length = int(header["length"])
    except (json.JSONDecodeError, KeyError, TypeError, ConfigError) as exc:
        raise FileFormatError(
            f"{path}: corrupt header: {exc}", path=str(path), offset=magic_end + 1
        ) from exc
    if length < 1:
        raise FileFormatError(f"{path}: zero-parameter payload", path=str(path))
    body = raw[header_end + 1 :]
    if len(body) != 8 * length:
        raise FileFormatError(
            f"{path}: payload has {len(body)} bytes, expected {8 * length}",
            path=str(path),
            offset=header_end + 1,
        )
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    params = ModelParams(theta, spec.param_layout())
    params.final_train_loss = header.get("final_train_loss")
    return spec, params


# ---------------------------------------------------------------------------
# Run reports


def scenario_descriptor(scenario: ScenarioConfig) -> dict:
    cfg = scenario.train_config
    aug = cfg.augmentation
    return {
        "dataset": {
            "train_hash": scenario.train_dataset.content_hash(),
            "validation_hash": scenario.validation_dataset.content_hash(),
            "train_size": len(scenario.train_dataset),
            "validation_size": len(scenario.validation_dataset),
            "dim": scenario.train_dataset.dim,
            "num_classes": scenario.train_dataset.num_classes,
            "preprocessing": scenario.train_dataset.preprocessing,
            "source": scenario.source_descriptor,
        },
        "model": spec_to_dict(scenario.model_spec),
        "train": {
            "optimizer": cfg.optimizer,
            "lr": cfg.lr,
            "steps": cfg.steps,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "momentum": cfg.momentum,
            "weight_decay": cfg.weight_decay,
            "shuffle_each_epoch": cfg.shuffle_each_epoch,
            "loss_reduction": cfg.loss_reduction,
            "stop_tol": cfg.stop_tol,
            "augmentation": {"kind": aug.kind, "p": aug.p} if aug else None,
        },
        "threat": {
            "epsilon": scenario.threat_model.epsilon,
            "poison_budget_pct": scenario.threat_model.poison_budget_pct,
            "camouflage_budget_pct": scenario.threat_model.camouflage_budget_pct,
        },
        "brew": {
            "restarts": scenario.brew_config.restarts,
            "steps": scenario.brew_config.steps,
            "adam_lr": scenario.brew_config.adam_lr,
            "adam_beta1": scenario.brew_config.adam_beta1,
            "adam_beta2": scenario.brew_config.adam_beta2,
            "adam_eps": scenario.brew_config.adam_eps,
            "quantize_deltas": scenario.brew_config.quantize_deltas,
        },
        "camouflage_method": scenario.camouflage_method,
        "num_trials": scenario.num_trials,
        "master_seed": scenario.master_seed,
        "unlearn_seed_mode": scenario.unlearn_seed_mode,
    }


@dataclass
class RunReport:
    """Scenario echo, per-trial results, and the aggregate summary.

    The canonical serialization is deterministic for a given scenario;
    wall-clock data lives in the volatile section and is excluded unless
    requested.
    """

    payload: dict
    volatile: dict = field(default_factory=dict)

    @classmethod
    def build(cls, scenario: ScenarioConfig, results: Sequence[TrialResult]) -> "RunReport":
        results = list(results)
        summary = aggregate(results)
        payload = {
            "report_version": 1,
            "software_version": __version__,
            "scenario": scenario_descriptor(scenario),
            "summary": summary.to_dict(),
            "trials": [r.to_dict(include_volatile=False) for r in results],
        }
        volatile = {
            "created_at": datetime.now(timezone.utc).isoformat(),
            "timings": {str(r.trial_index): dict(r.timings) for r in results},
        }
        return cls(payload=payload, volatile=volatile)

    def to_json(self, include_volatile: bool = False) -> str:
        doc = dict(self.payload)
        if include_volatile:
            doc["volatile"] = self.volatile
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        doc = json.loads(text)
        volatile = doc.pop("volatile", {})
        return cls(payload=doc, volatile=volatile)

    @property
    def summary(self) -> dict:
        return self.payload["summary"]

    @property
    def trials(self) -> list[dict]:
        return self.payload["trials"]


def run_and_report(scenario: ScenarioConfig) -> RunReport:
    """Execute all trials of a scenario and assemble the report."""
    return RunReport.build(scenario, run_trials(scenario))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def summary_csv_text(report: RunReport) -> str:
    scenario = report.payload["scenario"]
    threat = scenario["threat"]
    summary = report.summary
    buf = _stdio.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        [
            "attack_type", "camouflage_method", "poisoning_rate", "camouflaging_rate",
            "acc_clean_mean", "acc_clean_std",
            "acc_poisoned_mean", "acc_poisoned_std",
            "acc_camouflaged_mean", "acc_camouflaged_std",
        ]
    )
    attack = (
        f"({threat['epsilon']}, {threat['poison_budget_pct']}%, "
        f"{threat['camouflage_budget_pct']}%)"
    )

    def acc(name, key):
        stat = summary.get(name)
        return _fmt(stat[key]) if stat else ""

    writer.writerow(
        [
            attack,
            scenario["camouflage_method"],
            _fmt(summary["poisoning_rate"]),
            _fmt(summary["camouflaging_rate"]),
            acc("acc_clean", "mean"), acc("acc_clean", "std"),
            acc("acc_poisoned", "mean"), acc("acc_poisoned", "std"),
            acc("acc_camouflaged", "mean"), acc("acc_camouflaged", "std"),
        ]
    )
    return buf.getvalue()


def emit_report(
    report: RunReport,
    base_path: str | Path,
    formats: Sequence[str] = ("json", "csv"),
    include_volatile: bool = False,
) -> list[Path]:
    """Write `<base>.json` and/or `<base>.csv`; refuses empty reports."""
    if not report.trials:
        raise ConfigError("refusing to emit a report with no trials")
    base = Path(base_path)
    written = []
    for fmt in formats:
        if fmt == "json":
            out = base.with_suffix(".json")
            _atomic_write_text(out, report.to_json(include_volatile=include_volatile))
        elif fmt == "csv":
            out = base.with_suffix(".csv")
            _atomic_write_text(out, summary_csv_text(report))
        else:
            raise ConfigError(f"unknown report format {fmt!r}")
        written.append(out)
    return written


def sweep_csv_text(rows) -> str:
    """CSV for ablation sweeps: key columns then summary columns."""
    if not rows:
        raise ConfigError("no sweep rows to render")
    key_fields = list(rows[0].key)
    buf = _stdio.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        key_fields
        + [
            "poisoning_rate", "camouflaging_rate", "joint_rate", "camo_applicable",
            "num_failed",
            "acc_clean_mean", "acc_poisoned_mean", "acc_camouflaged_mean",
        ]
    )
    for row in rows:
        s = row.summary
        writer.writerow(
            [_fmt(row.key[k]) for k in key_fields]
            + [
                _fmt(s.poisoning_rate), _fmt(s.camouflaging_rate), _fmt(s.joint_rate),
                _fmt(s.camo_applicable), _fmt(s.num_failed),
                _fmt(s.acc_clean.mean if s.acc_clean else None),
                _fmt(s.acc_poisoned.mean if s.acc_poisoned else None),
                _fmt(s.acc_camouflaged.mean if s.acc_camouflaged else None),
            ]
        )
    return buf.getvalue()


def histogram_csv_text(profile) -> str:
    """(bin_edge, count per role) rows for external plotting."""
    buf = _stdio.StringIO()
    writer = csv.writer(buf)
    roles = sorted(profile.counts)
    writer.writerow(["bin_left", "bin_right"] + [f"count_{r}" for r in roles])
    edges = profile.bin_edges
    for i in range(len(edges) - 1):
        writer.writerow(
            [repr(float(edges[i])), repr(float(edges[i + 1]))]
            + [str(int(profile.counts[r][i])) for r in roles]
        )
    return buf.getvalue()
