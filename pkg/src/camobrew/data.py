"""Datasets: indexed feature vectors with labels and attack-role tags.

Features are stored as float32 in raw units (pixel intensities in [0, 255]
for image data, unconstrained reals for synthetic data). Any fixed input
transform (l2 normalization, scaling to [0, 1]) is *not* baked into the
stored features; it is declared here and applied as the first layer of the
model, so perturbation bounds always live in raw feature units.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError

ROLE_CLEAN = "clean"
ROLE_POISON = "poison"
ROLE_CAMOUFLAGE = "camouflage"
VALID_ROLES = (ROLE_CLEAN, ROLE_POISON, ROLE_CAMOUFLAGE)

PREP_NONE = "none"
PREP_L2 = "l2-normalize"
PREP_SCALE = "scale-to-[0,1]"
VALID_PREPROCESSING = (PREP_NONE, PREP_L2, PREP_SCALE)


@dataclass(frozen=True)
class Example:
    """One sample: integer id, raw feature vector, integer label.

    Binary tasks use labels in {-1, +1}; multiclass tasks use {0..K-1}.
    """

    id: int
    features: np.ndarray
    label: int
    role: str = ROLE_CLEAN

    def __post_init__(self):
        if self.role not in VALID_ROLES:
            raise DataError(f"unknown role tag {self.role!r}")


class Dataset:
    """Ordered collection of examples with shared dimension and label space.

    `feature_range` bounds valid raw feature values ((0, 255) for images,
    None for unconstrained synthetic data). `image_shape` is (channels,
    height, width) when the flat features are a packed image, else None.
    """

    def __init__(
        self,
        examples: Sequence[Example],
        num_classes: int,
        preprocessing: str = PREP_NONE,
        feature_range: Optional[tuple[float, float]] = None,
        image_shape: Optional[tuple[int, int, int]] = None,
        binary: bool = False,
        metadata: Optional[dict] = None,
    ):
        examples = list(examples)
        if not examples:
            raise DataError("dataset must contain at least one example")
        if preprocessing not in VALID_PREPROCESSING:
            raise DataError(f"unknown preprocessing {preprocessing!r}")
        dim = examples[0].features.shape[0]
        ids = set()
        for ex in examples:
            if ex.features.ndim != 1 or ex.features.shape[0] != dim:
                raise DataError(
                    f"example {ex.id} has dimension {ex.features.shape}, expected ({dim},)"
                )
            if ex.id in ids:
                raise DataError(f"duplicate example id {ex.id}")
            ids.add(ex.id)
            if binary:
                if ex.label not in (-1, 1):
                    raise DataError(f"example {ex.id}: binary label must be -1 or +1, got {ex.label}")
            elif not (0 <= ex.label < num_classes):
                raise DataError(f"example {ex.id}: label {ex.label} out of range for K={num_classes}")
        if image_shape is not None:
            c, h, w = image_shape
            if c * h * w != dim:
                raise DataError(f"image shape {image_shape} incompatible with dim {dim}")
        self.examples = examples
        self.dim = dim
        self.num_classes = num_classes
        self.preprocessing = preprocessing
        self.feature_range = feature_range
        self.image_shape = image_shape
        self.binary = binary
        self.metadata = dict(metadata or {})
        self._by_id = {ex.id: i for i, ex in enumerate(examples)}
        self._features = None
        self._labels = None

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def by_id(self, example_id: int) -> Example:
        try:
            return self.examples[self._by_id[example_id]]
        except KeyError:
            raise DataError(f"no example with id {example_id}") from None

    def has_id(self, example_id: int) -> bool:
        return example_id in self._by_id

    @property
    def features_matrix(self) -> np.ndarray:
        """All features stacked row-wise as float32 (cached)."""
        if self._features is None:
            self._features = np.stack([ex.features for ex in self.examples]).astype(np.float32)
        return self._features

    @property
    def labels_array(self) -> np.ndarray:
        if self._labels is None:
            self._labels = np.array([ex.label for ex in self.examples], dtype=np.int64)
        return self._labels

    def class_labels(self) -> list[int]:
        if self.binary:
            return [-1, 1]
        return list(range(self.num_classes))

    def ids_with_label(self, label: int, role: str | None = ROLE_CLEAN) -> list[int]:
        """Ids of examples carrying `label`, optionally filtered by role tag."""
        return [
            ex.id
            for ex in self.examples
            if ex.label == label and (role is None or ex.role == role)
        ]

    def role_counts(self) -> dict[str, int]:
        counts = {r: 0 for r in VALID_ROLES}
        for ex in self.examples:
            counts[ex.role] += 1
        return counts

    def next_id(self) -> int:
        return max(self._by_id) + 1

    def with_examples_added(self, new_examples: Iterable[Example]) -> "Dataset":
        """New dataset with `new_examples` appended (ids must not collide)."""
        return Dataset(
            self.examples + list(new_examples),
            num_classes=self.num_classes,
            preprocessing=self.preprocessing,
            feature_range=self.feature_range,
            image_shape=self.image_shape,
            binary=self.binary,
            metadata=self.metadata,
        )

    def without_ids(self, ids: Iterable[int]) -> "Dataset":
        drop = set(ids)
        missing = drop - set(self._by_id)
        if missing:
            raise DataError(f"cannot remove unknown ids {sorted(missing)}")
        kept = [ex for ex in self.examples if ex.id not in drop]
        return Dataset(
            kept,
            num_classes=self.num_classes,
            preprocessing=self.preprocessing,
            feature_range=self.feature_range,
            image_shape=self.image_shape,
            binary=self.binary,
            metadata=self.metadata,
        )

    def subset_by_role(self, role: str) -> list[Example]:
        return [ex for ex in self.examples if ex.role == role]

    def content_hash(self) -> str:
        """SHA-256 over a canonical little-endian serialization.

        Covers ids, labels, roles, and float32 feature bytes in example
        order, so the hash is stable across platforms and runs.
        """
        h = hashlib.sha256()
        h.update(np.int64(self.dim).tobytes())
        h.update(np.int64(self.num_classes).tobytes())
        h.update(self.preprocessing.encode())
        for ex in self.examples:
            h.update(np.int64(ex.id).astype("<i8").tobytes())
            h.update(np.int64(ex.label).astype("<i8").tobytes())
            h.update(ex.role.encode())
            h.update(np.ascontiguousarray(ex.features, dtype="<f4").tobytes())
        return h.hexdigest()


def preprocess(x: np.ndarray, preprocessing: str) -> np.ndarray:
    """Apply the declared front transform to a raw feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if preprocessing == PREP_NONE:
        return x
    if preprocessing == PREP_SCALE:
        return x / 255.0
    if preprocessing == PREP_L2:
        norm = np.linalg.norm(x)
        if norm == 0.0:
            raise DataError("cannot l2-normalize a zero vector")
        return x / norm
    raise DataError(f"unknown preprocessing {preprocessing!r}")


def preprocess_batch(X: np.ndarray, preprocessing: str) -> np.ndarray:
    """Row-wise version of `preprocess` (float64 output)."""
    X = np.asarray(X, dtype=np.float64)
    if preprocessing == PREP_NONE:
        return X
    if preprocessing == PREP_SCALE:
        return X / 255.0
    if preprocessing == PREP_L2:
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise DataError("cannot l2-normalize a zero vector")
        return X / norms
    raise DataError(f"unknown preprocessing {preprocessing!r}")


def preprocess_vjp(x: np.ndarray, grad_z: np.ndarray, preprocessing: str) -> np.ndarray:
    """Pull a gradient at the preprocessed point back to raw feature space.

    Returns J(x)^T grad_z for the preprocessing Jacobian J. For l2
    normalization with z = x/||x||: J^T g = (g - z (z.g)) / ||x||.
    """
    grad_z = np.asarray(grad_z, dtype=np.float64)
    if preprocessing == PREP_NONE:
        return grad_z
    if preprocessing == PREP_SCALE:
        return grad_z / 255.0
    if preprocessing == PREP_L2:
        x = np.asarray(x, dtype=np.float64)
        norm = np.linalg.norm(x)
        if norm == 0.0:
            raise DataError("cannot l2-normalize a zero vector")
        z = x / norm
        return (grad_z - z * np.dot(z, grad_z)) / norm
    raise DataError(f"unknown preprocessing {preprocessing!r}")


def make_example(id: int, features, label: int, role: str = ROLE_CLEAN) -> Example:
    return Example(id=id, features=np.asarray(features, dtype=np.float32), label=int(label), role=role)


def replace_role(example: Example, role: str) -> Example:
    return replace(example, role=role)
