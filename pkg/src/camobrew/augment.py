"""Training-time data augmentation (horizontal flip only).

Flips operate on flat channel-major image features. Draws are seeded per
(train seed, epoch, example index) so every trial is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

AUG_STAGE_TAG = 0xA06


def flip_permutation(image_shape: tuple[int, int, int]) -> np.ndarray:
    """Column permutation that mirrors a (channels, height, width) image."""
    c, h, w = image_shape
    idx = np.arange(c * h * w).reshape(c, h, w)
    return idx[:, :, ::-1].ravel()


def hflip_rows(features: np.ndarray, image_shape: tuple[int, int, int]) -> np.ndarray:
    """Horizontally flip every row; applying twice returns the input."""
    perm = flip_permutation(image_shape)
    return np.asarray(features)[..., perm]


@dataclass(frozen=True)
class AugmentationPolicy:
    """`kind` is "none" or "hflip"; hflip mirrors each example with prob `p`."""

    kind: str = "none"
    p: float = 0.5

    def __post_init__(self):
        if self.kind not in ("none", "hflip"):
            raise ConfigError(f"unknown augmentation policy {self.kind!r}")
        if not (0.0 <= self.p <= 1.0):
            raise ConfigError("flip probability must be in [0, 1]")

    @property
    def active(self) -> bool:
        return self.kind != "none"

    def draw_mask(self, seed: int, epoch: int, n: int) -> np.ndarray:
        if not self.active:
            return np.zeros(n, dtype=bool)
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([seed, AUG_STAGE_TAG, epoch]))
        )
        return rng.random(n) < self.p
