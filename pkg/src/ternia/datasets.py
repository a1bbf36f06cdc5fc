"""Small synthetic classification sets used for calibration and training."""

from __future__ import annotations

import numpy as np

from .core import Dataset


def gaussian_mixture(
    n: int, classes: int = 4, dim: int = 2, spread: float = 2.0, std: float = 1.0, seed: int = 0
) -> Dataset:
    """``classes`` isotropic Gaussians with centres on a ring (dim 2) or random directions."""
    rng = np.random.default_rng(seed)
    if dim == 2:
        angles = 2 * np.pi * np.arange(classes) / classes
        centres = spread * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    else:
        centres = rng.normal(size=(classes, dim))
        centres *= spread / np.linalg.norm(centres, axis=1, keepdims=True)
    labels = rng.integers(0, classes, size=n)
    feats = centres[labels] + std * rng.normal(size=(n, dim))
    return Dataset(feats.astype(np.float32), labels)


def two_spirals(n: int, noise: float = 0.2, turns: float = 1.5, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    t = np.sqrt(rng.uniform(0, 1, size=n)) * turns * 2 * np.pi
    sign = np.where(labels == 0, 1.0, -1.0)
    feats = np.stack([sign * t * np.cos(t), sign * t * np.sin(t)], axis=1) / (turns * np.pi)
    feats += noise * rng.normal(size=feats.shape) / (turns * np.pi)
    return Dataset(feats.astype(np.float32), labels)


def linearly_separable(n: int, dim: int = 2, margin: float = 0.5, seed: int = 0) -> Dataset:
    """Two classes split by the hyperplane x0 + x1 = 0 with a gap of ``margin``."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    feats = rng.uniform(-2, 2, size=(n, dim))
    normal = np.zeros(dim)
    normal[:2] = 1 / np.sqrt(2)
    dist = feats @ normal
    shift = np.where(labels == 1, 1.0, -1.0) * (margin + np.abs(dist)) - dist
    feats += shift[:, None] * normal
    return Dataset(feats.astype(np.float32), labels)


def split(data: Dataset, test_fraction: float = 0.25, seed: int = 0) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(data))
    cut = int(round(len(data) * (1 - test_fraction)))
    return data.subset(np.sort(idx[:cut])), data.subset(np.sort(idx[cut:]))


GENERATORS = {
    "gaussians": gaussian_mixture,
    "spirals": two_spirals,
    "separable": linearly_separable,
}
