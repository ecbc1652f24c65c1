"""Synthetic Gaussian-blob classification data.

Cluster means sit on a circle in the first two feature dimensions so every
pair of adjacent means is exactly ``separation`` apart (non-adjacent pairs
are farther); all remaining dimensions are pure noise. Class labels are
balanced up to rounding.
"""

from __future__ import annotations

import math

import numpy as np

from .core import RngStream, Sample
from .errors import ConfigError


def blob_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Deterministic mean placement with pairwise distance >= separation."""
    if num_classes < 2 or dim < 2:
        raise ConfigError("need num_classes >= 2 and dim >= 2")
    radius = separation / (2.0 * math.sin(math.pi / num_classes))
    means = np.zeros((num_classes, dim))
    for c in range(num_classes):
        angle = 2.0 * math.pi * c / num_classes
        means[c, 0] = radius * math.cos(angle)
        means[c, 1] = radius * math.sin(angle)
    return means


def synth_blobs(
    n: int, num_classes: int, dim: int, separation: float, rng: RngStream
) -> list[Sample]:
    """``n`` unit-covariance Gaussian samples around the deterministic means.

    separation = 0 collapses all means onto the origin, so the Bayes
    accuracy degenerates to chance level 1/C; negative separation is
    rejected.
    """
    if n < num_classes:
        raise ConfigError(f"need n >= num_classes, got n={n}, C={num_classes}")
    if separation < 0:
        raise ConfigError(f"separation {separation!r} must be >= 0")
    means = blob_means(num_classes, dim, separation)
    g = rng.generator()
    width = max(6, len(str(n - 1)))
    samples = []
    for i in range(n):
        label = i % num_classes
        x = means[label] + g.standard_normal(dim)
        samples.append(Sample(id=f"b{i:0{width}d}", label=label, features=x))
    return samples
