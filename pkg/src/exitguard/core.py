"""Domain types, probability-vector utilities, dataset splitting, seeded RNG.

All probability math runs in 64-bit floats. Probabilities are clamped to
[1e-12, 1] before any logarithm (see :data:`PROB_FLOOR`); argmax ties break
toward the lowest class index so every downstream decision is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError

# Floor applied to probabilities before logarithms (log(0) guard).
PROB_FLOOR = 1e-12

# Largest |logit| accepted from files; guards downstream exp/log paths.
LOGIT_CAP = 1e6

# Stream ids carving one user seed into independent generators, one per
# pipeline stage. Never reuse an id for a new purpose.
STREAM_SYNTH = 1
STREAM_SPLIT = 2
STREAM_INIT = 3
STREAM_BATCH = 4
STREAM_MC = 5
STREAM_SHIFT = 6
STREAM_GRADCHECK = 7
STREAM_CURVE = 8

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible randomness source.

    Identical ``(seed, stream_id)`` pairs always yield identical sample
    sequences (numpy PCG64 seeded through ``SeedSequence``), independent of
    platform and of any other stream derived from the same seed.
    """

    seed: int
    stream_id: int

    def generator(self) -> np.random.Generator:
        return np.random.default_rng([self.seed & _MASK64, self.stream_id & _MASK64])

    def substream(self, index: int) -> np.random.Generator:
        """A child generator, e.g. one per Monte Carlo trial."""
        return np.random.default_rng(
            [self.seed & _MASK64, self.stream_id & _MASK64, index & _MASK64]
        )


def softmax(logits) -> np.ndarray:
    """Normalized exponentials with max-subtraction for stability.

    Accepts a vector or a batch (softmax over the last axis). The result is
    a valid probability vector for any finite input, including extreme
    logits; the argmax of the input is preserved.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise InvalidInputError("softmax: empty logit vector")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax: non-finite logits")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def argmax_class(p) -> int:
    """Index of the maximum probability; ties break to the lowest index."""
    v = np.asarray(p, dtype=np.float64)
    if v.size == 0:
        raise InvalidInputError("argmax_class: empty probability vector")
    return int(np.argmax(v))


def clamp_probs(p: np.ndarray) -> np.ndarray:
    """Clamp probabilities into [PROB_FLOOR, 1] ahead of a logarithm."""
    return np.clip(p, PROB_FLOOR, 1.0)


@dataclass(frozen=True)
class ExitRecord:
    """One sample: label plus a K x C matrix of per-exit logits.

    The unit of ingestion, calibration, and evaluation. Rows are exits in
    depth order, row K-1 being the final exit.
    """

    id: str
    label: int
    logits: np.ndarray

    def __post_init__(self) -> None:
        z = np.asarray(self.logits, dtype=np.float64)
        if z.ndim != 2:
            raise InvalidInputError(f"record {self.id!r}: logits must be a K x C matrix")
        k, c = z.shape
        if c < 2:
            raise InvalidInputError(f"record {self.id!r}: needs C >= 2 classes, got {c}")
        if k < 2:
            raise InvalidInputError(f"record {self.id!r}: needs K >= 2 exits, got {k}")
        if not np.all(np.isfinite(z)):
            raise InvalidInputError(f"record {self.id!r}: non-finite logits")
        if not 0 <= self.label < c:
            raise InvalidInputError(
                f"record {self.id!r}: label {self.label} outside [0, {c})"
            )
        z.flags.writeable = False
        object.__setattr__(self, "logits", z)

    @property
    def num_exits(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]


@dataclass(frozen=True)
class Sample:
    """A raw feature/label pair, the unit the training module consumes."""

    id: str
    label: int
    features: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 1 or x.size == 0:
            raise InvalidInputError(f"sample {self.id!r}: features must be a non-empty vector")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError(f"sample {self.id!r}: non-finite features")
        if self.label < 0:
            raise InvalidInputError(f"sample {self.id!r}: negative label")
        x.flags.writeable = False
        object.__setattr__(self, "features", x)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/val/cal/test partitions of one record set."""

    train: tuple = field(default_factory=tuple)
    val: tuple = field(default_factory=tuple)
    cal: tuple = field(default_factory=tuple)
    test: tuple = field(default_factory=tuple)

    def sizes(self) -> tuple[int, int, int, int]:
        return (len(self.train), len(self.val), len(self.cal), len(self.test))


def _allocate_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    # Largest-remainder allocation; ties go to the earlier split.
    raw = [f * n for f in fractions]
    base = [math.floor(r) for r in raw]
    leftover = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def split_dataset(records: Sequence, fractions: Sequence[float], rng: RngStream) -> DatasetSplit:
    """Deterministic shuffled partition into train/val/cal/test.

    Records are ordered by id (so any input ordering of the same set yields
    the same partition), shuffled with ``rng``, then cut into four runs whose
    sizes follow ``fractions`` by largest-remainder rounding.
    """
    if len(fractions) != 4:
        raise ConfigError(f"expected 4 split fractions, got {len(fractions)}")
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions):
        raise ConfigError("split fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions sum to {sum(fractions)!r}, expected 1")
    if not records:
        raise InvalidInputError("split_dataset: no records")

    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("split_dataset: duplicate record ids")

    ordered = sorted(records, key=lambda r: r.id)
    perm = rng.generator().permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]

    sizes = _allocate_sizes(len(shuffled), fractions)
    parts = []
    start = 0
    for size in sizes:
        parts.append(tuple(shuffled[start : start + size]))
        start += size
    return DatasetSplit(train=parts[0], val=parts[1], cal=parts[2], test=parts[3])


def check_uniform_shape(records: Sequence[ExitRecord]) -> tuple[int, int]:
    """Validate that all records share K and C; returns (K, C)."""
    if not records:
        raise InvalidInputError("empty record set")
    k, c = records[0].num_exits, records[0].num_classes
    for r in records:
        if r.num_exits != k or r.num_classes != c:
            raise InvalidInputError(
                f"record {r.id!r} has shape ({r.num_exits}, {r.num_classes}), "
                f"expected ({k}, {c})"
            )
    return k, c
