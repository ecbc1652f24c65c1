"""Confidence signals and evaluation metrics.

MSP, its complement (the stopping-score), entropy, NLL, binned calibration
error, selective risk over an accepted subset, and expected compute under a
per-exit cost model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PROB_FLOOR, clamp_probs
from .errors import InvalidInputError


@dataclass(frozen=True)
class CostModel:
    """Cumulative cost to reach each exit (normalized depth proxy).

    Costs are positive and non-decreasing; by convention the final exit
    costs 1.0 when built via :meth:`normalized_depth`.
    """

    costs: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.costs, dtype=np.float64)
        if c.ndim != 1 or c.size == 0:
            raise InvalidInputError("cost model needs a non-empty cost vector")
        if not np.all(np.isfinite(c)) or np.any(c <= 0):
            raise InvalidInputError("costs must be positive finite reals")
        if np.any(np.diff(c) < 0):
            raise InvalidInputError("costs must be non-decreasing in depth")
        c.flags.writeable = False
        object.__setattr__(self, "costs", c)

    @classmethod
    def normalized_depth(cls, num_exits: int) -> "CostModel":
        """c_j = j / K for exits after each of K equal-depth stages."""
        if num_exits < 1:
            raise InvalidInputError("need at least one exit")
        return cls(np.arange(1, num_exits + 1, dtype=np.float64) / num_exits)

    @property
    def num_exits(self) -> int:
        return self.costs.size


@dataclass(frozen=True)
class EceConfig:
    """Equal-width binning on [0, 1] for calibration error."""

    num_bins: int = 15

    def __post_init__(self) -> None:
        if self.num_bins < 1:
            raise InvalidInputError("num_bins must be >= 1")


@dataclass(frozen=True)
class BinStat:
    """One reliability bin: (lower, upper] except the first, which is closed."""

    index: int
    lower: float
    upper: float
    count: int
    mean_confidence: float | None
    accuracy: float | None

    @property
    def gap(self) -> float | None:
        if self.count == 0:
            return None
        return abs(self.accuracy - self.mean_confidence)


def msp(p) -> float:
    """Maximum softmax probability, the default confidence signal."""
    v = np.asarray(p, dtype=np.float64)
    if v.size == 0:
        raise InvalidInputError("msp: empty probability vector")
    return float(np.max(v))


def uncertainty_score(p) -> float:
    """1 - MSP; low means confident. The score the stopping rule gates on."""
    return 1.0 - msp(p)


def entropy(p) -> float:
    """Shannon entropy in nats, with 0 * ln 0 := 0."""
    v = np.asarray(p, dtype=np.float64)
    if v.size == 0:
        raise InvalidInputError("entropy: empty probability vector")
    h = -float(np.sum(v * np.log(clamp_probs(v))))
    return max(h, 0.0)


def nll(p, y: int) -> float:
    """Negative log-likelihood of the true class, clamped away from log(0)."""
    v = np.asarray(p, dtype=np.float64)
    if not 0 <= y < v.size:
        raise InvalidInputError(f"nll: label {y} outside [0, {v.size})")
    return -float(np.log(max(float(v[y]), PROB_FLOOR)))


def _canonical_order(confidences: np.ndarray, correct: np.ndarray):
    # Sorting by (confidence, correctness) makes every bin reduction a
    # fixed-order sum, so the result is exactly permutation-invariant.
    order = np.lexsort((correct, confidences))
    return confidences[order], correct[order]


def reliability_bins(confidences, correct, cfg: EceConfig = EceConfig()) -> list[BinStat]:
    """Per-bin counts, mean confidence, and accuracy over equal-width bins."""
    c = np.asarray(confidences, dtype=np.float64)
    k = np.asarray(correct, dtype=bool)
    if c.size == 0:
        raise InvalidInputError("reliability_bins: empty input")
    if c.shape != k.shape or c.ndim != 1:
        raise InvalidInputError("reliability_bins: confidences/correct shape mismatch")
    if np.any((c < 0) | (c > 1)) or not np.all(np.isfinite(c)):
        raise InvalidInputError("reliability_bins: confidences must lie in [0, 1]")

    c, k = _canonical_order(c, k)
    edges = np.linspace(0.0, 1.0, cfg.num_bins + 1)
    # Right-closed bins; values equal to an interior edge fall in the bin
    # below, and 1.0 lands in the last bin.
    idx = np.digitize(c, edges[1:-1], right=True)

    stats = []
    for b in range(cfg.num_bins):
        mask = idx == b
        count = int(np.sum(mask))
        if count == 0:
            stats.append(BinStat(b, float(edges[b]), float(edges[b + 1]), 0, None, None))
        else:
            stats.append(
                BinStat(
                    b,
                    float(edges[b]),
                    float(edges[b + 1]),
                    count,
                    float(np.mean(c[mask])),
                    float(np.mean(k[mask])),
                )
            )
    return stats


def ece(confidences, correct, cfg: EceConfig = EceConfig()) -> float:
    """Expected calibration error: bin-weighted |accuracy - confidence|."""
    stats = reliability_bins(confidences, correct, cfg)
    n = sum(s.count for s in stats)
    total = 0.0
    for s in stats:
        if s.count:
            total += (s.count / n) * s.gap
    return total


def selective_risk(errors) -> float | None:
    """Error fraction among accepted samples; None when nothing was accepted."""
    e = np.asarray(errors, dtype=bool)
    if e.size == 0:
        return None
    return float(np.mean(e))


def expected_compute(exit_rates, cost: CostModel) -> float:
    """Dot product of exit rates with cumulative costs."""
    pi = np.asarray(exit_rates, dtype=np.float64)
    if pi.size != cost.num_exits:
        raise InvalidInputError(
            f"expected_compute: {pi.size} rates vs {cost.num_exits} costs"
        )
    if np.any(pi < 0):
        raise InvalidInputError("expected_compute: negative exit rate")
    if abs(float(np.sum(pi)) - 1.0) > 1e-9:
        raise InvalidInputError(f"expected_compute: rates sum to {float(np.sum(pi))!r}")
    return float(pi @ cost.costs)
