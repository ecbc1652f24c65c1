"""Per-exit conformal risk control and heuristic baseline gates.

Each gated exit gets its own stopping threshold on the uncertainty score
``r = 1 - MSP``. Conformal calibration scans every candidate threshold
(the observed scores) and keeps the largest one whose finite-sample risk
bound stays within the target budget; when no candidate qualifies the exit
is disabled (``None`` threshold, the never-exit sentinel) and samples fall
through toward the final exit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ExitRecord, RngStream, check_uniform_shape, softmax
from .errors import CalibrationError, ConfigError, InvalidInputError
from .metrics import CostModel

METHOD_CRC = "crc"
METHOD_FIXED_MSP = "fixed_msp"
METHOD_ENTROPY = "entropy"
METHODS = (METHOD_CRC, METHOD_FIXED_MSP, METHOD_ENTROPY)

BUDGET_PER_EXIT = "per_exit"
BUDGET_UNION = "union"
BUDGETS = (BUDGET_PER_EXIT, BUDGET_UNION)


@dataclass(frozen=True)
class CalibrationPoint:
    """One calibration sample at one exit: uncertainty score + 0/1 error."""

    score: float
    error: bool

    def __post_init__(self) -> None:
        if not math.isfinite(self.score) or not 0.0 <= self.score < 1.0:
            raise InvalidInputError(f"calibration score {self.score!r} outside [0, 1)")


@dataclass(frozen=True)
class ThresholdSchedule:
    """Calibrated per-exit stopping thresholds with provenance.

    ``thresholds`` has one entry per gated exit (the final exit always
    accepts and carries no threshold); ``None`` marks an exit that never
    accepts. For ``crc`` and ``fixed_msp`` schedules the values are
    uncertainty-score thresholds; for ``entropy`` schedules they are
    entropy thresholds and the policy gates on entropy instead.
    """

    thresholds: tuple
    method: str
    delta: float | None
    budget: str
    cal_sizes: tuple

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if not self.thresholds:
            raise InvalidInputError("schedule needs at least one gated exit")
        if self.delta is not None and not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta {self.delta!r} outside (0, 1)")
        if len(self.cal_sizes) != len(self.thresholds):
            raise InvalidInputError("cal_sizes length must match thresholds")
        object.__setattr__(self, "thresholds", tuple(self.thresholds))
        object.__setattr__(self, "cal_sizes", tuple(int(n) for n in self.cal_sizes))

    @property
    def num_exits(self) -> int:
        return len(self.thresholds) + 1


@dataclass(frozen=True)
class RiskCurveRow:
    delta: float
    exit_rates: tuple
    exit_risks: tuple  # per-exit observed risk, None where the exit was empty
    overall_risk: float | None
    expected_compute: float


@dataclass(frozen=True)
class RiskCurve:
    """Observed risk / exit rates / compute across an increasing delta grid."""

    rows: tuple

    def __post_init__(self) -> None:
        deltas = [r.delta for r in self.rows]
        if any(b <= a for a, b in zip(deltas, deltas[1:])):
            raise InvalidInputError("risk curve deltas must be strictly increasing")
        object.__setattr__(self, "rows", tuple(self.rows))


def _crc_search(scores: np.ndarray, errors: np.ndarray, delta: float) -> float | None:
    """Largest candidate threshold whose conformal bound stays within delta.

    Candidates are the observed scores. For candidate ``t`` with
    ``n_acc = #{r_i <= t}`` accepted points of which ``E`` are errors, the
    finite-sample bound is ``B(t) = (E + 1) / (n_acc + 1)``; the +1 terms are
    the conformal correction that keeps the guarantee valid at finite n.
    Returns None (never exit) when no candidate qualifies.
    """
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    cum_err = np.cumsum(errors[order].astype(np.int64))
    candidates = np.unique(s)
    n_acc = np.searchsorted(s, candidates, side="right")
    bound = (cum_err[n_acc - 1] + 1.0) / (n_acc + 1.0)
    ok = bound <= delta
    if not np.any(ok):
        return None
    return float(candidates[np.nonzero(ok)[0][-1]])


def crc_threshold(points: Sequence[CalibrationPoint], delta: float) -> float | None:
    """Conformal risk control threshold search over one exit's scores.

    Parameters
    ----------
    points : calibration scores with their 0/1 misclassification errors.
    delta : target selective risk budget in (0, 1].

    Returns
    -------
    The largest qualifying threshold, or None when the exit must never
    accept at this budget.
    """
    if not 0.0 < delta <= 1.0:
        raise ConfigError(f"delta {delta!r} outside (0, 1]")
    if not points:
        raise CalibrationError("crc_threshold: no calibration points")
    scores = np.array([p.score for p in points], dtype=np.float64)
    errors = np.array([p.error for p in points], dtype=bool)
    return _crc_search(scores, errors, delta)


def exit_scores_and_errors(records: Sequence[ExitRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Uncertainty scores and 0/1 errors for every gated exit of every record.

    Returns (scores, errors) of shape (n, K-1): ``scores[i, j] = 1 - max_c
    p_j(c | x_i)`` and ``errors[i, j] = 1`` iff exit j misclassifies record i.
    """
    k, _ = check_uniform_shape(records)
    logits = np.stack([r.logits for r in records])  # (n, K, C)
    probs = softmax(logits)
    scores = 1.0 - np.max(probs[:, : k - 1, :], axis=2)
    preds = np.argmax(probs[:, : k - 1, :], axis=2)
    labels = np.array([r.label for r in records])[:, None]
    errors = preds != labels
    return scores, errors


def per_exit_delta(delta: float, num_exits: int, budget: str) -> float:
    """Budget handed to each gated exit: delta, or delta/(K-1) under union."""
    if budget not in BUDGETS:
        raise ConfigError(f"unknown budget {budget!r}")
    if budget == BUDGET_UNION:
        return delta / (num_exits - 1)
    return delta


def calibrate_all_exits(
    cal_records: Sequence[ExitRecord],
    delta: float,
    budget: str = BUDGET_PER_EXIT,
) -> ThresholdSchedule:
    """Run the per-exit conformal search over a calibration set.

    Each gated exit j gets scores ``r = 1 - MSP`` and errors
    ``argmax != label`` computed from its own logits, then an independent
    threshold search at budget ``delta`` (or ``delta / (K-1)`` when
    ``budget="union"``, which bounds the probability that any exit
    overshoots by ``delta`` overall).
    """
    if not cal_records:
        raise CalibrationError("calibrate_all_exits: empty calibration set")
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"delta {delta!r} outside (0, 1)")
    k, _ = check_uniform_shape(cal_records)
    scores, errors = exit_scores_and_errors(cal_records)
    budget_delta = per_exit_delta(delta, k, budget)

    thresholds = tuple(
        _crc_search(scores[:, j], errors[:, j], budget_delta) for j in range(k - 1)
    )
    return ThresholdSchedule(
        thresholds=thresholds,
        method=METHOD_CRC,
        delta=delta,
        budget=budget,
        cal_sizes=(len(cal_records),) * (k - 1),
    )


def heuristic_schedule(kind: str, value: float, num_exits: int) -> ThresholdSchedule:
    """Uncalibrated baseline gate applied identically at every exit.

    ``fixed_msp`` accepts when MSP >= value (stored as the uncertainty
    threshold 1 - value); ``entropy`` accepts when entropy < value.
    Neither carries a risk guarantee.
    """
    if num_exits < 2:
        raise ConfigError("need at least two exits")
    if kind == METHOD_FIXED_MSP:
        if not 0.0 < value < 1.0:
            raise ConfigError(f"fixed MSP value {value!r} outside (0, 1)")
        thresholds = (1.0 - value,) * (num_exits - 1)
    elif kind == METHOD_ENTROPY:
        if not (math.isfinite(value) and value >= 0.0):
            raise ConfigError(f"entropy threshold {value!r} must be >= 0")
        thresholds = (value,) * (num_exits - 1)
    else:
        raise ConfigError(f"unknown heuristic kind {kind!r}")
    return ThresholdSchedule(
        thresholds=thresholds,
        method=kind,
        delta=None,
        budget="none",
        cal_sizes=(0,) * (num_exits - 1),
    )


def risk_curve(
    pool: Sequence[ExitRecord],
    deltas: Sequence[float],
    cal_fraction: float,
    cost: CostModel,
    rng: RngStream,
    budget: str = BUDGET_PER_EXIT,
) -> RiskCurve:
    """Calibrate/evaluate across a delta grid on one fixed cal/test split.

    The pool is shuffled once with ``rng`` and cut at ``cal_fraction``; for
    each delta the calibration half produces a schedule that is then scored
    on the held-out half.
    """
    from .policy import evaluate_policy  # deferred: policy imports this module

    deltas = [float(d) for d in deltas]
    if not deltas:
        raise ConfigError("risk_curve: empty delta grid")
    if any(not 0.0 < d < 1.0 for d in deltas):
        raise ConfigError("risk_curve: deltas must lie in (0, 1)")
    if any(b <= a for a, b in zip(deltas, deltas[1:])):
        raise ConfigError("risk_curve: deltas must be strictly increasing")
    if not 0.0 < cal_fraction < 1.0:
        raise ConfigError(f"cal_fraction {cal_fraction!r} outside (0, 1)")

    n = len(pool)
    n_cal = int(round(cal_fraction * n))
    if n_cal < 1 or n - n_cal < 1:
        raise InvalidInputError("risk_curve: pool too small to split")
    perm = rng.generator().permutation(n)
    cal = [pool[i] for i in perm[:n_cal]]
    test = [pool[i] for i in perm[n_cal:]]

    rows = []
    for d in deltas:
        schedule = calibrate_all_exits(cal, d, budget)
        report = evaluate_policy(test, schedule, cost)
        rows.append(
            RiskCurveRow(
                delta=d,
                exit_rates=report.exit_rates,
                exit_risks=tuple(report.exit_selective_risk),
                overall_risk=report.overall_early_risk,
                expected_compute=report.expected_compute,
            )
        )
    return RiskCurve(rows=tuple(rows))
