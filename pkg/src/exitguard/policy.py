"""Earliest-exit inference and policy evaluation.

A sample exits at the first gated head whose score passes its threshold,
falling through to the final exit otherwise. Evaluation aggregates exit
rates, selective risks, head-quality metrics (NLL/ECE over the full set),
and expected compute; a Monte Carlo loop over exchangeable resplits checks
that calibrated thresholds keep per-exit selective risk within budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .calib import (
    METHOD_ENTROPY,
    ThresholdSchedule,
    _crc_search,
    exit_scores_and_errors,
    per_exit_delta,
)
from .core import (
    PROB_FLOOR,
    ExitRecord,
    RngStream,
    Sample,
    check_uniform_shape,
    softmax,
)
from .errors import InvalidInputError
from .metrics import CostModel, EceConfig, ece as ece_metric
from . import train as train_mod


@dataclass(frozen=True)
class ExitDecision:
    """Outcome of the earliest-exit rule for one record.

    ``exit_index`` is 1-based (K means the final exit). ``scores`` holds the
    gate score at every gated exit: uncertainty for crc/fixed_msp schedules,
    entropy for entropy schedules.
    """

    exit_index: int
    predicted_class: int
    confidence: float
    scores: tuple


@dataclass(frozen=True)
class PolicyReport:
    """Aggregate evaluation of an exit policy on one record set.

    ``exit_selective_risk[j]`` is the error rate among samples that exited
    at head j+1 (None when no sample did); ``overall_early_risk`` pools all
    samples that exited before the final head. ``exit_nll``/``exit_ece`` are
    head-quality metrics over the full set, not just exited samples.
    """

    policy: str
    n_samples: int
    accuracy: float
    exit_rates: tuple
    exit_selective_risk: tuple
    overall_early_risk: float | None
    expected_compute: float
    exit_nll: tuple
    exit_ece: tuple


@dataclass(frozen=True)
class ExitValidity:
    exit_index: int
    mean_risk: float | None
    std_error: float | None
    n_used: int
    n_skipped: int


@dataclass(frozen=True)
class ValidityResult:
    """Per-exit Monte Carlo means of observed selective risk."""

    delta: float
    budget: str
    trials: int
    cal_size: int
    test_size: int
    exits: tuple


@dataclass(frozen=True)
class ShiftRow:
    sigma: float
    accuracy: float
    observed_risk: float | None
    expected_compute: float
    exit_rates: tuple


def _entropy_rows(probs: np.ndarray) -> np.ndarray:
    # probs: (..., C); 0 * log(floor) is exactly 0, so one-hot rows give 0.
    h = -np.sum(probs * np.log(np.clip(probs, PROB_FLOOR, 1.0)), axis=-1)
    return np.maximum(h, 0.0)


def _gate_scores(probs: np.ndarray, schedule: ThresholdSchedule) -> np.ndarray:
    """Scores the gate compares, per gated exit: (n, K-1)."""
    gated = probs[..., : schedule.num_exits - 1, :]
    if schedule.method == METHOD_ENTROPY:
        return _entropy_rows(gated)
    return 1.0 - np.max(gated, axis=-1)


def _acceptance(scores: np.ndarray, schedule: ThresholdSchedule) -> np.ndarray:
    """Boolean acceptance per gated exit; entropy gates strictly."""
    accept = np.zeros(scores.shape, dtype=bool)
    for j, tau in enumerate(schedule.thresholds):
        if tau is None:
            continue
        if schedule.method == METHOD_ENTROPY:
            accept[..., j] = scores[..., j] < tau
        else:
            accept[..., j] = scores[..., j] <= tau
    return accept


def choose_exit(record: ExitRecord, schedule: ThresholdSchedule) -> ExitDecision:
    """Exit at the smallest gated head that accepts, else at the final head."""
    if record.num_exits != schedule.num_exits:
        raise InvalidInputError(
            f"record has {record.num_exits} exits, schedule expects {schedule.num_exits}"
        )
    probs = softmax(record.logits)  # (K, C)
    scores = _gate_scores(probs, schedule)
    accept = _acceptance(scores, schedule)
    hits = np.nonzero(accept)[0]
    exit0 = int(hits[0]) if hits.size else record.num_exits - 1
    return ExitDecision(
        exit_index=exit0 + 1,
        predicted_class=int(np.argmax(probs[exit0])),
        confidence=float(np.max(probs[exit0])),
        scores=tuple(float(s) for s in scores),
    )


def evaluate_policy(
    test: Sequence[ExitRecord],
    schedule: ThresholdSchedule,
    cost: CostModel,
    ece_cfg: EceConfig = EceConfig(),
) -> PolicyReport:
    """Apply the earliest-exit rule to a test set and aggregate the outcome.

    Records are processed in id order so the report is exactly invariant to
    the input ordering.
    """
    if not test:
        raise InvalidInputError("evaluate_policy: empty test set")
    k, _ = check_uniform_shape(test)
    if k != schedule.num_exits:
        raise InvalidInputError(
            f"records have {k} exits, schedule expects {schedule.num_exits}"
        )
    if cost.num_exits != k:
        raise InvalidInputError(f"cost model has {cost.num_exits} entries, need {k}")

    records = sorted(test, key=lambda r: r.id)
    n = len(records)
    logits = np.stack([r.logits for r in records])  # (n, K, C)
    labels = np.array([r.label for r in records])
    probs = softmax(logits)
    msp_all = np.max(probs, axis=2)  # (n, K)
    preds = np.argmax(probs, axis=2)
    correct = preds == labels[:, None]

    scores = _gate_scores(probs, schedule)
    accept = _acceptance(scores, schedule)
    any_accept = accept.any(axis=1)
    first = np.argmax(accept, axis=1)
    exit0 = np.where(any_accept, first, k - 1)

    counts = np.bincount(exit0, minlength=k)
    exit_rates = counts / n
    chosen_correct = correct[np.arange(n), exit0]

    per_exit_risk = []
    for j in range(k):
        mask = exit0 == j
        per_exit_risk.append(float(np.mean(~correct[mask, j])) if mask.any() else None)

    early = exit0 < k - 1
    overall_early = float(np.mean(~chosen_correct[early])) if early.any() else None

    true_probs = np.clip(probs[np.arange(n)[:, None], np.arange(k)[None, :], labels[:, None]],
                         PROB_FLOOR, 1.0)
    exit_nll = tuple(float(v) for v in np.mean(-np.log(true_probs), axis=0))
    exit_ece = tuple(ece_metric(msp_all[:, j], correct[:, j], ece_cfg) for j in range(k))

    return PolicyReport(
        policy=schedule.method,
        n_samples=n,
        accuracy=float(np.mean(chosen_correct)),
        exit_rates=tuple(exit_rates.tolist()),
        exit_selective_risk=tuple(per_exit_risk),
        overall_early_risk=overall_early,
        expected_compute=float(exit_rates @ cost.costs),
        exit_nll=exit_nll,
        exit_ece=exit_ece,
    )


def mc_validity(
    pool: Sequence[ExitRecord],
    delta: float,
    trials: int,
    cal_fraction: float,
    rng: RngStream,
    budget: str = "per_exit",
) -> ValidityResult:
    """Monte Carlo check of the per-exit risk guarantee under exchangeability.

    Each trial draws a fresh random cal/test split of the pool, calibrates
    every gated exit at the (budgeted) delta, and measures the selective
    risk on the test half over each exit's own acceptance set
    ``{r_j <= tau_j}`` (the quantity the guarantee bounds — not the cascaded
    policy risk). Trials where an exit accepts nothing are skipped for that
    exit and counted.

    Trial t draws its permutation from ``rng.substream(t)``, so results do
    not depend on scheduling or trial order.
    """
    if trials < 1:
        raise InvalidInputError("mc_validity: trials must be >= 1")
    if not 0.0 < delta <= 1.0:
        raise InvalidInputError(f"mc_validity: delta {delta!r} outside (0, 1]")
    k, _ = check_uniform_shape(pool)
    n = len(pool)
    n_cal = int(round(cal_fraction * n))
    if n_cal < 1 or n - n_cal < 1:
        raise InvalidInputError("mc_validity: degenerate pool split")

    scores, errors = exit_scores_and_errors(pool)
    budget_delta = per_exit_delta(delta, k, budget)

    risks: list[list[float]] = [[] for _ in range(k - 1)]
    skipped = [0] * (k - 1)
    for t in range(trials):
        perm = rng.substream(t).permutation(n)
        cal_idx, test_idx = perm[:n_cal], perm[n_cal:]
        for j in range(k - 1):
            tau = _crc_search(scores[cal_idx, j], errors[cal_idx, j], budget_delta)
            if tau is None:
                skipped[j] += 1
                continue
            accepted = scores[test_idx, j] <= tau
            if not accepted.any():
                skipped[j] += 1
                continue
            risks[j].append(float(np.mean(errors[test_idx, j][accepted])))

    exits = []
    for j in range(k - 1):
        used = risks[j]
        if used:
            mean = float(np.mean(used))
            se = float(np.std(used, ddof=1) / np.sqrt(len(used))) if len(used) > 1 else 0.0
        else:
            mean, se = None, None
        exits.append(
            ExitValidity(
                exit_index=j + 1,
                mean_risk=mean,
                std_error=se,
                n_used=len(used),
                n_skipped=skipped[j],
            )
        )
    return ValidityResult(
        delta=delta,
        budget=budget,
        trials=trials,
        cal_size=n_cal,
        test_size=n - n_cal,
        exits=tuple(exits),
    )


def shift_evaluate(
    model: "train_mod.MultiExitMlp",
    samples: Sequence[Sample],
    noise_sigmas: Sequence[float],
    schedule: ThresholdSchedule,
    cost: CostModel,
    rng: RngStream,
) -> list[ShiftRow]:
    """Policy behaviour under additive Gaussian input noise.

    For each sigma the inputs are perturbed, per-exit logits are recomputed
    through the model, and the policy is re-evaluated. sigma = 0 reproduces
    the clean evaluation exactly.
    """
    if not samples:
        raise InvalidInputError("shift_evaluate: empty sample set")
    rows = []
    for i, sigma in enumerate(noise_sigmas):
        if sigma < 0:
            raise InvalidInputError(f"noise sigma {sigma!r} must be >= 0")
        g = rng.substream(i)
        noisy = []
        for s in samples:
            x = s.features + sigma * g.standard_normal(s.features.size)
            noisy.append(Sample(id=s.id, label=s.label, features=x))
        records = train_mod.export_logits(model, noisy)
        report = evaluate_policy(records, schedule, cost)
        rows.append(
            ShiftRow(
                sigma=float(sigma),
                accuracy=report.accuracy,
                observed_risk=report.overall_early_risk,
                expected_compute=report.expected_compute,
                exit_rates=report.exit_rates,
            )
        )
    return rows
