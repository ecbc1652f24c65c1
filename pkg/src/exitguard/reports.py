"""CSV report emitters with deterministic column order and float text.

Undefined values (e.g. selective risk over an empty exit) are written as
empty cells. All floats go through ``repr`` so identical inputs always
produce byte-identical files.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .calib import RiskCurve, ThresholdSchedule
from .core import ExitRecord, check_uniform_shape, softmax
from .errors import InvalidInputError
from .metrics import BinStat, EceConfig, reliability_bins
from .policy import PolicyReport, ShiftRow, ValidityResult

POLICY_REPORT_FILE = "policy_report.csv"
RISK_CURVE_FILE = "risk_curve.csv"
VALIDITY_FILE = "validity.csv"
RELIABILITY_FILE = "reliability_bins.csv"
THRESHOLDS_FILE = "thresholds.txt"
SHIFT_FILE = "shift.csv"


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header: Sequence[str], rows) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    os.replace(tmp, path)


def write_policy_report(report: PolicyReport, path) -> None:
    """Summary row (policy, accuracy, expected depth, observed risk) plus
    one row per exit with its rate, selective risk, NLL, and ECE."""
    header = [
        "policy",
        "scope",
        "exit",
        "n_samples",
        "accuracy",
        "expected_compute",
        "overall_early_risk",
        "exit_rate",
        "selective_risk",
        "nll",
        "ece",
    ]
    rows = [
        [
            report.policy,
            "overall",
            None,
            report.n_samples,
            report.accuracy,
            report.expected_compute,
            report.overall_early_risk,
            None,
            None,
            None,
            None,
        ]
    ]
    for j in range(len(report.exit_rates)):
        rows.append(
            [
                report.policy,
                "exit",
                j + 1,
                None,
                None,
                None,
                None,
                float(report.exit_rates[j]),
                report.exit_selective_risk[j],
                report.exit_nll[j],
                report.exit_ece[j],
            ]
        )
    _write_csv(path, header, rows)


def write_risk_curve(curve: RiskCurve, path) -> None:
    header = ["delta", "exit", "exit_rate", "observed_risk", "expected_compute", "overall_risk"]
    rows = []
    for row in curve.rows:
        for j, (rate, risk) in enumerate(zip(row.exit_rates, row.exit_risks)):
            rows.append([row.delta, j + 1, rate, risk, row.expected_compute, row.overall_risk])
    _write_csv(path, header, rows)


def write_validity(result: ValidityResult, path) -> None:
    header = [
        "delta",
        "exit",
        "mean_risk",
        "std_error",
        "trials_used",
        "trials_skipped",
        "cal_size",
        "test_size",
    ]
    rows = [
        [
            result.delta,
            e.exit_index,
            e.mean_risk,
            e.std_error,
            e.n_used,
            e.n_skipped,
            result.cal_size,
            result.test_size,
        ]
        for e in result.exits
    ]
    _write_csv(path, header, rows)


def exit_reliability_table(
    records: Sequence[ExitRecord], cfg: EceConfig = EceConfig()
) -> dict[int, list[BinStat]]:
    """Reliability bins per exit over MSP confidence of the full record set."""
    if not records:
        raise InvalidInputError("reliability table: empty record set")
    k, _ = check_uniform_shape(records)
    logits = np.stack([r.logits for r in records])
    probs = softmax(logits)
    labels = np.array([r.label for r in records])
    table = {}
    for j in range(k):
        conf = np.max(probs[:, j, :], axis=1)
        correct = np.argmax(probs[:, j, :], axis=1) == labels
        table[j + 1] = reliability_bins(conf, correct, cfg)
    return table


def write_reliability_bins(table: dict[int, list[BinStat]], path) -> None:
    header = ["exit", "bin", "lower", "upper", "count", "mean_confidence", "accuracy", "gap"]
    rows = []
    for exit_index in sorted(table):
        for s in table[exit_index]:
            rows.append(
                [exit_index, s.index, s.lower, s.upper, s.count, s.mean_confidence,
                 s.accuracy, s.gap]
            )
    _write_csv(path, header, rows)


def write_shift_table(rows: Sequence[ShiftRow], path) -> None:
    k = len(rows[0].exit_rates) if rows else 0
    header = ["sigma", "accuracy", "observed_risk", "expected_compute"] + [
        f"exit_rate_{j + 1}" for j in range(k)
    ]
    out = [
        [r.sigma, r.accuracy, r.observed_risk, r.expected_compute, *r.exit_rates]
        for r in rows
    ]
    _write_csv(path, header, out)
