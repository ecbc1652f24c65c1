"""Shared fixtures: trained toy pipelines reused across test modules.

All fixtures are session-scoped and fully deterministic; the heavyweight
ones time themselves so the acceptance tests can assert their runtime
budgets.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest

from exitguard.calib import calibrate_all_exits
from exitguard.core import (
    ExitRecord,
    RngStream,
    STREAM_SPLIT,
    STREAM_SYNTH,
    softmax,
    split_dataset,
)
from exitguard.metrics import CostModel
from exitguard.policy import evaluate_policy
from exitguard.synth import synth_blobs
from exitguard.train import (
    LossConfig,
    TrainConfig,
    default_model,
    export_logits,
    train_loop,
)


@dataclass
class PipelineRun:
    model: object
    split: object
    cal_records: list
    test_records: list
    elapsed: float


def run_pipeline(
    seed: int,
    n: int,
    separation: float,
    fractions,
    widths,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    num_classes: int = 3,
    dim: int = 8,
) -> PipelineRun:
    start = time.monotonic()
    samples = synth_blobs(n, num_classes, dim, separation, RngStream(seed, STREAM_SYNTH))
    split = split_dataset(samples, fractions, RngStream(seed, STREAM_SPLIT))
    model = default_model(dim, num_classes, widths, seed=seed)
    result = train_loop(split, model, train_cfg, loss_cfg)
    cal = export_logits(result.model, split.cal)
    test = export_logits(result.model, split.test)
    return PipelineRun(
        model=result.model,
        split=split,
        cal_records=cal,
        test_records=test,
        elapsed=time.monotonic() - start,
    )


@pytest.fixture(scope="session")
def sep4_run() -> PipelineRun:
    """Well-trained separation-4 pipeline (criteria 3 and 7)."""
    return run_pipeline(
        seed=3,
        n=6000,
        separation=4.0,
        fractions=(0.6, 0.1, 0.15, 0.15),
        widths=(64, 64, 64),
        loss_cfg=LossConfig(alpha=1.0, beta=0.5, temperature=4.0),
        train_cfg=TrainConfig(epochs=30, peak_lr=0.005, seed=3, ema_momentum=0.99),
    )


@pytest.fixture(scope="session")
def sep4_pool(sep4_run) -> list:
    """Exchangeable 800-record pool (n_cal = n_test = 400) off training data."""
    pool = sorted(sep4_run.cal_records + sep4_run.test_records, key=lambda r: r.id)
    return pool[:800]


ABLATION_FRACTIONS = (0.2, 0.05, 0.375, 0.375)
ABLATION_WIDTHS = (32, 32, 32, 32)
ABLATION_WEIGHTS = (0.1, 0.15, 0.25, 0.5)


def _ablation_loss(alpha: float, beta: float) -> LossConfig:
    return LossConfig(
        exit_weights=ABLATION_WEIGHTS, alpha=alpha, beta=beta, temperature=2.0
    )


def _ablation_train(seed: int) -> TrainConfig:
    return TrainConfig(epochs=15, peak_lr=0.01, seed=seed, ema_momentum=0.95)


@pytest.fixture(scope="session")
def ablation_depths() -> dict:
    """Expected depth at delta=0.05 for full vs no-distill over 5 seeds."""
    start = time.monotonic()
    cost = CostModel.normalized_depth(len(ABLATION_WIDTHS))
    full, nodistill = [], []
    for seed in range(5):
        depths = {}
        for arm, (alpha, beta) in {"full": (1.0, 0.5), "nodistill": (0.0, 0.0)}.items():
            run = run_pipeline(
                seed=seed,
                n=6000,
                separation=3.0,
                fractions=ABLATION_FRACTIONS,
                widths=ABLATION_WIDTHS,
                loss_cfg=_ablation_loss(alpha, beta),
                train_cfg=_ablation_train(seed),
            )
            schedule = calibrate_all_exits(run.cal_records, 0.05)
            report = evaluate_policy(run.test_records, schedule, cost)
            depths[arm] = report.expected_compute
        full.append(depths["full"])
        nodistill.append(depths["nodistill"])
    return {"full": full, "nodistill": nodistill, "elapsed": time.monotonic() - start}


def sharpen_exit1(record: ExitRecord, power: float = 0.25) -> ExitRecord:
    """Overconfidence construction: raise exit-1 MSP to ``power``, renormalize."""
    z = np.array(record.logits)
    p = softmax(z[0])
    top = int(np.argmax(p))
    p[top] = p[top] ** power
    p = p / p.sum()
    z[0] = np.log(p)
    return ExitRecord(id=record.id, label=record.label, logits=z)


@pytest.fixture(scope="session")
def overconfident_split() -> tuple:
    """Sharpened-exit-1 pool from a CE-only run, split 50/50 cal/test."""
    run = run_pipeline(
        seed=0,
        n=10000,
        separation=2.0,
        fractions=(0.12, 0.05, 0.415, 0.415),
        widths=ABLATION_WIDTHS,
        loss_cfg=_ablation_loss(0.0, 0.0),
        train_cfg=TrainConfig(epochs=8, peak_lr=0.01, seed=0, ema_momentum=0.95),
    )
    pool = [sharpen_exit1(r) for r in run.cal_records + run.test_records]
    perm = RngStream(0, 77).generator().permutation(len(pool))
    half = len(pool) // 2
    cal = [pool[i] for i in perm[:half]]
    test = [pool[i] for i in perm[half:]]
    return cal, test


@pytest.fixture(scope="session")
def tiny_run() -> PipelineRun:
    """Fast small pipeline for policy/shift tests."""
    return run_pipeline(
        seed=1,
        n=900,
        separation=4.0,
        fractions=(0.6, 0.1, 0.15, 0.15),
        widths=(16, 16, 16),
        loss_cfg=LossConfig(),
        train_cfg=TrainConfig(epochs=20, peak_lr=0.01, seed=1, ema_momentum=0.95),
    )
