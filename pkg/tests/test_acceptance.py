"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` to see the per-criterion
lines as they execute. Tolerances are pinned here, not configurable.
"""

import filecmp
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from exitguard.calib import CalibrationPoint, calibrate_all_exits, crc_threshold, exit_scores_and_errors
from exitguard.cli import main
from exitguard.core import RngStream, softmax
from exitguard.metrics import CostModel, ece, entropy, expected_compute, nll
from exitguard.policy import evaluate_policy, mc_validity
from exitguard.train import LossConfig, default_model, dkd_loss, grad_check, kd_loss


@contextmanager
def criterion(number: int, label: str):
    try:
        yield
    except Exception:
        print(f"ACCEPTANCE {number:02d} FAIL — {label}")
        raise
    print(f"ACCEPTANCE {number:02d} PASS — {label}")


def brute_force_threshold(scores, errors, delta):
    best = None
    for tau in sorted(set(scores)):
        n_acc = sum(1 for s in scores if s <= tau)
        bad = sum(1 for s, e in zip(scores, errors) if s <= tau and e)
        if (bad + 1) / (n_acc + 1) <= delta:
            best = tau
    return best


def test_criterion_1_crc_oracle_equivalence():
    with criterion(1, "crc_threshold matches brute-force search on 1000 instances"):
        g = np.random.default_rng(2024)
        start = time.monotonic()
        for _ in range(1000):
            n = int(g.integers(1, 51))
            scores = g.uniform(0.0, 0.999, size=n)
            if g.uniform() < 0.4:
                scores = np.minimum(np.round(scores, 1), 0.9)  # force duplicates
            error_rate = float(g.uniform(0.0, 0.9))
            errors = g.uniform(size=n) < error_rate
            delta = float(g.uniform(0.01, 1.0))
            points = [CalibrationPoint(float(s), bool(e)) for s, e in zip(scores, errors)]
            fast = crc_threshold(points, delta)
            slow = brute_force_threshold(scores.tolist(), errors.tolist(), delta)
            assert fast == slow, f"mismatch: {fast} vs {slow} (n={n}, delta={delta})"
        elapsed = time.monotonic() - start
        assert elapsed < 5.0, f"took {elapsed:.2f}s"


def test_criterion_2_hand_verified_thresholds():
    with criterion(2, "three worked crc_threshold examples pass exactly"):
        pts = [
            CalibrationPoint(s, bool(e))
            for s, e in zip([0.05, 0.1, 0.2, 0.4], [0, 0, 1, 0])
        ]
        assert crc_threshold(pts, 0.5) == 0.4
        assert crc_threshold(pts, 0.2) is None
        all_correct = [CalibrationPoint(s, False) for s in [0.05, 0.1, 0.2, 0.4]]
        assert crc_threshold(all_correct, 0.5) == 0.4  # max score, B = 1/5


def test_criterion_3_risk_validity(sep4_run, sep4_pool):
    with criterion(3, "per-exit MC risk <= delta + 1/(n_cal+1) + 3*SE at 3 deltas"):
        assert len(sep4_pool) == 800
        start = time.monotonic()
        for delta in (0.02, 0.05, 0.10):
            result = mc_validity(sep4_pool, delta, 500, 0.5, RngStream(3, 5))
            assert result.cal_size == 400 and result.test_size == 400
            for e in result.exits:
                assert e.n_used > 0, f"delta={delta}: exit {e.exit_index} always skipped"
                bound = delta + 1.0 / (result.cal_size + 1) + 3.0 * e.std_error
                assert e.mean_risk <= bound, (
                    f"delta={delta} exit {e.exit_index}: "
                    f"mean {e.mean_risk:.4f} > bound {bound:.4f}"
                )
        elapsed = sep4_run.elapsed + (time.monotonic() - start)
        assert elapsed < 120.0, f"took {elapsed:.1f}s"


def test_criterion_4_unsafe_heuristic(overconfident_split):
    with criterion(4, "fixed-MSP 0.9 exceeds delta on sharpened scores; CRC stays in bound"):
        cal, test = overconfident_split
        delta = 0.05
        scores, errors = exit_scores_and_errors(test)

        # fixed-MSP 0.9 gate == uncertainty threshold 0.1 at the sharpened exit
        accepted = scores[:, 0] <= 0.1
        assert accepted.sum() > 0
        heuristic_risk = float(np.mean(errors[accepted, 0]))
        assert heuristic_risk > delta, f"heuristic risk {heuristic_risk:.4f} <= {delta}"

        schedule = calibrate_all_exits(cal, delta)
        n_cal = len(cal)
        for j, tau in enumerate(schedule.thresholds):
            assert tau is not None
            acc = scores[:, j] <= tau
            assert acc.sum() > 0
            risk = float(np.mean(errors[acc, j]))
            se = math.sqrt(max(risk * (1 - risk), delta * (1 - delta)) / acc.sum())
            bound = delta + 1.0 / (n_cal + 1) + 3.0 * se
            assert risk <= bound, f"exit {j + 1}: crc risk {risk:.4f} > bound {bound:.4f}"


def test_criterion_5_dkd_decomposition_identity():
    with criterion(5, "TCKD + (1 - p_t(y)) * NCKD recomposes kd_loss to 1e-8"):
        g = np.random.default_rng(55)
        start = time.monotonic()
        worst = 0.0
        for _ in range(1000):
            c = int(g.integers(3, 10))
            z_s = 3.0 * g.normal(size=c)
            z_t = 3.0 * g.normal(size=c)
            y = int(g.integers(0, c))
            t = float(g.choice([1.0, 2.0, 4.0]))
            kd, _ = kd_loss(z_s, z_t, t)
            tckd, _ = dkd_loss(z_s, z_t, y, t, 1.0, 0.0)
            nckd, _ = dkd_loss(z_s, z_t, y, t, 0.0, 1.0)
            p_target = softmax(z_t / t)[y]
            worst = max(worst, abs(kd - (tckd + (1.0 - p_target) * nckd)))
        elapsed = time.monotonic() - start
        assert worst <= 1e-8, f"worst abs err {worst:.3e}"
        assert elapsed < 1.0, f"took {elapsed:.2f}s"


def test_criterion_6_gradient_fidelity():
    with criterion(6, "grad_check <= 1e-4 on the full combined objective"):
        model = default_model(6, 3, (12, 12, 12), seed=1)
        assert model.num_params <= 5000
        start = time.monotonic()
        err = grad_check(
            model, LossConfig(alpha=1.0, beta=0.5, temperature=4.0), RngStream(6, 99)
        )
        elapsed = time.monotonic() - start
        assert err <= 1e-4, f"max rel err {err:.3e}"
        assert elapsed < 30.0, f"took {elapsed:.1f}s"


def test_criterion_7_toy_end_to_end(sep4_run):
    with criterion(7, "sep-4 blobs: final acc >= 0.95, depth <= 0.9, risk in bound"):
        start = time.monotonic()
        test = sep4_run.test_records
        final_acc = float(
            np.mean([np.argmax(r.logits[-1]) == r.label for r in test])
        )
        assert final_acc >= 0.95, f"final-exit accuracy {final_acc:.4f}"

        delta = 0.05
        schedule = calibrate_all_exits(sep4_run.cal_records, delta)
        report = evaluate_policy(test, schedule, CostModel.normalized_depth(3))
        assert report.expected_compute <= 0.9, f"depth {report.expected_compute:.4f}"

        assert report.overall_early_risk is not None
        n_early = int(round((1.0 - report.exit_rates[-1]) * report.n_samples))
        risk = report.overall_early_risk
        se = math.sqrt(max(risk * (1 - risk), delta * (1 - delta)) / max(n_early, 1))
        n_cal = len(sep4_run.cal_records)
        bound = delta + 1.0 / (n_cal + 1) + 3.0 * se
        assert risk <= bound, f"early-exit risk {risk:.4f} > bound {bound:.4f}"
        elapsed = sep4_run.elapsed + (time.monotonic() - start)
        assert elapsed < 120.0, f"took {elapsed:.1f}s"


def test_criterion_8_ablation_ordering(ablation_depths):
    with criterion(8, "mean depth(no-distill) >= mean depth(full) over 5 seeds"):
        mean_full = float(np.mean(ablation_depths["full"]))
        mean_nodistill = float(np.mean(ablation_depths["nodistill"]))
        assert mean_nodistill >= mean_full, (
            f"no-distill {mean_nodistill:.4f} < full {mean_full:.4f} "
            f"(per-seed full={ablation_depths['full']}, "
            f"nodistill={ablation_depths['nodistill']})"
        )


def test_criterion_9_metric_unit_tests():
    with criterion(9, "entropy / ECE / NLL / expected-compute hand values"):
        assert entropy([1 / 3, 2 / 3]) == pytest.approx(0.63651, abs=1e-5)
        # |0.5 - 0.8| bit-exactly (0.8 is not a dyadic rational, so the exact
        # float64 result is 0.30000000000000004, not the literal 0.3)
        assert ece([0.8, 0.8], [True, False]) == abs(0.5 - 0.8)
        assert nll([0.25, 0.75], 0) == pytest.approx(math.log(4), abs=1e-12)
        assert expected_compute([0.5, 0.5], CostModel(np.array([0.5, 1.0]))) == 0.75


def _run_full_pipeline(root):
    root.mkdir(parents=True, exist_ok=True)
    seed = ["--seed", "21"]
    steps = [
        ["synth", *seed, "--n", "500", "--classes", "3", "--dim", "6",
         "--separation", "3.0", "--out", str(root / "data.jsonl")],
        ["train", *seed, "--data", str(root / "data.jsonl"), "--epochs", "3",
         "--widths", "12,12", "--ema", "0.9", "--out", str(root / "model.txt")],
        ["export", *seed, "--data", str(root / "data.jsonl"),
         "--model", str(root / "model.txt"), "--split", "cal",
         "--out", str(root / "cal.jsonl")],
        ["export", *seed, "--data", str(root / "data.jsonl"),
         "--model", str(root / "model.txt"), "--split", "test",
         "--out", str(root / "test.jsonl")],
        ["calibrate", *seed, "--logits", str(root / "cal.jsonl"),
         "--delta", "0.1", "--out", str(root / "thresholds.txt")],
        ["evaluate", *seed, "--logits", str(root / "test.jsonl"),
         "--thresholds", str(root / "thresholds.txt"),
         "--out-dir", str(root / "reports")],
        ["risk-curve", *seed, "--logits", str(root / "cal.jsonl"),
         "--deltas", "0.05,0.1,0.2", "--out-dir", str(root / "curve")],
        ["validity", *seed, "--logits", str(root / "cal.jsonl"),
         "--delta", "0.1", "--trials", "25", "--out-dir", str(root / "val")],
    ]
    for argv in steps:
        assert main(argv) == 0, f"step failed: {argv[0]}"


def test_criterion_10_pipeline_determinism(tmp_path, capsys):
    with criterion(10, "two same-seed CLI pipeline runs are byte-identical"):
        a, b = tmp_path / "run_a", tmp_path / "run_b"
        _run_full_pipeline(a)
        _run_full_pipeline(b)
        capsys.readouterr()

        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b and files_a, "file sets differ"
        for rel in files_a:
            assert filecmp.cmp(a / rel, b / rel, shallow=False), f"{rel} differs"
        # the report path rendered figures next to the delimited output
        assert (a / "reports" / "exit_rates.png").exists()
        assert (a / "curve" / "risk_curve.csv").exists()
        assert (a / "curve" / "risk_curve.png").exists()
        assert (a / "val" / "validity.csv").exists()
