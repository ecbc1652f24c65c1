import numpy as np
import pytest

from exitguard.calib import ThresholdSchedule, calibrate_all_exits, heuristic_schedule
from exitguard.core import ExitRecord, RngStream
from exitguard.errors import InvalidInputError
from exitguard.metrics import CostModel, entropy
from exitguard.policy import (
    choose_exit,
    evaluate_policy,
    mc_validity,
    shift_evaluate,
)


def schedule_k(thresholds, method="crc", delta=0.05):
    return ThresholdSchedule(
        thresholds=tuple(thresholds),
        method=method,
        delta=delta,
        budget="per_exit",
        cal_sizes=(0,) * len(thresholds),
    )


def record_with_msp(msps, label=0, rid="r0", c=2):
    """Record whose exit-j max softmax probability is msps[j] (on class 0)."""
    rows = []
    for m in msps:
        rest = (1.0 - m) / (c - 1)
        rows.append(np.log([m] + [rest] * (c - 1)))
    return ExitRecord(id=rid, label=label, logits=np.array(rows))


def random_records(n, k=3, c=4, seed=0):
    g = np.random.default_rng(seed)
    return [
        ExitRecord(
            id=f"r{i:04d}", label=int(g.integers(0, c)), logits=2.0 * g.normal(size=(k, c))
        )
        for i in range(n)
    ]


class TestChooseExit:
    def test_confident_first_exit(self):
        record = record_with_msp([0.999999, 0.6, 0.6])
        decision = choose_exit(record, schedule_k([0.1, 0.1]))
        assert decision.exit_index == 1
        assert decision.predicted_class == 0

    def test_all_never_exit_falls_through(self):
        record = record_with_msp([0.99, 0.99, 0.6])
        decision = choose_exit(record, schedule_k([None, None]))
        assert decision.exit_index == 3

    def test_second_exit_first_acceptance(self):
        record = record_with_msp([0.7, 0.95, 0.5])  # r = [0.3, 0.05]
        decision = choose_exit(record, schedule_k([0.1, 0.1]))
        assert decision.exit_index == 2

    def test_entropy_gate_strict(self):
        record = record_with_msp([0.9, 0.9, 0.9])
        h = entropy([0.9, 0.1])
        accepts = choose_exit(record, schedule_k([h + 1e-9, h + 1e-9], method="entropy", delta=None))
        rejects = choose_exit(record, schedule_k([h, h], method="entropy", delta=None))
        assert accepts.exit_index == 1
        assert rejects.exit_index == 3  # gate is strictly less-than

    def test_shape_mismatch(self):
        record = record_with_msp([0.9, 0.9])
        with pytest.raises(InvalidInputError):
            choose_exit(record, schedule_k([0.1, 0.1]))

    def test_confidence_is_msp_at_chosen_exit(self):
        record = record_with_msp([0.7, 0.95, 0.5])
        decision = choose_exit(record, schedule_k([0.1, 0.1]))
        assert decision.confidence == pytest.approx(0.95, abs=1e-12)
        assert len(decision.scores) == 2


class TestEvaluatePolicy:
    def test_all_never_exit(self):
        records = random_records(60)
        cost = CostModel.normalized_depth(3)
        report = evaluate_policy(records, schedule_k([None, None]), cost)
        np.testing.assert_array_equal(report.exit_rates, [0, 0, 1])
        assert report.expected_compute == 1.0
        assert report.overall_early_risk is None
        final_acc = np.mean(
            [np.argmax(r.logits[-1]) == r.label for r in records]
        )
        assert report.accuracy == pytest.approx(final_acc)

    def test_single_correct_record_at_exit_one(self):
        record = record_with_msp([0.999, 0.6, 0.6], label=0)
        report = evaluate_policy([record], schedule_k([0.1, 0.1]),
                                 CostModel.normalized_depth(3))
        np.testing.assert_array_equal(report.exit_rates, [1, 0, 0])
        assert report.exit_selective_risk[0] == 0.0
        assert report.exit_selective_risk[1] is None

    def test_matches_per_record_choose_exit(self):
        records = random_records(100, seed=5)
        schedule = schedule_k([0.35, 0.2])
        cost = CostModel.normalized_depth(3)
        report = evaluate_policy(records, schedule, cost)
        decisions = [choose_exit(r, schedule) for r in records]
        counts = np.bincount([d.exit_index - 1 for d in decisions], minlength=3)
        np.testing.assert_array_equal(np.array(report.exit_rates) * len(records), counts)
        acc = np.mean([d.predicted_class == r.label for d, r in zip(decisions, records)])
        assert report.accuracy == pytest.approx(acc)

    def test_exact_permutation_invariance(self):
        records = random_records(80, seed=9)
        schedule = schedule_k([0.4, 0.3])
        cost = CostModel.normalized_depth(3)
        a = evaluate_policy(records, schedule, cost)
        b = evaluate_policy(records[::-1], schedule, cost)
        assert a == b

    def test_counts_sum_exactly(self):
        records = random_records(97, seed=3)
        report = evaluate_policy(records, schedule_k([0.4, 0.3]),
                                 CostModel.normalized_depth(3))
        assert int(round(sum(report.exit_rates) * 97)) == 97
        assert abs(sum(report.exit_rates) - 1.0) <= 1e-9

    def test_threshold_one_exits_at_or_before(self):
        records = random_records(50, seed=4)
        report = evaluate_policy(records, schedule_k([0.0, 1.0]),
                                 CostModel.normalized_depth(3))
        assert report.exit_rates[2] == 0.0  # r < 1 always, so exit 2 catches all

    def test_lowering_threshold_weakly_reduces_early_mass(self):
        records = random_records(200, seed=6)
        cost = CostModel.normalized_depth(3)
        g = np.random.default_rng(0)
        for _ in range(20):
            t1, t2 = g.uniform(0, 0.8, size=2)
            base = evaluate_policy(records, schedule_k([t1, t2]), cost)
            lower = evaluate_policy(records, schedule_k([t1 * 0.5, t2]), cost)
            assert lower.exit_rates[0] <= base.exit_rates[0] + 1e-12

    def test_empty_test_set(self):
        with pytest.raises(InvalidInputError):
            evaluate_policy([], schedule_k([0.1, 0.1]), CostModel.normalized_depth(3))


class TestMcValidity:
    def test_vacuous_budget_recovers_error_rate(self):
        # quantized scores guarantee every calibration max appears in test too
        g = np.random.default_rng(2)
        records = []
        for i in range(400):
            m = g.choice([0.6, 0.7, 0.8, 0.9])
            label = int(g.integers(0, 2))
            records.append(record_with_msp([m, 0.9], label=label, rid=f"q{i:04d}"))
        result = mc_validity(records, 1.0, 50, 0.5, RngStream(0, 31))
        errs = np.array([np.argmax(r.logits[0]) != r.label for r in records])
        overall = errs.mean()
        assert result.exits[0].n_skipped == 0
        assert result.exits[0].mean_risk == pytest.approx(overall, abs=0.05)

    def test_perfect_heads_zero_risk(self):
        records = [
            record_with_msp([0.95, 0.95], label=0, rid=f"p{i:03d}") for i in range(100)
        ]
        result = mc_validity(records, 0.5, 20, 0.5, RngStream(1, 31))
        assert result.exits[0].mean_risk == 0.0

    def test_always_wrong_exit_all_trials_skipped(self):
        records = [
            record_with_msp([0.95, 0.95], label=1, rid=f"w{i:03d}") for i in range(100)
        ]
        result = mc_validity(records, 0.3, 15, 0.5, RngStream(2, 31))
        assert result.exits[0].n_used == 0
        assert result.exits[0].n_skipped == 15
        assert result.exits[0].mean_risk is None

    def test_deterministic(self, sep4_pool):
        a = mc_validity(sep4_pool, 0.05, 25, 0.5, RngStream(5, 31))
        b = mc_validity(sep4_pool, 0.05, 25, 0.5, RngStream(5, 31))
        assert a == b

    def test_degenerate_pool(self):
        records = [record_with_msp([0.9, 0.9], rid="only")] * 1
        with pytest.raises(InvalidInputError):
            mc_validity(records, 0.1, 5, 0.5, RngStream(0, 31))

    def test_trials_validation(self, sep4_pool):
        with pytest.raises(InvalidInputError):
            mc_validity(sep4_pool, 0.1, 0, 0.5, RngStream(0, 31))


class TestShiftEvaluate:
    def test_sigma_zero_matches_clean(self, tiny_run):
        schedule = calibrate_all_exits(tiny_run.cal_records, 0.1)
        cost = CostModel.normalized_depth(3)
        clean = evaluate_policy(tiny_run.test_records, schedule, cost)
        rows = shift_evaluate(
            tiny_run.model, list(tiny_run.split.test), [0.0], schedule, cost,
            RngStream(0, 61),
        )
        assert rows[0].accuracy == clean.accuracy
        assert rows[0].expected_compute == clean.expected_compute
        assert rows[0].observed_risk == clean.overall_early_risk

    def test_noise_trend(self, tiny_run):
        # a tight budget puts the gate where noise actually moves mass
        schedule = calibrate_all_exits(tiny_run.cal_records, 0.01)
        cost = CostModel.normalized_depth(3)
        rows = shift_evaluate(
            tiny_run.model, list(tiny_run.split.test), [0.0, 0.5, 1.0, 2.0, 32.0],
            schedule, cost, RngStream(0, 61),
        )
        # rejection trend over the moderate-shift grid (not per-pair; extreme
        # noise saturates tanh into confidently wrong corners, so it is
        # excluded from the monotonicity claim)
        assert rows[3].exit_rates[0] <= rows[0].exit_rates[0] + 1e-9
        assert rows[3].expected_compute >= rows[0].expected_compute - 1e-9
        # extreme noise approaches chance accuracy
        assert rows[-1].accuracy <= 1 / 3 + 0.15

    def test_rejects_negative_sigma(self, tiny_run):
        schedule = heuristic_schedule("fixed_msp", 0.9, 3)
        with pytest.raises(InvalidInputError):
            shift_evaluate(
                tiny_run.model, list(tiny_run.split.test), [-1.0], schedule,
                CostModel.normalized_depth(3), RngStream(0, 61),
            )
