import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trimae.errors import DataError
from trimae.metrics import (
    DEFAULT_BINS,
    EvalReport,
    auroc_ovr,
    brier,
    confusion_metrics,
    ece,
    ece_from_bins,
    evaluate_predictions,
    kappa_quadratic,
    read_predictions,
    read_reliability_csv,
    read_report,
    write_predictions,
    write_reliability_csv,
    write_report,
)

from oracles import (
    oracle_accuracy,
    oracle_auroc_ovr,
    oracle_brier,
    oracle_ece,
    oracle_f1_macro,
    oracle_kappa_quadratic,
    oracle_per_class_recall,
)


def random_prediction_set(rng, n=None):
    n = n or int(rng.integers(20, 200))
    labels = rng.integers(0, 4, size=n)
    logits = rng.normal(0, 2, size=(n, 4))
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return labels, probs


class TestConfusionMetrics:
    def test_perfect_predictions(self):
        labels = np.array([0, 1, 2, 3, 0, 1, 2, 3])
        acc, f1, per_class = confusion_metrics(labels, labels)
        assert acc == 1.0 and f1 == 1.0
        assert np.all(per_class == 1.0)

    def test_two_class_toy_hand_values(self):
        labels = np.array([0, 0, 1, 1])
        preds = np.array([0, 1, 1, 1])
        acc, f1, per_class = confusion_metrics(labels, preds)
        assert acc == 0.75
        assert f1 == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-12)
        assert per_class[0] == 0.5 and per_class[1] == 1.0
        assert np.isnan(per_class[2]) and np.isnan(per_class[3])

    def test_constant_predictor_on_balanced_set(self):
        labels = np.array([0, 1, 2, 3] * 10)
        preds = np.zeros_like(labels)
        acc, _, _ = confusion_metrics(labels, preds)
        assert acc == 0.25

    def test_empty_input_rejected(self):
        with pytest.raises(DataError):
            confusion_metrics(np.array([]), np.array([]))


class TestKappa:
    def test_perfect_agreement(self):
        labels = np.array([0, 1, 2, 3, 2, 1])
        assert kappa_quadratic(labels, labels) == 1.0

    def test_reversed_ordinal_toy(self):
        labels = np.array([0, 1, 2, 3])
        preds = np.array([3, 2, 1, 0])
        k = kappa_quadratic(labels, preds)
        assert k == pytest.approx(oracle_kappa_quadratic(labels.tolist(), preds.tolist()), abs=1e-12)
        assert k == pytest.approx(-1.0, abs=1e-12)

    def test_near_misses_beat_far_misses(self):
        # Same marginals, different ordinal distances.
        labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        near = np.array([0, 1, 1, 0, 2, 3, 3, 2])   # errors are off by one
        far = np.array([0, 3, 1, 2, 2, 1, 3, 0])    # errors are off by >= 2
        assert kappa_quadratic(labels, near) > kappa_quadratic(labels, far)
        assert kappa_quadratic(labels, near) == pytest.approx(
            oracle_kappa_quadratic(labels.tolist(), near.tolist()), abs=1e-12
        )

    def test_degenerate_identical_single_class(self):
        labels = np.array([2, 2, 2, 2, 2])
        assert kappa_quadratic(labels, labels) == 1.0

    def test_relabel_invariance(self):
        rng = np.random.default_rng(7)
        labels = rng.integers(0, 4, 60)
        preds = rng.integers(0, 4, 60)
        relabeled = 3 - labels  # order-reversing map applied to both raters
        assert kappa_quadratic(3 - labels, 3 - preds) == pytest.approx(
            kappa_quadratic(labels, preds), abs=1e-12
        )


@pytest.mark.filterwarnings("ignore::UserWarning")
class TestAuroc:
    def _lift(self, scores):
        probs = np.zeros((len(scores), 4))
        probs[:, 1] = scores
        probs[:, 0] = 1 - np.asarray(scores)
        return probs

    def test_perfect_separation(self):
        labels = np.array([0, 0, 1, 1])
        assert auroc_ovr(labels, self._lift([0.1, 0.2, 0.8, 0.9])) == 1.0

    def test_inverted_scores(self):
        labels = np.array([0, 0, 1, 1])
        assert auroc_ovr(labels, self._lift([0.9, 0.8, 0.2, 0.1])) == 0.0

    def test_binary_toy_hand_value(self):
        labels = np.array([0, 0, 1, 1])
        probs = self._lift([0.1, 0.4, 0.35, 0.8])
        assert auroc_ovr(labels, probs) == pytest.approx(0.75, abs=1e-12)

    def test_absent_class_excluded_with_warning(self):
        labels = np.array([0, 0, 1, 1])
        with pytest.warns(UserWarning):
            auroc_ovr(labels, self._lift([0.1, 0.2, 0.8, 0.9]))


class TestEce:
    def test_all_correct_full_confidence(self):
        labels = np.array([0, 1, 2, 3])
        probs = np.eye(4)[labels]
        value, bins = ece(labels, probs)
        assert value == 0.0
        assert sum(b.count for b in bins) == 4

    def test_single_bin_hand_value(self):
        labels = np.array([0, 1])
        probs = np.array([[0.9, 0.1, 0.0, 0.0], [0.9, 0.1, 0.0, 0.0]])
        value, bins = ece(labels, probs)
        assert value == pytest.approx(0.4, abs=1e-12)
        occupied = [b for b in bins if b.count]
        assert len(occupied) == 1
        assert occupied[0].lo == pytest.approx(0.8) and occupied[0].hi == pytest.approx(0.9)
        assert occupied[0].accuracy == 0.5 and occupied[0].mean_confidence == pytest.approx(0.9)

    def test_order_invariance(self):
        rng = np.random.default_rng(0)
        labels, probs = random_prediction_set(rng)
        base, _ = ece(labels, probs)
        perm = rng.permutation(len(labels))
        shuffled, _ = ece(labels[perm], probs[perm])
        assert shuffled == pytest.approx(base, abs=1e-12)

    def test_bins_partition_samples(self):
        rng = np.random.default_rng(3)
        labels, probs = random_prediction_set(rng, n=137)
        _, bins = ece(labels, probs)
        assert sum(b.count for b in bins) == 137


class TestBrier:
    def test_one_hot_correct(self):
        labels = np.array([0, 1, 2, 3])
        assert brier(labels, np.eye(4)[labels]) == 0.0

    def test_uniform_hand_value(self):
        labels = np.array([2, 0])
        probs = np.full((2, 4), 0.25)
        assert brier(labels, probs) == pytest.approx(0.75, abs=1e-12)

    def test_confident_wrong_is_two(self):
        labels = np.array([0])
        probs = np.array([[0.0, 1.0, 0.0, 0.0]])
        assert brier(labels, probs) == 2.0


class TestOracleEquivalence:
    """Every metric must match its brute-force oracle on random data."""

    @pytest.mark.parametrize("seed", range(20))
    def test_random_sets(self, seed):
        rng = np.random.default_rng(seed)
        labels, probs = random_prediction_set(rng)
        preds = probs.argmax(axis=1)
        llist, plist = labels.tolist(), probs.tolist()
        acc, f1, per_class = confusion_metrics(labels, preds)
        assert acc == pytest.approx(oracle_accuracy(llist, preds.tolist()), abs=1e-9)
        assert f1 == pytest.approx(oracle_f1_macro(llist, preds.tolist()), abs=1e-9)
        expected_recall = oracle_per_class_recall(llist, preds.tolist())
        for got, want in zip(per_class, expected_recall):
            assert (np.isnan(got) and np.isnan(want)) or got == pytest.approx(want, abs=1e-9)
        assert kappa_quadratic(labels, preds) == pytest.approx(
            oracle_kappa_quadratic(llist, preds.tolist()), abs=1e-9
        )
        assert auroc_ovr(labels, probs) == pytest.approx(oracle_auroc_ovr(llist, plist), abs=1e-9)
        value, _ = ece(labels, probs)
        assert value == pytest.approx(oracle_ece(llist, plist), abs=1e-9)
        assert brier(labels, probs) == pytest.approx(oracle_brier(llist, plist), abs=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_kappa_matches_oracle_property(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(8, 60))
        labels = rng.integers(0, 4, n)
        preds = rng.integers(0, 4, n)
        assert kappa_quadratic(labels, preds) == pytest.approx(
            oracle_kappa_quadratic(labels.tolist(), preds.tolist()), abs=1e-9
        )


class TestReportIo:
    def test_prediction_dump_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        labels, probs = random_prediction_set(rng, n=40)
        ids = [f"s{i:03d}" for i in range(40)]
        path = str(tmp_path / "predictions.tsv")
        write_predictions(path, ids, labels, probs)
        rids, rlabels, rprobs = read_predictions(path)
        assert rids == ids
        assert np.array_equal(rlabels, labels)
        assert np.array_equal(rprobs, probs)

    def test_report_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        labels, probs = random_prediction_set(rng, n=60)
        report = evaluate_predictions(labels, probs)
        path = str(tmp_path / "report.txt")
        write_report(path, report)
        loaded = read_report(path)
        assert loaded["n"] == report.n
        for name, value in report.scalars().items():
            assert loaded[name] == value

    def test_reliability_csv_round_trip_and_recompute(self, tmp_path):
        rng = np.random.default_rng(13)
        labels, probs = random_prediction_set(rng, n=90)
        report = evaluate_predictions(labels, probs)
        path = str(tmp_path / "reliability.csv")
        write_reliability_csv(path, report.reliability)
        bins = read_reliability_csv(path)
        assert sum(b.count for b in bins) == report.n
        assert abs(ece_from_bins(bins) - report.ece) <= 1e-12

    def test_report_carries_all_bins(self):
        rng = np.random.default_rng(14)
        labels, probs = random_prediction_set(rng, n=25)
        report = evaluate_predictions(labels, probs)
        assert isinstance(report, EvalReport)
        assert len(report.reliability) == DEFAULT_BINS
