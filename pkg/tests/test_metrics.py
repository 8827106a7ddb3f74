import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from farsight.errors import EvaluationError
from farsight.metrics import (ConfusionMatrix3, auc_female_vs_rest, classify,
                              core_metrics, operating_point, p_female, roc_points,
                              stratified_report)


def brute_force_auc(scores, labels):
    """O(n^2) Mann-Whitney pair counting; ties count one half."""
    scores = np.asarray(scores)
    pos = scores[np.asarray(labels) == 1]
    neg = scores[np.asarray(labels) != 1]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestClassify:
    def test_uniform_p_female(self):
        assert p_female(np.zeros((1, 3)))[0] == pytest.approx(1 / 3, rel=1e-12)

    def test_closed_form(self):
        assert p_female(np.array([[0.0, math.log(2.0), 0.0]]))[0] == \
            pytest.approx(0.5, rel=1e-12)

    def test_argmax_tie_lowest_index(self):
        assert classify(np.array([[1.0, 1.0, 0.0]]))[0] == 0
        assert classify(np.array([[0.0, 2.0, 2.0]]))[0] == 1

    def test_p_female_stable_for_huge_logits(self):
        out = p_female(np.array([[1000.0, 999.0, 0.0]]))
        assert np.isfinite(out).all()


class TestCoreMetrics:
    def test_perfect_predictions(self):
        y = np.array([0, 1, 2, 0, 1, 2])
        m = core_metrics(y, y)
        for key in ("accuracy", "balanced_accuracy", "macro_f1",
                    "macro_precision", "weighted_recall"):
            assert m[key] == 1.0

    def test_hand_confusion_oracle(self):
        labels = [0, 0, 1, 2]
        preds = [0, 1, 1, 2]
        m = core_metrics(preds, labels)
        assert m["accuracy"] == pytest.approx(0.75)
        assert m["balanced_accuracy"] == pytest.approx(5 / 6)
        assert m["macro_f1"] == pytest.approx(7 / 9)
        cm = m["confusion"].counts
        assert cm[0, 0] == 1 and cm[0, 1] == 1 and cm[1, 1] == 1 and cm[2, 2] == 1

    def test_accuracy_equals_confusion_trace(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = rng.integers(1, 40)
            labels = rng.integers(0, 3, n)
            preds = rng.integers(0, 3, n)
            m = core_metrics(preds, labels)
            cm = m["confusion"]
            assert m["accuracy"] == np.trace(cm.counts) / cm.total
            assert cm.total == n

    def test_randomized_against_hand_computation(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(3, 50))
            labels = rng.integers(0, 3, n)
            preds = rng.integers(0, 3, n)
            m = core_metrics(preds, labels)
            present = sorted(set(labels.tolist()))
            recalls, precisions, f1s, supports = [], [], [], []
            for k in present:
                tp = int(np.sum((labels == k) & (preds == k)))
                support = int(np.sum(labels == k))
                predicted = int(np.sum(preds == k))
                r = tp / support
                p = tp / predicted if predicted else 0.0
                f = 2 * p * r / (p + r) if p + r else 0.0
                recalls.append(r); precisions.append(p); f1s.append(f)
                supports.append(support)
            assert m["balanced_accuracy"] == pytest.approx(np.mean(recalls), abs=1e-12)
            assert m["macro_f1"] == pytest.approx(np.mean(f1s), abs=1e-12)
            assert m["macro_precision"] == pytest.approx(np.mean(precisions), abs=1e-12)
            assert m["weighted_recall"] == pytest.approx(
                np.dot(recalls, supports) / sum(supports), abs=1e-12)

    @pytest.mark.parametrize("which", [0, 1, 2])
    def test_balanced_accuracy_duplication_invariant(self, which):
        # duplicating every sample of one class rescales its support only
        labels = np.array([0, 0, 1, 2, 2, 1])
        preds = np.array([0, 1, 1, 2, 0, 2])
        base = core_metrics(preds, labels)["balanced_accuracy"]
        sel = labels == which
        dup_labels = np.concatenate([labels, labels[sel]])
        dup_preds = np.concatenate([preds, preds[sel]])
        assert core_metrics(dup_preds, dup_labels)["balanced_accuracy"] == \
            pytest.approx(base, abs=1e-12)

    def test_empty_input_rejected(self):
        with pytest.raises(EvaluationError):
            core_metrics([], [])


class TestAUC:
    def test_perfect_separation(self):
        assert auc_female_vs_rest([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 2]) == 1.0

    def test_pair_counting_case(self):
        auc = auc_female_vs_rest([0.8, 0.3, 0.6, 0.1], [1, 1, 0, 0])
        assert auc == pytest.approx(0.75)

    def test_all_equal_scores(self):
        assert auc_female_vs_rest([0.4, 0.4, 0.4], [1, 0, 2]) == pytest.approx(0.5)

    def test_single_class_rejected(self):
        with pytest.raises(EvaluationError):
            auc_female_vs_rest([0.5, 0.6], [1, 1])

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            n = int(rng.integers(2, 64))
            labels = rng.integers(0, 3, n)
            if not (labels == 1).any() or (labels == 1).all():
                continue
            scores = np.round(rng.random(n), 2)  # coarse grid forces ties
            got = auc_female_vs_rest(scores, labels)
            assert got == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_invariant_under_monotone_transform(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 40))
        labels = rng.integers(0, 3, n)
        labels[0], labels[1] = 1, 0
        scores = rng.random(n)
        base = auc_female_vs_rest(scores, labels)
        warped = np.exp(3.0 * scores) + 1.0  # strictly increasing
        assert auc_female_vs_rest(warped, labels) == pytest.approx(base, abs=1e-12)


class TestOperatingPoint:
    def test_perfect(self):
        tpr, tnr = operating_point([0.9, 0.9, 0.1, 0.1], [1, 1, 0, 2], tau=0.5)
        assert (tpr, tnr) == (1.0, 1.0)

    def test_counting(self):
        tpr, _ = operating_point([0.6, 0.4, 0.1], [1, 1, 0], tau=0.5)
        assert tpr == pytest.approx(0.5)

    def test_tnr_monotone_in_threshold(self):
        rng = np.random.default_rng(3)
        scores = rng.random(50)
        labels = rng.integers(0, 3, 50)
        labels[:2] = [1, 0]
        last = -1.0
        for tau in np.linspace(0.05, 0.95, 19):
            _, tnr = operating_point(scores, labels, tau)
            assert tnr >= last - 1e-12
            last = tnr

    def test_single_class_rejected(self):
        with pytest.raises(EvaluationError):
            operating_point([0.5], [1], 0.5)


class TestStratifiedReport:
    def test_one_report_per_stratum_and_counts(self):
        scores = [0.9, 0.1, 0.8, 0.3, 0.7]
        labels = [1, 0, 1, 0, 1]
        keys = ["30deg|D<=20m", "30deg|D<=20m", "90deg|H>80m", "90deg|H>80m", "unbinned"]
        reports = stratified_report(scores, labels, keys)
        assert sorted(r.n_total for r in reports) == [1, 2, 2]
        assert sum(r.n_total for r in reports) == 5
        by_key = {f"{r.group}|{r.range_label}": r for r in reports}
        r = by_key["30deg|D<=20m"]
        assert r.mu_female == pytest.approx(0.9)
        assert r.mu_male == pytest.approx(0.1)
        assert r.tpr == 1.0 and r.tnr == 1.0

    def test_single_class_stratum_has_none_metrics(self):
        reports = stratified_report([0.9, 0.8], [1, 1], ["a|b", "a|b"])
        assert reports[0].auc is None and reports[0].tpr is None
        assert reports[0].mu_male is None

    def test_roc_points_monotone(self):
        rng = np.random.default_rng(4)
        scores = rng.random(30)
        labels = rng.integers(0, 2, 30)
        labels[:2] = [1, 0]
        pts = roc_points(scores, labels)
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        assert xs == sorted(xs) and ys == sorted(ys)
        assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)


def test_confusion_matrix_total():
    cm = ConfusionMatrix3.from_predictions([0, 1, 2, 2], [0, 0, 2, 1])
    assert cm.total == 4
    assert cm.counts.sum() == 4
