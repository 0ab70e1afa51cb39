import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histotex.metrics import (
    MacroRocSummary,
    RocCurve,
    accuracy_from_confusion,
    confusion_matrix,
    evaluate,
    macro_roc,
    one_vs_rest_curves,
    roc_curve,
    write_confusion_csv,
    write_roc_csv,
    write_summary_csv,
)
from histotex.network import build_network
from histotex.rng import RngStream


def mann_whitney_auc(scores, labels):
    """Exhaustive pairwise ordering count; ties score one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestConfusion:
    def test_accuracy_arithmetic(self):
        cm = np.zeros((8, 8), dtype=np.int64)
        cm[np.arange(8), np.arange(8)] = [120, 121, 120, 121, 120, 120, 120, 120]
        cm[0, 1] = 38  # 962 correct of 1000
        assert accuracy_from_confusion(cm) == pytest.approx(0.962)

    def test_all_correct_is_diagonal(self):
        y = [0, 1, 2, 1, 0]
        cm = confusion_matrix(y, y, 3)
        assert np.all(cm == np.diag(np.diag(cm)))

    def test_reorder_invariance(self, rng):
        t = rng.integers(0, 4, 50)
        p = rng.integers(0, 4, 50)
        perm = rng.permutation(50)
        assert np.array_equal(confusion_matrix(t, p, 4),
                              confusion_matrix(t[perm], p[perm], 4))

    def test_row_sums_are_class_counts(self, rng):
        t = rng.integers(0, 5, 200)
        p = rng.integers(0, 5, 200)
        cm = confusion_matrix(t, p, 5)
        np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(t, minlength=5))


class TestRocCurve:
    def test_perfect_ranking(self):
        c = roc_curve([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])
        assert c.auc == pytest.approx(1.0)

    def test_interleaved_ranking(self):
        # brute-force count over all 4 pos/neg pairs = 3/4
        c = roc_curve([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0])
        assert c.auc == pytest.approx(0.75)

    def test_all_tied_scores(self):
        c = roc_curve([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
        assert c.auc == pytest.approx(0.5)
        assert len(c.fpr) == 2  # single diagonal segment

    def test_monotone_from_origin_to_corner(self, rng):
        scores = rng.random(60)
        labels = rng.integers(0, 2, 60)
        labels[:2] = [0, 1]
        c = roc_curve(scores, labels)
        assert c.fpr[0] == 0.0 and c.tpr[0] == 0.0
        assert c.fpr[-1] == 1.0 and c.tpr[-1] == 1.0
        assert (np.diff(c.fpr) >= 0).all() and (np.diff(c.tpr) >= 0).all()

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            roc_curve([0.1, 0.2], [1, 1])

    @pytest.mark.parametrize("seed", range(20))
    def test_trapezoid_equals_mann_whitney(self, seed):
        gen = np.random.default_rng(seed)
        n = int(gen.integers(4, 200))
        # quantized scores force plenty of ties
        scores = np.round(gen.random(n), 2)
        labels = gen.integers(0, 2, n)
        labels[:2] = [0, 1]
        c = roc_curve(scores, labels)
        assert abs(c.auc - mann_whitney_auc(scores, labels)) < 1e-9

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_monotone_transform_invariance(self, seed):
        gen = np.random.default_rng(seed)
        n = int(gen.integers(4, 60))
        scores = gen.random(n)
        labels = gen.integers(0, 2, n)
        labels[:2] = [0, 1]
        a = roc_curve(scores, labels).auc
        b = roc_curve(np.exp(3 * scores) + 7, labels).auc
        assert a == pytest.approx(b, abs=1e-12)


class TestMacroRoc:
    def test_perfect_curves(self):
        c = roc_curve([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0])
        summary = macro_roc([c, c])
        assert summary.macro_auc == 1.0
        assert summary.mean_sensitivity == 1.0
        assert summary.mean_specificity == 1.0

    def test_mean_of_aucs(self):
        a = roc_curve([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0])      # 1.0
        gen = np.random.default_rng(0)
        scores, labels = gen.random(100), gen.integers(0, 2, 100)
        labels[:2] = [0, 1]
        b = roc_curve(scores, labels)
        summary = macro_roc([a, b])
        assert summary.macro_auc == pytest.approx((1.0 + b.auc) / 2)

    def test_macro_equals_brute_forced_means(self, rng):
        probs = rng.random((80, 4))
        probs /= probs.sum(axis=1, keepdims=True)
        labels = rng.integers(0, 4, 80)
        curves = one_vs_rest_curves(probs, labels)
        expected = np.mean([mann_whitney_auc(probs[:, k], (labels == k).astype(int))
                            for k in range(4)])
        assert macro_roc(curves).macro_auc == pytest.approx(expected, abs=1e-9)

    def test_needs_two_curves(self):
        c = roc_curve([0.9, 0.1], [1, 0])
        with pytest.raises(ValueError):
            macro_roc([c])


class TestEvaluate:
    def test_shapes_and_determinism(self, rng):
        model = build_network(input_size=64, rng=RngStream(0))
        x = rng.standard_normal((6, 3, 64, 64)).astype(np.float32) * 0.2
        y = rng.integers(0, 8, 6)
        batches = [(x[:4], y[:4]), (x[4:], y[4:])]
        res1 = evaluate(model, batches)
        res2 = evaluate(model, batches)
        assert res1.probs.shape == (6, 8)
        assert res1.confusion.sum() == 6
        assert np.array_equal(res1.probs, res2.probs)
        assert res1.accuracy == res2.accuracy


class TestCsvEmission:
    def test_files_written(self, tmp_path, rng):
        probs = rng.random((40, 3))
        probs /= probs.sum(axis=1, keepdims=True)
        labels = rng.integers(0, 3, 40)
        curves = one_vs_rest_curves(probs, labels)
        names = ["a", "b", "c"]
        write_confusion_csv(confusion_matrix(labels, probs.argmax(1), 3),
                            names, tmp_path / "cm.csv")
        write_roc_csv(curves, names, tmp_path / "roc.csv")
        write_summary_csv(0.5, macro_roc(curves), tmp_path / "summary.csv")
        assert (tmp_path / "cm.csv").read_text().startswith("true\\pred,a,b,c")
        assert "class,fpr,tpr,threshold" in (tmp_path / "roc.csv").read_text()
        assert "accuracy,macro_auc" in (tmp_path / "summary.csv").read_text()
