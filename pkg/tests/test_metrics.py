import numpy as np
import pytest

from hrl.metrics import (aggregate, auc_score, compute_metrics, confusion_matrix, multiclass_metrics,
                         report_from_probs)

from oracles import auc_pairs, binary_recount, one_vs_rest


def test_worked_auc():
    assert auc_score([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_perfect_and_constant_scores():
    assert auc_score([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc_score([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_single_class_auc_is_undefined():
    assert auc_score([0.2, 0.7], [1, 1]) is None
    assert compute_metrics([0.2, 0.7], [0, 0]).auc is None


def test_binary_hand_counts():
    r = compute_metrics([0.9, 0.6, 0.4, 0.2, 0.5], [1, 0, 1, 0, 0])
    assert r.confusion.tolist() == [[2, 1], [1, 1]]
    assert r.acc == 3 / 5 and r.sen == 1 / 2 and r.spe == 2 / 3 and r.f1 == 1 / 2


def test_binary_against_recount_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, size=n)
        # rounding makes ties common
        scores = np.round(rng.uniform(size=n), int(rng.integers(1, 3)))
        r = compute_metrics(scores, labels)
        tp, tn, fp, fn = binary_recount(scores, labels)
        assert r.confusion.tolist() == [[tn, fp], [fn, tp]]
        assert abs(r.acc - (tp + tn) / n) < 1e-12
        if tp + fn:
            assert abs(r.sen - tp / (tp + fn)) < 1e-12
        if tn + fp:
            assert abs(r.spe - tn / (tn + fp)) < 1e-12
        if tp + fp and tp + fn:
            assert abs(r.f1 - (2 * tp / (2 * tp + fp + fn))) < 1e-12
        want = auc_pairs(scores, labels)
        assert (r.auc is None) if want is None else abs(r.auc - float(want)) < 1e-12


def test_multiclass_against_one_vs_rest():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n, k = int(rng.integers(3, 25)), int(rng.integers(3, 5))
        labels = rng.integers(0, k, size=n)
        probs = rng.dirichlet(np.ones(k), size=n)
        r = multiclass_metrics(probs, labels)
        pred = probs.argmax(axis=1)
        want = one_vs_rest(pred, labels, k)
        for c in range(k):
            acc, sen, spe = want[c]
            assert abs(r.per_class[c]["acc"] - float(acc)) < 1e-12
            assert (r.per_class[c]["sen"] is None) == (sen is None)
            assert sen is None or abs(r.per_class[c]["sen"] - float(sen)) < 1e-12
            assert spe is None or abs(r.per_class[c]["spe"] - float(spe)) < 1e-12
            auc = auc_pairs(probs[:, c], (labels == c).astype(int))
            assert auc is None or abs(r.per_class[c]["auc"] - float(auc)) < 1e-12
        counts = np.zeros((k, k), dtype=int)
        for y, p in zip(labels, pred):
            counts[y, p] += 1
        assert np.array_equal(r.confusion, counts)
        assert r.confusion.sum() == n


def test_always_class_zero_on_three_balanced_classes():
    probs = np.tile([0.5, 0.3, 0.2], (6, 1))
    r = multiclass_metrics(probs, [0, 0, 1, 1, 2, 2])
    assert r.acc == pytest.approx(1 / 3)
    assert r.per_class[0]["sen"] == 1.0 and r.per_class[0]["spe"] == 0.0
    assert r.per_class[1]["sen"] == 0.0 and r.per_class[1]["spe"] == 1.0


def test_argmax_ties_go_to_lowest_class():
    r = multiclass_metrics(np.full((3, 3), 1 / 3), [0, 1, 2])
    assert r.confusion[:, 0].tolist() == [1, 1, 1]
    assert compute_metrics([0.5], [1]).confusion.tolist() == [[0, 0], [1, 0]]


def test_report_dispatch():
    assert report_from_probs(np.array([[0.3, 0.7], [0.8, 0.2]]), [1, 0]).acc == 1.0
    assert report_from_probs(np.eye(3), [0, 1, 2]).confusion.shape == (3, 3)


def test_confusion_rows_are_true_classes():
    assert confusion_matrix([0, 0, 1], [1, 1, 1], 2).tolist() == [[0, 2], [0, 1]]


def test_aggregate_mean_and_std():
    reps = [compute_metrics([0.9, 0.1], [1, 0]), compute_metrics([0.1, 0.9], [1, 0])]
    agg = aggregate(reps)
    assert agg["acc"] == (0.5, 0.5)
    assert agg["auc"] == (0.5, 0.5)
