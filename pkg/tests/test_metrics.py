import numpy as np
import pytest

from mirnet.losses import ConstraintKind, ConstraintRule
from mirnet.metrics import (MetricError, binarize, build_report, f1_by_dimension, f1_suite, macro_pr_auc,
                            missed_by_dimension, per_label_scores)


def sweep_average_precision(truth, scores):
    """Step-interpolated area: sum over distinct thresholds of (recall gain) x precision."""
    positives = truth.sum()
    area, previous_recall = 0.0, 0.0
    for threshold in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= threshold
        tp = int((predicted & truth).sum())
        recall = tp / positives
        precision = tp / int(predicted.sum())
        area += (recall - previous_recall) * precision
        previous_recall = recall
    return area


def brute_micro(y_true, y_pred):
    t, p = y_true.reshape(-1).astype(bool), y_pred.reshape(-1).astype(bool)
    tp, fp, fn = 0, 0, 0
    for a, b in zip(t, p):
        tp += a and b
        fp += b and not a
        fn += a and not b
    return 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0


def brute_example(y_true, y_pred):
    scores = []
    for t, p in zip(y_true.astype(bool), y_pred.astype(bool)):
        size = t.sum() + p.sum()
        scores.append(1.0 if size == 0 else 2 * (t & p).sum() / size)
    return float(np.mean(scores))


def test_f1_suite_perfect_and_complement(rng):
    y = (rng.random((20, 5)) < 0.4).astype(int)
    y[0] = 1
    perfect = f1_suite(y, y)
    assert perfect["micro_f1"] == 1.0 and perfect["example_f1"] == 1.0
    assert f1_suite(y, 1 - y)["micro_f1"] == 0.0


def test_micro_f1_worked_example():
    scores = f1_suite(np.array([[1, 0], [1, 1]]), np.array([[1, 1], [0, 1]]))
    assert scores["micro_f1"] == pytest.approx(2 / 3)


def test_zero_division_conventions():
    y_true = np.array([[0, 1], [0, 0]])
    y_pred = np.array([[0, 1], [0, 0]])
    scores = f1_suite(y_true, y_pred)
    assert scores["example_f1"] == 1.0
    # label 0 has no positives and no predictions
    assert per_label_scores(y_true, y_pred)["f1"].tolist() == [0.0, 1.0]
    assert scores["macro_f1"] == 0.5


def test_f1_suite_matches_brute_force(rng):
    for _ in range(100):
        N, K = rng.integers(1, 201), rng.integers(1, 23)
        y_true = (rng.random((N, K)) < 0.3).astype(int)
        y_pred = (rng.random((N, K)) < 0.3).astype(int)
        scores = f1_suite(y_true, y_pred)
        assert scores["micro_f1"] == pytest.approx(brute_micro(y_true, y_pred), abs=1e-12)
        assert scores["example_f1"] == pytest.approx(brute_example(y_true, y_pred), abs=1e-12)
        per_label = per_label_scores(y_true, y_pred)["f1"]
        assert per_label.min() - 1e-12 <= scores["macro_f1"] <= per_label.max() + 1e-12


def test_metrics_invariant_to_row_permutation(rng):
    y_true = (rng.random((40, 6)) < 0.3).astype(int)
    y_pred = (rng.random((40, 6)) < 0.3).astype(int)
    order = rng.permutation(40)
    a, b = f1_suite(y_true, y_pred), f1_suite(y_true[order], y_pred[order])
    for key in a:
        assert a[key] == pytest.approx(b[key], abs=1e-12)


def test_f1_suite_rejects_bad_shapes():
    with pytest.raises(MetricError):
        f1_suite(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(MetricError):
        f1_suite(np.zeros((0, 3)), np.zeros((0, 3)))


def test_pr_auc_examples():
    truth = np.array([[1], [1], [0], [0]])
    assert macro_pr_auc(truth, np.array([[0.9], [0.8], [0.2], [0.1]]))[0] == pytest.approx(1.0)
    constant = np.array([[1], [0], [0], [0], [1]])
    assert macro_pr_auc(constant, np.full((5, 1), 0.3))[0] == pytest.approx(0.4)


def test_pr_auc_excludes_labels_without_positives():
    truth = np.array([[1, 0], [0, 0], [1, 0]])
    scores = np.array([[0.9, 0.2], [0.1, 0.7], [0.8, 0.3]])
    value, excluded = macro_pr_auc(truth, scores)
    assert value == pytest.approx(1.0) and excluded == 1
    with pytest.raises(MetricError):
        macro_pr_auc(np.zeros((3, 2)), scores)


def test_pr_auc_matches_sweep_oracle(rng):
    for _ in range(100):
        N, K = 30, 5
        truth = (rng.random((N, K)) < 0.3).astype(int)
        truth[rng.integers(0, N), :] = 1
        scores = np.round(rng.random((N, K)), 1)
        expected = np.mean([sweep_average_precision(truth[:, k].astype(bool), scores[:, k]) for k in range(K)])
        assert macro_pr_auc(truth, scores)[0] == pytest.approx(expected, abs=1e-9)


def test_pr_auc_adding_a_top_ranked_positive_never_lowers(rng):
    for _ in range(50):
        truth = (rng.random(25) < 0.3).astype(int)
        truth[0] = 1
        scores = rng.random(25)
        before = macro_pr_auc(truth[:, None], scores[:, None])[0]
        after = macro_pr_auc(np.append(truth, 1)[:, None], np.append(scores, scores.max() + 1.0)[:, None])[0]
        assert after >= before - 1e-12


def test_missed_by_dimension():
    groups = {"color": [0, 1], "shape": [2]}
    y_true = np.array([[1, 0, 1], [0, 0, 1], [0, 1, 0]])
    assert missed_by_dimension(y_true, y_true, groups) == {"color": 0, "shape": 0}
    assert missed_by_dimension(y_true, np.zeros_like(y_true), groups) == {"color": 2, "shape": 2}
    single = missed_by_dimension(np.array([[1, 0]]), np.array([[0, 0]]), {"g": [0, 1]})
    assert single == {"g": 1}
    with pytest.raises(MetricError):
        missed_by_dimension(y_true, y_true, {"color": [0, 1]})


def test_f1_by_dimension_means():
    assert f1_by_dimension([1.0, 0.5, 0.25], {"a": [0, 1], "b": [2]}) == {"a": 0.75, "b": 0.25}


def test_build_report_fields():
    y_true = np.array([[1, 0, 1], [0, 1, 0], [1, 0, 0], [0, 1, 1]])
    probs = np.array([[0.9, 0.1, 0.6], [0.2, 0.7, 0.1], [0.8, 0.6, 0.3], [0.1, 0.9, 0.8]])
    rules = [ConstraintRule(ConstraintKind.MUTUAL_EXCLUSION, 0, 1)]
    report = build_report(y_true, probs, {"g0": [0, 1], "g1": [2]}, 0.5, rules, ["a", "b", "c"])
    assert report.num_samples == 4
    assert report.rule_violation_rate == 0.25
    assert report.per_label["label"].tolist() == ["a", "b", "c"]
    payload = report.to_dict()
    assert set(report.scores()) <= set(payload)
    assert all(0.0 <= v <= 1.0 for v in report.scores().values())
    assert isinstance(payload["per_label"][0]["support"], int)
    assert np.array_equal(binarize(probs, 0.5), (probs >= 0.5).astype(int))
