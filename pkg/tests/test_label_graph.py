import numpy as np
import pytest

from mirnet.label_graph import (AdjustmentAction, GraphAdjustment, GraphConfig, GraphError, LabelGraph,
                                adjustments_from_rules, apply_adjustments, build_label_graph, cooccurrence,
                                edge_confidence, merge_adjustments, nearest_rank, threshold_adjacency)
from mirnet.losses import ConstraintKind, ConstraintRule

ENHANCE, SUPPRESS = AdjustmentAction.ENHANCE, AdjustmentAction.SUPPRESS


def brute_cooccurrence(Y):
    N, K = Y.shape
    M = np.zeros((K, K), dtype=np.int64)
    for n in range(N):
        for i in range(K):
            for j in range(i + 1, K):
                if Y[n, i] and Y[n, j]:
                    M[i, j] += 1
                    M[j, i] += 1
    return M


def brute_threshold(M, alpha):
    K = M.shape[0]
    positives = sorted(int(M[i, j]) for i in range(K) for j in range(i + 1, K) if M[i, j] > 0)
    A = np.zeros((K, K), dtype=bool)
    if not positives:
        return A
    # smallest value whose cumulative share of the multiset reaches alpha percent
    threshold = positives[-1]
    for rank, value in enumerate(positives, start=1):
        if rank * 100 >= alpha * len(positives):
            threshold = value
            break
    for i in range(K):
        for j in range(K):
            A[i, j] = i != j and M[i, j] > 0 and M[i, j] >= threshold
    return A


def test_cooccurrence_small_example():
    M = cooccurrence(np.array([[1, 1, 0], [1, 0, 1]]))
    assert (M[0, 1], M[0, 2], M[1, 2]) == (1, 1, 0)
    assert np.all(np.diag(M) == 0)
    assert np.array_equal(M, M.T)


def test_cooccurrence_zero_and_duplicated_rows(rng):
    assert not cooccurrence(np.zeros((5, 4), dtype=int)).any()
    Y = (rng.random((30, 6)) < 0.4).astype(int)
    assert np.array_equal(cooccurrence(np.vstack([Y, Y])), 2 * cooccurrence(Y))


def test_cooccurrence_rejects_non_binary():
    with pytest.raises(GraphError):
        cooccurrence(np.array([[0, 2]]))


def test_cooccurrence_matches_brute_force(rng):
    for _ in range(100):
        N, K = rng.integers(1, 201), rng.integers(2, 23)
        Y = (rng.random((N, K)) < rng.uniform(0.05, 0.6)).astype(int)
        M = cooccurrence(Y)
        assert np.array_equal(M, brute_cooccurrence(Y))
        counts = Y.sum(axis=0)
        assert np.all(M <= np.minimum.outer(counts, counts))


def test_nearest_rank_examples():
    assert nearest_rank([1, 1], 25) == 1
    assert nearest_rank([1, 2, 3, 4], 25) == 1
    assert nearest_rank([1, 2, 3, 4], 50) == 2
    assert nearest_rank([1, 2, 3, 4], 100) == 4
    assert nearest_rank([4, 3, 2, 1], 0) == 1


def test_threshold_examples():
    M = np.zeros((4, 4), dtype=int)
    for (i, j), v in zip([(0, 1), (0, 2), (1, 3), (2, 3)], [1, 2, 3, 4]):
        M[i, j] = M[j, i] = v
    assert threshold_adjacency(M, 25).sum() == 8
    top = threshold_adjacency(M, 100)
    assert top.sum() == 2 and top[2, 3] and top[3, 2]
    assert not threshold_adjacency(np.zeros((3, 3), dtype=int), 25).any()


def test_threshold_matches_brute_force(rng):
    for _ in range(100):
        N, K = rng.integers(1, 201), rng.integers(2, 23)
        Y = (rng.random((N, K)) < rng.uniform(0.02, 0.5)).astype(int)
        M = cooccurrence(Y)
        alpha = float(rng.choice([0.0, 10.0, 25.0, 50.0, 75.0, 100.0, rng.uniform(0, 100)]))
        assert np.array_equal(threshold_adjacency(M, alpha), brute_threshold(M, alpha))


def test_threshold_monotone_in_alpha(rng):
    Y = (rng.random((120, 10)) < 0.3).astype(int)
    M = cooccurrence(Y)
    previous = threshold_adjacency(M, 0)
    for alpha in range(5, 101, 5):
        current = threshold_adjacency(M, alpha)
        assert not (current & ~previous).any()
        previous = current


def test_threshold_rejects_bad_alpha():
    with pytest.raises(GraphError):
        threshold_adjacency(np.zeros((2, 2), dtype=int), 120)


def test_apply_adjustments():
    A = np.zeros((3, 3), dtype=bool)
    A[0, 1] = A[1, 0] = True
    assert np.array_equal(apply_adjustments(A, []), A)
    out = apply_adjustments(A, [GraphAdjustment(1, 0, SUPPRESS), GraphAdjustment(2, 1, ENHANCE)])
    assert not out[0, 1] and not out[1, 0]
    assert out[1, 2] and out[2, 1]
    assert np.array_equal(out, out.T) and not np.diag(out).any()


def test_conflicting_adjustments_rejected():
    with pytest.raises(GraphError, match="conflicting"):
        apply_adjustments(np.zeros((3, 3), dtype=bool),
                          [GraphAdjustment(0, 1, ENHANCE), GraphAdjustment(1, 0, SUPPRESS)])
    with pytest.raises(GraphError):
        apply_adjustments(np.zeros((3, 3), dtype=bool), [GraphAdjustment(1, 1, ENHANCE)])
    with pytest.raises(GraphError):
        apply_adjustments(np.zeros((3, 3), dtype=bool), [GraphAdjustment(0, 5, ENHANCE)])


def test_edge_confidence():
    M = np.array([[0, 2, 4], [2, 0, 1], [4, 1, 0]])
    C = edge_confidence(M)
    assert C[0, 2] == 1.0 and C[0, 1] == 0.5
    uniform = np.ones((3, 3), dtype=int) - np.eye(3, dtype=int)
    assert np.all(edge_confidence(uniform)[~np.eye(3, dtype=bool)] == 1.0)
    with pytest.raises(GraphError):
        edge_confidence(np.zeros((3, 3), dtype=int))


def test_rules_become_adjustments():
    rules = [ConstraintRule(ConstraintKind.MUTUAL_EXCLUSION, 0, 1), ConstraintRule(ConstraintKind.IMPLICATION, 2, 3)]
    derived = {adj.pair: adj.action for adj in adjustments_from_rules(rules)}
    assert derived == {(0, 1): SUPPRESS, (2, 3): ENHANCE}
    merged = merge_adjustments(adjustments_from_rules(rules), [GraphAdjustment(1, 0, ENHANCE)])
    assert {adj.pair: adj.action for adj in merged} == {(0, 1): ENHANCE, (2, 3): ENHANCE}
    assert GraphConfig(adjust_from_rules=False).resolve(rules) == []


def test_build_label_graph_is_pure(rng):
    Y = (rng.random((80, 6)) < 0.35).astype(int)
    adjustments = [GraphAdjustment(0, 5, ENHANCE)]
    a, b = build_label_graph(Y, 25.0, adjustments), build_label_graph(Y.copy(), 25.0, list(adjustments))
    assert a.to_dict() == b.to_dict()
    assert np.array_equal(a.adjacency, b.adjacency)


def test_build_label_graph_enhanced_edge_without_cooccurrence():
    Y = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
    graph = build_label_graph(Y, 25.0, [GraphAdjustment(2, 3, ENHANCE)])
    assert graph.adjacency[2, 3] and graph.confidence[2, 3] == 1.0
    assert graph.edges() == [(0, 1), (2, 3)]
    assert np.all(graph.confidence[~graph.adjacency] == 0.0)


def test_build_label_graph_without_cooccurrence():
    Y = np.eye(3, dtype=int)
    graph = build_label_graph(Y)
    assert graph.threshold is None
    assert not graph.adjacency.any()


def test_label_graph_json_round_trip(rng):
    Y = (rng.random((60, 5)) < 0.4).astype(int)
    graph = build_label_graph(Y, 25.0, [GraphAdjustment(0, 1, SUPPRESS)])
    back = LabelGraph.from_dict(graph.to_dict())
    assert np.array_equal(back.adjacency, graph.adjacency)
    assert np.array_equal(back.confidence, graph.confidence)
    assert back.adjustments == graph.adjustments
