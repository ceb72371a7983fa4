"""
label_graph.py

Label graph from training-split statistics:

1. co-occurrence counts M = Y^T Y with the diagonal zeroed
2. adjacency A_ij = [M_ij >= Q_alpha(S)], S the positive off-diagonal counts,
   Q_alpha the nearest-rank percentile
3. clinical-prior adjustments (enhance / suppress) applied after thresholding
4. edge confidence M_ij / max M
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from mirnet.losses import ConstraintKind, ConstraintRule

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 25.0


class GraphError(ValueError):
    pass


class AdjustmentAction(str, Enum):
    ENHANCE = "enhance"
    SUPPRESS = "suppress"


@dataclass(frozen=True)
class GraphAdjustment:
    i: int
    j: int
    action: AdjustmentAction

    @property
    def pair(self) -> tuple[int, int]:
        return (min(self.i, self.j), max(self.i, self.j))

    def to_dict(self) -> dict:
        return {"i": self.i, "j": self.j, "action": self.action.value}

    @classmethod
    def from_dict(cls, raw: dict) -> "GraphAdjustment":
        try:
            return cls(int(raw["i"]), int(raw["j"]), AdjustmentAction(raw["action"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise GraphError(f"invalid graph adjustment {raw!r}: {exc}") from exc


@dataclass
class LabelGraph:
    counts: np.ndarray
    adjacency: np.ndarray
    confidence: np.ndarray
    alpha: float
    threshold: int | None
    adjustments: list[GraphAdjustment] = field(default_factory=list)

    @property
    def num_labels(self) -> int:
        return self.counts.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(np.triu(self.adjacency, k=1))
        return [(int(i), int(j)) for i, j in zip(rows, cols)]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "threshold": self.threshold,
            "num_labels": self.num_labels,
            "counts": self.counts.astype(int).tolist(),
            "edges": [{"i": i, "j": j, "count": int(self.counts[i, j]), "confidence": float(self.confidence[i, j])}
                      for i, j in self.edges()],
            "adjustments": [a.to_dict() for a in self.adjustments],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "LabelGraph":
        K = int(raw["num_labels"])
        adjacency = np.zeros((K, K), dtype=bool)
        confidence = np.zeros((K, K))
        for edge in raw["edges"]:
            i, j = int(edge["i"]), int(edge["j"])
            adjacency[i, j] = adjacency[j, i] = True
            confidence[i, j] = confidence[j, i] = float(edge["confidence"])
        return cls(counts=np.asarray(raw["counts"], dtype=np.int64), adjacency=adjacency, confidence=confidence,
                   alpha=float(raw["alpha"]), threshold=raw["threshold"],
                   adjustments=[GraphAdjustment.from_dict(a) for a in raw.get("adjustments", [])])


def cooccurrence(Y: np.ndarray) -> np.ndarray:
    """M_ij = sum_n Y_ni Y_nj for i != j; zero diagonal."""
    Y = np.asarray(Y)
    if Y.ndim != 2 or Y.shape[0] < 1:
        raise GraphError(f"label matrix must be N x K with N >= 1, got shape {Y.shape}")
    if not np.isin(Y, (0, 1)).all():
        raise GraphError("label matrix must be binary")
    Y = Y.astype(np.int64)
    M = Y.T @ Y
    np.fill_diagonal(M, 0)
    return M


def nearest_rank(values: Sequence[int], alpha: float) -> int:
    """Smallest element whose cumulative rank reaches alpha/100 of the multiset."""
    ordered = sorted(values)
    rank = max(1, math.ceil(alpha * len(ordered) / 100.0))
    return ordered[rank - 1]


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 100.0:
        raise GraphError(f"percentile alpha must lie in [0, 100], got {alpha}")


def positive_counts(M: np.ndarray) -> np.ndarray:
    upper = np.asarray(M)[np.triu_indices(M.shape[0], k=1)]
    return upper[upper > 0]


def threshold_adjacency(M: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    _check_alpha(alpha)
    S = positive_counts(M)
    if S.size == 0:
        return np.zeros(M.shape, dtype=bool)
    A = (M >= nearest_rank(S.tolist(), alpha)) & (M > 0)
    np.fill_diagonal(A, False)
    return A


def _check_adjustments(adjustments: Iterable[GraphAdjustment],
                       num_labels: int | None = None) -> dict[tuple[int, int], AdjustmentAction]:
    by_pair: dict[tuple[int, int], AdjustmentAction] = {}
    for adj in adjustments:
        if adj.i == adj.j:
            raise GraphError(f"adjustment on ({adj.i}, {adj.j}): a label cannot be adjusted against itself")
        if num_labels is not None and not (0 <= adj.i < num_labels and 0 <= adj.j < num_labels):
            raise GraphError(f"adjustment on ({adj.i}, {adj.j}): index out of range for K={num_labels}")
        previous = by_pair.get(adj.pair)
        if previous is not None and previous is not adj.action:
            raise GraphError(f"conflicting adjustments on pair {adj.pair}: {previous.value} and {adj.action.value}")
        by_pair[adj.pair] = adj.action
    return by_pair


def apply_adjustments(A: np.ndarray, adjustments: Sequence[GraphAdjustment]) -> np.ndarray:
    out = np.array(A, dtype=bool, copy=True)
    for (i, j), action in _check_adjustments(adjustments, out.shape[0]).items():
        out[i, j] = out[j, i] = action is AdjustmentAction.ENHANCE
    return out


def edge_confidence(M: np.ndarray) -> np.ndarray:
    top = np.max(M) if np.size(M) else 0
    if top <= 0:
        raise GraphError("co-occurrence matrix is all zero; there is no graph to weight")
    return np.asarray(M, dtype=np.float64) / float(top)


def adjustments_from_rules(rules: Sequence[ConstraintRule]) -> list[GraphAdjustment]:
    """Mutual exclusion suppresses the edge, co-appearance and implication enhance it."""
    derived: dict[tuple[int, int], GraphAdjustment] = {}
    for rule in rules:
        action = AdjustmentAction.SUPPRESS if rule.kind is ConstraintKind.MUTUAL_EXCLUSION else AdjustmentAction.ENHANCE
        adj = GraphAdjustment(rule.a, rule.b, action)
        if adj.pair in derived and derived[adj.pair].action is not action:
            raise GraphError(f"rules disagree on pair {adj.pair}")
        derived[adj.pair] = adj
    return list(derived.values())


def merge_adjustments(derived: Sequence[GraphAdjustment], explicit: Sequence[GraphAdjustment]) -> list[GraphAdjustment]:
    merged = {adj.pair: adj for adj in derived}
    _check_adjustments(explicit)
    merged.update({adj.pair: adj for adj in explicit})
    return [merged[pair] for pair in sorted(merged)]


def build_label_graph(Y: np.ndarray, alpha: float = DEFAULT_ALPHA,
                      adjustments: Sequence[GraphAdjustment] = ()) -> LabelGraph:
    """Full pipeline on the training labels; a pure function of its inputs."""
    M = cooccurrence(Y)
    _check_alpha(alpha)
    S = positive_counts(M)
    threshold = nearest_rank(S.tolist(), alpha) if S.size else None
    A = apply_adjustments(threshold_adjacency(M, alpha), adjustments)

    if S.size:
        confidence = edge_confidence(M)
    else:
        logger.warning("no label pair co-occurs in the training split; only enhanced edges remain")
        confidence = np.zeros(M.shape)
    # enhanced pairs with zero co-occurrence get confidence 1
    for adj in adjustments:
        if adj.action is AdjustmentAction.ENHANCE and confidence[adj.i, adj.j] == 0.0:
            confidence[adj.i, adj.j] = confidence[adj.j, adj.i] = 1.0
    confidence = np.where(A, confidence, 0.0)

    logger.info("label graph: K=%d, %d edges, threshold=%s", M.shape[0], int(np.triu(A, 1).sum()), threshold)
    return LabelGraph(counts=M, adjacency=A, confidence=confidence, alpha=float(alpha), threshold=threshold,
                      adjustments=list(adjustments))


@dataclass
class GraphConfig:
    alpha: float = DEFAULT_ALPHA
    adjust_from_rules: bool = True
    adjustments: list[GraphAdjustment] = field(default_factory=list)

    def resolve(self, rules: Sequence[ConstraintRule]) -> list[GraphAdjustment]:
        derived = adjustments_from_rules(rules) if self.adjust_from_rules else []
        return merge_adjustments(derived, self.adjustments)
