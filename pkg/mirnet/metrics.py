"""
metrics.py

Multi-label evaluation.

Conventions:
- example-F1: a sample with empty truth and empty prediction scores 1
- per-label F1 with no positives and no predicted positives scores 0
- macro PR-AUC: per-label average precision (step interpolation, precision held
  right-constant), labels without positives excluded and counted
- missed detection: a dimension group with >= 1 true label but no predicted label
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import average_precision_score

from mirnet.losses import ConstraintRule, rule_violation_rate

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ("example_f1", "micro_f1", "macro_f1", "macro_precision", "macro_recall", "macro_pr_auc")


class MetricError(ValueError):
    pass


def _check(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 2:
        raise MetricError(f"truth {y_true.shape} and predictions {y_pred.shape} must share an N x K shape")
    if y_true.shape[0] < 1:
        raise MetricError("metrics need at least one sample")
    return y_true.astype(bool), y_pred.astype(bool)


def _ratio(num: np.ndarray, den: np.ndarray, empty: float) -> np.ndarray:
    num, den = np.asarray(num, dtype=np.float64), np.asarray(den, dtype=np.float64)
    out = np.full(den.shape, empty)
    np.divide(num, den, out=out, where=den > 0)
    return out


def binarize(probabilities: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probabilities) >= threshold).astype(np.int64)


def per_label_scores(y_true: np.ndarray, y_pred: np.ndarray) -> pd.DataFrame:
    """One row per label: precision, recall, f1, support."""
    t, p = _check(y_true, y_pred)
    tp = (t & p).sum(axis=0)
    fp = (~t & p).sum(axis=0)
    fn = (t & ~p).sum(axis=0)
    return pd.DataFrame({
        "precision": _ratio(tp, tp + fp, 0.0),
        "recall": _ratio(tp, tp + fn, 0.0),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn, 0.0),
        "support": t.sum(axis=0).astype(np.int64),
    })


def f1_suite(y_true: np.ndarray, y_pred: np.ndarray) -> dict[str, float]:
    t, p = _check(y_true, y_pred)
    overlap = (t & p).sum(axis=1)
    sizes = t.sum(axis=1) + p.sum(axis=1)
    example = _ratio(2 * overlap, sizes, 1.0).mean()

    tp, fp, fn = (t & p).sum(), (~t & p).sum(), (t & ~p).sum()
    micro = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0

    table = per_label_scores(t, p)
    return {
        "example_f1": float(example),
        "micro_f1": float(micro),
        "macro_f1": float(table["f1"].mean()),
        "macro_precision": float(table["precision"].mean()),
        "macro_recall": float(table["recall"].mean()),
    }


def macro_pr_auc(y_true: np.ndarray, probabilities: np.ndarray) -> tuple[float, int]:
    """(macro average precision over labels with positives, number of labels excluded)."""
    t = np.asarray(y_true).astype(bool)
    scores = np.asarray(probabilities, dtype=np.float64)
    if t.shape != scores.shape or t.ndim != 2:
        raise MetricError(f"truth {t.shape} and scores {scores.shape} must share an N x K shape")
    included = np.flatnonzero(t.any(axis=0))
    if included.size == 0:
        raise MetricError("no label has a positive sample; PR-AUC is undefined")
    per_label = [average_precision_score(t[:, k], scores[:, k]) for k in included]
    excluded = t.shape[1] - included.size
    if excluded:
        logger.debug("macro PR-AUC excludes %d label(s) without positives", excluded)
    return float(np.mean(per_label)), int(excluded)


def _check_groups(groups: Mapping[str, Sequence[int]], num_labels: int) -> None:
    members = sorted(k for group in groups.values() for k in group)
    if members != list(range(num_labels)):
        raise MetricError(f"dimension groups must partition labels 0..{num_labels - 1}")


def missed_by_dimension(y_true: np.ndarray, y_pred: np.ndarray,
                        groups: Mapping[str, Sequence[int]]) -> dict[str, int]:
    t, p = _check(y_true, y_pred)
    _check_groups(groups, t.shape[1])
    out = {}
    for name, members in groups.items():
        idx = list(members)
        out[name] = int((t[:, idx].any(axis=1) & ~p[:, idx].any(axis=1)).sum())
    return out


def f1_by_dimension(per_label_f1: Sequence[float], groups: Mapping[str, Sequence[int]]) -> dict[str, float]:
    f1 = np.asarray(per_label_f1, dtype=np.float64)
    _check_groups(groups, f1.size)
    return {name: float(f1[list(members)].mean()) for name, members in groups.items()}


def _native(value):
    return value.item() if isinstance(value, np.generic) else value


@dataclass
class MetricReport:
    example_f1: float
    micro_f1: float
    macro_f1: float
    macro_precision: float
    macro_recall: float
    macro_pr_auc: float
    pr_auc_excluded: int
    per_label: pd.DataFrame
    missed_by_dimension: dict[str, int]
    f1_by_dimension: dict[str, float]
    rule_violation_rate: float
    num_samples: int
    threshold: float = 0.5
    extra: dict = field(default_factory=dict)

    def scores(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in SCORE_COLUMNS}

    def to_dict(self) -> dict:
        return {
            **self.scores(),
            "pr_auc_excluded": self.pr_auc_excluded,
            "per_label": [{key: _native(value) for key, value in row.items()}
                          for row in self.per_label.to_dict(orient="records")],
            "missed_by_dimension": self.missed_by_dimension,
            "f1_by_dimension": self.f1_by_dimension,
            "rule_violation_rate": self.rule_violation_rate,
            "num_samples": self.num_samples,
            "threshold": self.threshold,
            **self.extra,
        }


def build_report(y_true: np.ndarray, probabilities: np.ndarray, groups: Mapping[str, Sequence[int]],
                 threshold: float = 0.5, rules: Sequence[ConstraintRule] = (),
                 label_names: Sequence[str] | None = None) -> MetricReport:
    y_pred = binarize(probabilities, threshold)
    suite = f1_suite(y_true, y_pred)
    pr_auc, excluded = macro_pr_auc(y_true, probabilities)
    table = per_label_scores(y_true, y_pred)
    names = list(label_names) if label_names is not None else [f"label_{k:02d}" for k in range(table.shape[0])]
    table.insert(0, "label", names)
    table.insert(0, "index", np.arange(len(names)))
    return MetricReport(
        **suite,
        macro_pr_auc=pr_auc,
        pr_auc_excluded=excluded,
        per_label=table,
        missed_by_dimension=missed_by_dimension(y_true, y_pred, groups),
        f1_by_dimension=f1_by_dimension(table["f1"].to_numpy(), groups),
        rule_violation_rate=rule_violation_rate(y_pred, rules),
        num_samples=int(np.shape(y_true)[0]),
        threshold=threshold,
    )
