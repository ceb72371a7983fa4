"""
losses.py

Constraint-aware multi-label objective:

    total = ASL + lambda1 * constraint penalty + lambda2 * prior KL

- ASL: asymmetric focusing (zeta_pos, zeta_neg) with per-class weights
  gamma_k = sqrt(tau / pi_k).
- constraint penalty: per rule, batch mean of max(0, phi(p)) with phi evaluated
  on probabilities.
- prior: sum_k pi_k log(pi_k / q_k), q_k the batch-mean probability. This is
  KL(pi || q) as written in the formula, not KL(q || pi).

Every component accepts an optional label mask; masked labels contribute
exactly zero gradient.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from mirnet.diffcore import Tensor, abs_, clamp, log, relu

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
PREVALENCE_FLOOR = 1e-4


class LossError(ValueError):
    pass


class ConstraintKind(str, Enum):
    MUTUAL_EXCLUSION = "mutual_exclusion"
    CO_APPEARANCE = "co_appearance"
    IMPLICATION = "implication"


@dataclass(frozen=True)
class ConstraintRule:
    kind: ConstraintKind
    a: int
    b: int

    def validate(self, num_labels: int) -> None:
        if self.a == self.b:
            raise LossError(f"rule {self.describe()}: a and b must differ")
        if not (0 <= self.a < num_labels and 0 <= self.b < num_labels):
            raise LossError(f"rule {self.describe()}: label index out of range for K={num_labels}")

    def describe(self) -> str:
        return f"{self.kind.value}({self.a}, {self.b})"

    def violations(self, y: np.ndarray) -> np.ndarray:
        """Hard phi on binary labels: boolean per row, True when the rule is broken."""
        ya, yb = y[:, self.a].astype(bool), y[:, self.b].astype(bool)
        if self.kind is ConstraintKind.MUTUAL_EXCLUSION:
            return ya & yb
        if self.kind is ConstraintKind.CO_APPEARANCE:
            return ya != yb
        return ya & ~yb

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, raw: dict) -> "ConstraintRule":
        try:
            return cls(ConstraintKind(raw["kind"]), int(raw["a"]), int(raw["b"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise LossError(f"invalid rule {raw!r}: {exc}") from exc


def load_rules(path: str | Path) -> list[ConstraintRule]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise LossError(f"rules file {path} must contain a JSON list")
    return [ConstraintRule.from_dict(entry) for entry in raw]


def rule_violation_rate(y_pred: np.ndarray, rules: Sequence[ConstraintRule]) -> float:
    """Fraction of rows whose binary predictions break at least one rule."""
    y_pred = np.asarray(y_pred)
    if not rules or y_pred.shape[0] == 0:
        return 0.0
    broken = np.zeros(y_pred.shape[0], dtype=bool)
    for rule in rules:
        broken |= rule.violations(y_pred)
    return float(broken.mean())


def class_weights(prevalence: np.ndarray, tau: float | None = None) -> np.ndarray:
    """gamma_k = sqrt(tau / pi_k); tau defaults to the smallest clamped prevalence."""
    pi = np.maximum(np.asarray(prevalence, dtype=np.float64), PREVALENCE_FLOOR)
    tau = float(pi.min()) if tau is None else float(tau)
    return np.sqrt(tau / pi)


@dataclass
class AslConfig:
    zeta_pos: float = 0.0
    zeta_neg: float = 4.0
    gamma: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.zeta_pos < 0 or self.zeta_neg < 0:
            raise LossError("focusing exponents must be non-negative")
        if self.zeta_pos > self.zeta_neg:
            raise LossError(f"asymmetric focusing needs zeta_pos <= zeta_neg, got {self.zeta_pos} > {self.zeta_neg}")


@dataclass
class ObjectiveConfig:
    lambda1: float = 0.1
    lambda2: float = 0.05
    rules: list[ConstraintRule] = field(default_factory=list)
    prior: np.ndarray | None = None
    asl: AslConfig = field(default_factory=AslConfig)
    disable_constraints: bool = False
    disable_prior: bool = False
    label_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise LossError(f"loss weights must be non-negative, got {self.lambda1}, {self.lambda2}")


@dataclass
class LossBreakdown:
    total: float
    asl: float
    constraint: float
    prior: float

    def to_dict(self) -> dict[str, float]:
        return {"total": self.total, "asl": self.asl, "constraint": self.constraint, "prior": self.prior}


def _check_pair(p: Tensor, y: np.ndarray) -> None:
    if p.ndim != 2 or p.shape != np.shape(y):
        raise LossError(f"probabilities {p.shape} and labels {np.shape(y)} must share a (batch, K) shape")


def asl(p: Tensor, y: np.ndarray, cfg: AslConfig, label_mask: np.ndarray | None = None) -> Tensor:
    """Asymmetric loss: summed over classes, averaged over the batch."""
    y = np.asarray(y, dtype=np.float64)
    _check_pair(p, y)
    num_labels = y.shape[1]
    weights = np.ones(num_labels) if cfg.gamma is None else np.asarray(cfg.gamma, dtype=np.float64)
    if weights.shape != (num_labels,):
        raise LossError(f"gamma has shape {weights.shape}, expected ({num_labels},)")
    if label_mask is not None:
        weights = weights * np.asarray(label_mask, dtype=np.float64)

    pc = clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    qc = 1.0 - pc
    positive = y * log(pc)
    if cfg.zeta_pos != 0.0:
        positive = positive * qc ** cfg.zeta_pos
    negative = (1.0 - y) * log(qc)
    if cfg.zeta_neg != 0.0:
        negative = negative * pc ** cfg.zeta_neg
    per_sample = ((positive + negative) * weights).sum(axis=1)
    return -per_sample.mean()


def _phi(p: Tensor, rule: ConstraintRule) -> Tensor:
    pa, pb = p[:, rule.a], p[:, rule.b]
    if rule.kind is ConstraintKind.MUTUAL_EXCLUSION:
        return pa * pb
    if rule.kind is ConstraintKind.CO_APPEARANCE:
        return abs_(pa - pb)
    return pa * (1.0 - pb)


def constraint_penalty(p: Tensor, rules: Sequence[ConstraintRule]) -> Tensor:
    """Sum over rules of E_batch[max(0, phi(p))]; zero for an empty rule list."""
    if p.ndim != 2:
        raise LossError(f"probabilities must be (batch, K), got {p.shape}")
    total = Tensor(0.0)
    for rule in rules:
        rule.validate(p.shape[1])
        total = total + relu(_phi(p, rule)).mean()
    return total


def kl_prior(p: Tensor, pi: np.ndarray, label_mask: np.ndarray | None = None) -> Tensor:
    """sum_k pi_k log(pi_k / q_k) with q the batch-mean prediction."""
    pi = np.clip(np.asarray(pi, dtype=np.float64), PROB_EPS, 1.0)
    if p.ndim != 2 or pi.shape != (p.shape[1],):
        raise LossError(f"prior of shape {pi.shape} does not match probabilities {p.shape}")
    q = clamp(p.mean(axis=0), PROB_EPS, 1.0)
    weights = pi if label_mask is None else pi * np.asarray(label_mask, dtype=np.float64)
    return (weights * (np.log(pi) - log(q))).sum()


def combine(diagnosis, constraint, prior, cfg: ObjectiveConfig):
    """ASL + lambda1 * constraint + lambda2 * prior, for tensors or plain floats."""
    return diagnosis + constraint * cfg.lambda1 + prior * cfg.lambda2


def total_loss(p: Tensor, y: np.ndarray, cfg: ObjectiveConfig) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the three components plus their individual values."""
    mask = cfg.label_mask
    diagnosis = asl(p, y, cfg.asl, mask)
    penalty = prior = 0.0
    constraint_value = prior_value = 0.0

    if not cfg.disable_constraints and cfg.lambda1 > 0.0 and cfg.rules:
        rules = cfg.rules
        if mask is not None:
            keep = np.asarray(mask, dtype=bool)
            rules = [r for r in rules if keep[r.a] and keep[r.b]]
        if rules:
            penalty = constraint_penalty(p, rules)
            constraint_value = penalty.item()

    if not cfg.disable_prior and cfg.lambda2 > 0.0 and cfg.prior is not None:
        prior = kl_prior(p, cfg.prior, mask)
        prior_value = prior.item()

    total = combine(diagnosis, penalty, prior, cfg)

    breakdown = LossBreakdown(total=total.item(), asl=diagnosis.item(),
                              constraint=constraint_value, prior=prior_value)
    return total, breakdown


@dataclass
class ObjectiveSettings:
    """Config-file view of the objective; `build` turns it into an ObjectiveConfig."""

    lambda1: float = 0.1
    lambda2: float = 0.05
    zeta_pos: float = 0.0
    zeta_neg: float = 4.0
    tau: float | None = None
    class_weighting: bool = True

    def build(self, rules: Sequence[ConstraintRule], prevalence: np.ndarray | None,
              disable_constraints: bool = False, disable_prior: bool = False) -> ObjectiveConfig:
        gamma = class_weights(prevalence, self.tau) if self.class_weighting and prevalence is not None else None
        prior = None if prevalence is None else np.asarray(prevalence, dtype=np.float64)
        return ObjectiveConfig(lambda1=self.lambda1, lambda2=self.lambda2, rules=list(rules), prior=prior,
                               asl=AslConfig(self.zeta_pos, self.zeta_neg, gamma),
                               disable_constraints=disable_constraints, disable_prior=disable_prior)
