"""
train.py

Fine-tuning, evaluation and the dual-model boosting ensemble.

- finetune: AdamW with layer-wise lr decay over the encoder, constraint-aware
  objective, best checkpoint kept by validation macro-F1
- select_boost_labels / boost_finetune: a second model, started from the base
  weights, trained only on the underperforming labels with augmented images
- merge_predictions: replace-set columns come from the second model
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from tqdm import tqdm

from mirnet.diffcore import DiffError, no_grad
from mirnet.gat import GraphContext
from mirnet.layers import Params, copy_params
from mirnet.losses import ObjectiveConfig, total_loss
from mirnet.metrics import MetricReport, binarize, build_report, f1_suite, per_label_scores
from mirnet.model import ModelConfig, forward, init_model, layer_id, num_layers
from mirnet.optim import OptimizerConfig, collect_grads, init_optimizer, optimizer_step

logger = logging.getLogger(__name__)

ABLATIONS = ("C", "G", "P")


class TrainingDivergedError(RuntimeError):
    pass


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    layer_decay: float = 0.75
    threshold: float = 0.5
    eval_batch_size: int = 256

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainConfigError("epochs and batch_size must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise TrainConfigError(f"threshold must lie in (0, 1), got {self.threshold}")

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(lr=self.lr, weight_decay=self.weight_decay, layer_decay=self.layer_decay)


@dataclass
class AugmentConfig:
    erase_prob: float = 0.5
    erase_max_area: float = 0.25
    jitter: float = 0.05


@dataclass
class BoostConfig:
    f1_threshold: float = 0.5
    replace_count: int = 5
    finetune_count: int | None = None
    epochs: int = 30
    lr: float = 5e-4
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class SplitData:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise TrainConfigError(f"{len(self.images)} images but {len(self.labels)} label rows")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class TrainResult:
    params: Params
    history: list[dict]
    best_epoch: int
    best_score: float


@dataclass
class BoostingPlan:
    finetune_set: list[int]
    replace_set: list[int]
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def to_dict(self) -> dict:
        return {"finetune_set": self.finetune_set, "replace_set": self.replace_set,
                "augment": {"erase_prob": self.augment.erase_prob, "erase_max_area": self.augment.erase_max_area,
                            "jitter": self.augment.jitter}}

    @classmethod
    def from_dict(cls, raw: dict) -> "BoostingPlan":
        return cls(finetune_set=[int(k) for k in raw["finetune_set"]], replace_set=[int(k) for k in raw["replace_set"]],
                   augment=AugmentConfig(**raw.get("augment", {})))


# -- inference -----------------------------------------------------------------------

def predict_proba(params: Params, cfg: ModelConfig, images: np.ndarray, ctx: GraphContext,
                  batch_size: int = 256) -> np.ndarray:
    """Probabilities (N, K) with no tape recorded."""
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(forward(params, cfg, images[start:start + batch_size], ctx).data.copy())
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, cfg.num_labels))


def evaluate(params: Params, cfg: ModelConfig, data: SplitData, ctx: GraphContext,
             groups: Mapping[str, Sequence[int]], threshold: float = 0.5, rules=(),
             label_names: Sequence[str] | None = None) -> MetricReport:
    probabilities = predict_proba(params, cfg, data.images, ctx)
    return build_report(data.labels, probabilities, groups, threshold, rules, label_names)


# -- training loop -------------------------------------------------------------------

def _run_epochs(params: Params, model_cfg: ModelConfig, train: SplitData, val: SplitData, ctx: GraphContext,
                objective: ObjectiveConfig, cfg: TrainConfig, optimizer: OptimizerConfig, epochs: int,
                rng: np.random.Generator, augment: AugmentConfig | None, desc: str, show_progress: bool,
                score_labels: Sequence[int] | None = None) -> TrainResult:
    cfg.validate()
    if cfg.batch_size > len(train):
        raise TrainConfigError(f"batch size {cfg.batch_size} exceeds the {len(train)} training samples")
    state = init_optimizer(params, optimizer, lambda name: layer_id(name, model_cfg), num_layers(model_cfg))
    history: list[dict] = []
    best_params, best_epoch, best_score = copy_params(params), 0, -1.0

    for epoch in tqdm(range(1, epochs + 1), desc=desc, disable=not show_progress):
        order = rng.permutation(len(train))
        sums = {"loss": 0.0, "asl": 0.0, "constraint": 0.0, "prior": 0.0}
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images = train.images[idx]
            if augment is not None:
                images = augment_images(images, augment, rng)
            try:
                probs = forward(params, model_cfg, images, ctx)
                loss, parts = total_loss(probs, train.labels[idx], objective)
            except DiffError as exc:
                raise TrainingDivergedError(f"{desc}: epoch {epoch}, batch {batches}: {exc}") from exc
            if not np.isfinite(parts.total):
                raise TrainingDivergedError(f"{desc}: epoch {epoch}, batch {batches}: loss {parts.total} "
                                            f"(asl {parts.asl}, constraint {parts.constraint}, prior {parts.prior})")
            loss.backward()
            optimizer_step(params, collect_grads(params), state)
            for t in params.values():
                t.grad = None
            sums["loss"] += parts.total
            sums["asl"] += parts.asl
            sums["constraint"] += parts.constraint
            sums["prior"] += parts.prior
            batches += 1

        val_pred = binarize(predict_proba(params, model_cfg, val.images, ctx, cfg.eval_batch_size), cfg.threshold)
        scores = f1_suite(val.labels, val_pred)
        if score_labels is None:
            selection = scores["macro_f1"]
        else:
            selection = float(per_label_scores(val.labels, val_pred)["f1"].to_numpy()[list(score_labels)].mean())
        record = {"epoch": epoch, **{key: value / batches for key, value in sums.items()},
                  "val_macro_f1": scores["macro_f1"], "val_micro_f1": scores["micro_f1"],
                  "val_example_f1": scores["example_f1"], "val_selection_f1": selection}
        history.append(record)
        logger.debug("%s epoch %d: loss %.5f val macro-F1 %.4f", desc, epoch, record["loss"], record["val_macro_f1"])
        if selection > best_score:
            best_params, best_epoch, best_score = copy_params(params), epoch, selection

    logger.info("%s: best validation F1 %.4f at epoch %d", desc, best_score, best_epoch)
    return TrainResult(params=best_params, history=history, best_epoch=best_epoch, best_score=best_score)


def finetune(train: SplitData, val: SplitData, encoder: Params | None, ctx: GraphContext,
             objective: ObjectiveConfig, model_cfg: ModelConfig, cfg: TrainConfig, seed: int = 0,
             show_progress: bool = True) -> TrainResult:
    """Train the full model; `encoder` None means a randomly initialized encoder (the -P ablation)."""
    rng = np.random.default_rng(seed)
    params = init_model(model_cfg, rng, encoder)
    return _run_epochs(params, model_cfg, train, val, ctx, objective, cfg, cfg.optimizer(), cfg.epochs, rng,
                       None, "Fine-tuning", show_progress)


# -- boosting ------------------------------------------------------------------------

def select_boost_labels(per_label_f1: Sequence[float], f1_threshold: float = 0.5, replace_count: int = 5,
                        finetune_count: int | None = None, augment: AugmentConfig | None = None) -> BoostingPlan:
    """finetune_set: F1 below the threshold (or the finetune_count lowest); replace_set: the lowest replace_count."""
    f1 = np.asarray(per_label_f1, dtype=np.float64)
    ranked = sorted(range(f1.size), key=lambda k: (f1[k], k))
    if finetune_count is None:
        finetune_set = [k for k in range(f1.size) if f1[k] < f1_threshold]
    else:
        finetune_set = sorted(ranked[:finetune_count])
    replace_set = sorted(ranked[:min(replace_count, f1.size)])
    return BoostingPlan(finetune_set=finetune_set, replace_set=replace_set, augment=augment or AugmentConfig())


def augment_images(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random erasing (rectangle zeroed) plus a per-channel brightness offset."""
    out = np.array(images, dtype=np.float64, copy=True)
    B, H, W, C = out.shape
    if cfg.erase_max_area > 0.0 and cfg.erase_prob > 0.0:
        for b in np.flatnonzero(rng.random(B) < cfg.erase_prob):
            area = rng.uniform(0.0, cfg.erase_max_area) * H * W
            aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
            h = int(min(H, max(1, round(np.sqrt(area * aspect)))))
            w = int(min(W, max(1, round(np.sqrt(area / aspect)))))
            top, left = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
            out[b, top:top + h, left:left + w, :] = 0.0
    if cfg.jitter > 0.0:
        out += rng.uniform(-cfg.jitter, cfg.jitter, size=(B, 1, 1, C))
    return np.clip(out, 0.0, 1.0)


def label_mask(num_labels: int, labels: Sequence[int]) -> np.ndarray:
    mask = np.zeros(num_labels)
    mask[list(labels)] = 1.0
    return mask


def boost_finetune(base: Params, plan: BoostingPlan, train: SplitData, val: SplitData, ctx: GraphContext,
                   objective: ObjectiveConfig, model_cfg: ModelConfig, cfg: TrainConfig, boost: BoostConfig,
                   seed: int = 0, show_progress: bool = True) -> TrainResult:
    """Second model trained from the base weights with the loss restricted to plan.finetune_set."""
    if not plan.finetune_set:
        logger.warning("boosting plan has no underperforming labels; returning the base model unchanged")
        return TrainResult(params=copy_params(base), history=[], best_epoch=0, best_score=float("nan"))
    rng = np.random.default_rng([seed, 2])
    params = copy_params(base)
    masked = replace(objective, label_mask=label_mask(model_cfg.num_labels, plan.finetune_set))
    optimizer = OptimizerConfig(lr=boost.lr, weight_decay=cfg.weight_decay, layer_decay=cfg.layer_decay)
    return _run_epochs(params, model_cfg, train, val, ctx, masked, cfg, optimizer, boost.epochs, rng,
                       plan.augment, "Boosting", show_progress, score_labels=plan.finetune_set)


def merge_predictions(base: np.ndarray, second: np.ndarray, replace_set: Sequence[int]) -> np.ndarray:
    base, second = np.asarray(base), np.asarray(second)
    if base.shape != second.shape:
        raise TrainConfigError(f"prediction shapes differ: {base.shape} vs {second.shape}")
    columns = np.zeros(base.shape[1], dtype=bool)
    columns[list(replace_set)] = True
    return np.where(columns, second, base)


def per_label_f1(params: Params, cfg: ModelConfig, data: SplitData, ctx: GraphContext,
                 threshold: float = 0.5) -> np.ndarray:
    predictions = binarize(predict_proba(params, cfg, data.images, ctx), threshold)
    return per_label_scores(data.labels, predictions)["f1"].to_numpy()
