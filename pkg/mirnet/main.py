"""
main.py

Command-line entry point:

    python -m mirnet.main <verb> [--config PATH] [--seed INT] [--out DIR] [--ablate C|G|P]
                                 [--profile desk|full] [--set key.path=value] [--run NAME]

Verbs run in pipeline order: gen-data -> pretrain -> train -> boost -> eval -> report.
`run` chains all of them for one ablation setting. Exit status: 0 success,
1 usage or configuration error, 2 runtime failure.

Output layout under --out:
    data/                 manifest.json, images/*.ppm
    pretrain/             encoder.json, pretrain_log.jsonl
    runs/<name>/          model.json, graph.json, train_log.jsonl, metrics.json, per_label.csv
    runs/<name>-Boosting/ model.json, plan.json, boost_log.jsonl, metrics.json, per_label.csv
    report/               comparison.csv, f1_heatmap.csv, missed_heatmap.csv, relative_change.csv, graph_edges.csv
Every folder also gets a log.txt processing log.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from dotenv import load_dotenv

from mirnet.artifacts import require, write_csv, write_json, write_jsonl, write_log
from mirnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mirnet.config import PROFILES, ConfigError, RunConfig, ablation_flags, load_run_config
from mirnet.dataset import GeneratorError, ManifestError, generate, load_manifest, load_split_arrays
from mirnet.diffcore import DiffError
from mirnet.gat import GatError, GraphContext
from mirnet.label_graph import GraphError, LabelGraph, build_label_graph
from mirnet.losses import LossError
from mirnet.mae import MaeError, PretrainDivergedError, pretrain
from mirnet.metrics import MetricError, build_report
from mirnet.model import ModelConfig, ModelError
from mirnet.optim import OptimizerError
from mirnet.report import ReportError
from mirnet.report import build_report as build_comparison
from mirnet.train import (BoostingPlan, SplitData, TrainConfigError, TrainingDivergedError, boost_finetune,
                          finetune, merge_predictions, per_label_f1, predict_proba, select_boost_labels)

logger = logging.getLogger(__name__)

VERBS = ("gen-data", "pretrain", "train", "boost", "eval", "report", "run")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
BASE_RUN = "MIRNet"
BOOST_SUFFIX = "-Boosting"

RUNTIME_ERRORS = (DiffError, GeneratorError, ManifestError, GraphError, GatError, LossError, MaeError,
                  PretrainDivergedError, ModelError, OptimizerError, TrainingDivergedError, TrainConfigError,
                  MetricError, CheckpointError, ReportError, OSError)


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors raised as ConfigError (exit status 1 instead of 2)."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def run_name(flags: Sequence[str]) -> str:
    return BASE_RUN + (f"-{''.join(flags)}" if flags else "")


class Workspace:
    def __init__(self, root: Path):
        self.root = Path(root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def manifest(self) -> Path:
        return self.data / "manifest.json"

    @property
    def pretrain(self) -> Path:
        return self.root / "pretrain"

    @property
    def encoder(self) -> Path:
        return self.pretrain / "encoder.json"

    def run(self, name: str) -> Path:
        return self.root / "runs" / name

    @property
    def report(self) -> Path:
        return self.root / "report"


# -- shared loading ------------------------------------------------------------------

def _load_data(ws: Workspace):
    return load_manifest(require(ws.manifest, "gen-data"))


def _split(manifest, name: str) -> SplitData:
    _, images, labels = load_split_arrays(manifest, name)
    return SplitData(images, labels)


def _graph_context(graph: LabelGraph, prevalence, model_cfg: ModelConfig) -> GraphContext:
    return GraphContext.from_graph(graph, np.asarray(prevalence), model_cfg.gat)


def _load_model(ws: Workspace, name: str, producer: str = "train"):
    ckpt = load_checkpoint(require(ws.run(name) / "model.json", producer), kind="model")
    model_cfg = ModelConfig.from_dict(ckpt.config)
    graph = LabelGraph.from_dict(ckpt.extra["graph"])
    return ckpt, model_cfg, _graph_context(graph, ckpt.extra["prevalence"], model_cfg)


# -- verbs ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, ws: Workspace, flags: list[str], show_progress: bool) -> None:
    manifest = generate(cfg.generator, cfg.data.n_labeled, cfg.data.n_unlabeled, ws.data, show_progress)
    counts = {split: len(manifest.split(split)) for split in ("train", "val", "test", "pretrain-unlabeled")}
    details = [f"{name}: target {target:.4f}, train {actual:.4f}"
               for name, target, actual in zip(manifest.label_names, cfg.generator.prevalence, manifest.prevalence)]
    write_log(ws.data, "GENERATE DATA", {
        "Seed": cfg.seed,
        "Labels": manifest.num_labels,
        "Rules": len(manifest.rules),
        **{f"Split {split}": n for split, n in counts.items()},
    }, details, [ws.manifest])


def cmd_pretrain(cfg: RunConfig, ws: Workspace, flags: list[str], show_progress: bool) -> None:
    manifest = _load_data(ws)
    pool = "pretrain-unlabeled"
    if not manifest.split(pool):
        logger.warning("unlabeled pool is empty; pretraining on the train split images")
        pool = "train"
    _, images, _ = load_split_arrays(manifest, pool)
    encoder, history = pretrain(images, cfg.mae, seed=cfg.seed, show_progress=show_progress)
    written = [
        save_checkpoint(ws.encoder, "encoder", encoder, cfg.mae.architecture(),
                        extra={"seed": cfg.seed, "epochs": cfg.mae.epochs, "images": len(images)}),
        write_jsonl(ws.pretrain / "pretrain_log.jsonl", history),
    ]
    first, last = history[0]["loss"], history[-1]["loss"]
    write_log(ws.pretrain, "MAE PRETRAINING", {
        "Seed": cfg.seed,
        "Images": len(images),
        "Epochs": cfg.mae.epochs,
        "Masked MSE (epoch 0)": f"{first:.6f}",
        "Masked MSE (final)": f"{last:.6f}",
        "Ratio": f"{last / first:.4f}" if first else "n/a",
    }, written=written)


def cmd_train(cfg: RunConfig, ws: Workspace, flags: list[str], show_progress: bool) -> None:
    name = run_name(flags)
    manifest = _load_data(ws)
    if manifest.num_labels != cfg.generator.num_labels:
        raise ConfigError(f"generator.num_labels: config has {cfg.generator.num_labels} labels, "
                          f"the dataset has {manifest.num_labels}; rerun gen-data")
    encoder = None
    if "P" not in flags:
        ckpt = load_checkpoint(require(ws.encoder, "pretrain"), kind="encoder")
        if ckpt.config != cfg.mae.architecture():
            raise ConfigError("mae: the encoder checkpoint was pretrained with a different architecture; "
                              "rerun pretrain")
        encoder = ckpt.params()

    train, val = _split(manifest, "train"), _split(manifest, "val")
    rules = manifest.rules
    graph = build_label_graph(train.labels, cfg.graph.alpha, cfg.graph.resolve(rules))
    model_cfg = cfg.model_config(flags)
    ctx = _graph_context(graph, manifest.prevalence, model_cfg)
    objective = cfg.objective.build(rules, np.asarray(manifest.prevalence), disable_constraints="C" in flags)
    result = finetune(train, val, encoder, ctx, objective, model_cfg, cfg.train, seed=cfg.seed,
                      show_progress=show_progress)

    out = ws.run(name)
    written = [
        save_checkpoint(out / "model.json", "model", result.params, model_cfg.to_dict(), extra={
            "seed": cfg.seed, "run": name, "ablate": flags, "graph": graph.to_dict(),
            "prevalence": manifest.prevalence, "threshold": cfg.train.threshold,
            "best_epoch": result.best_epoch, "best_score": result.best_score,
        }),
        write_json(out / "graph.json", graph.to_dict()),
        write_jsonl(out / "train_log.jsonl", result.history),
    ]
    write_log(out, f"FINE-TUNING {name}", {
        "Seed": cfg.seed,
        "Ablations": ",".join(flags) or "none",
        "Graph edges": len(graph.edges()),
        "Epochs": cfg.train.epochs,
        "Best epoch": result.best_epoch,
        "Best val macro-F1": f"{result.best_score:.4f}",
    }, [f"epoch {r['epoch']}: loss {r['loss']:.5f} constraint {r['constraint']:.5f} "
        f"val macro-F1 {r['val_macro_f1']:.4f}" for r in result.history], written)


def cmd_boost(cfg: RunConfig, ws: Workspace, flags: list[str], show_progress: bool) -> None:
    base_name = run_name(flags)
    manifest = _load_data(ws)
    base, model_cfg, ctx = _load_model(ws, base_name)
    train, val = _split(manifest, "train"), _split(manifest, "val")
    threshold = base.extra.get("threshold", cfg.train.threshold)

    base_params = base.params()
    f1 = per_label_f1(base_params, model_cfg, val, ctx, threshold)
    plan = select_boost_labels(f1, cfg.boost.f1_threshold, cfg.boost.replace_count, cfg.boost.finetune_count,
                               cfg.boost.augment)
    objective = cfg.objective.build(manifest.rules, np.asarray(manifest.prevalence),
                                    disable_constraints="C" in flags)
    result = boost_finetune(base_params, plan, train, val, ctx, objective, model_cfg, cfg.train, cfg.boost,
                            seed=cfg.seed, show_progress=show_progress)

    name = base_name + BOOST_SUFFIX
    out = ws.run(name)
    written = [
        save_checkpoint(out / "model.json", "model", result.params, base.config, extra={
            **base.extra, "seed": cfg.seed, "run": name, "base_run": base_name, "plan": plan.to_dict(),
            "best_epoch": result.best_epoch, "best_score": result.best_score,
        }),
        write_json(out / "plan.json", {**plan.to_dict(), "base_run": base_name, "seed": cfg.seed,
                                       "val_f1": [float(v) for v in f1]}),
        write_jsonl(out / "boost_log.jsonl", result.history),
    ]
    write_log(out, f"BOOSTING {base_name}", {
        "Seed": cfg.seed,
        "Base run": base_name,
        "Fine-tune set": plan.finetune_set,
        "Replace set": plan.replace_set,
        "Epochs": cfg.boost.epochs if plan.finetune_set else 0,
    }, [f"{manifest.label_names[k]}: val F1 {v:.4f}" for k, v in enumerate(f1)], written)


def _predict_run(ws: Workspace, name: str, test: SplitData) -> tuple[np.ndarray, dict]:
    ckpt, model_cfg, ctx = _load_model(ws, name, "boost" if name.endswith(BOOST_SUFFIX) else "train")
    probabilities = predict_proba(ckpt.params(), model_cfg, test.images, ctx)
    base_run = ckpt.extra.get("base_run")
    if base_run:
        plan = BoostingPlan.from_dict(ckpt.extra["plan"])
        base, base_cfg, base_ctx = _load_model(ws, base_run)
        base_probs = predict_proba(base.params(), base_cfg, test.images, base_ctx)
        probabilities = merge_predictions(base_probs, probabilities, plan.replace_set)
    return probabilities, ckpt.extra


def cmd_eval(cfg: RunConfig, ws: Workspace, flags: list[str], show_progress: bool, runs: Sequence[str] = ()) -> None:
    manifest = _load_data(ws)
    test = _split(manifest, "test")
    for name in runs or [run_name(flags)]:
        probabilities, extra = _predict_run(ws, name, test)
        report = build_report(test.labels, probabilities, manifest.groups, extra.get("threshold", 0.5),
                              manifest.rules, manifest.label_names)
        report.extra = {"run": name, "seed": extra.get("seed", cfg.seed), "split": "test"}
        out = ws.run(name)
        written = [write_json(out / "metrics.json", report.to_dict()),
                   write_csv(out / "per_label.csv", report.per_label)]
        write_log(out, f"EVALUATION {name}", {
            "Seed": report.extra["seed"],
            "Test samples": report.num_samples,
            **{column: f"{value:.4f}" for column, value in report.scores().items()},
            "Rule violation rate": f"{report.rule_violation_rate:.4f}",
        }, [f"{dim}: missed {count}" for dim, count in report.missed_by_dimension.items()], written)
        logger.info("%s: test macro-F1 %.4f", name, report.macro_f1)


def cmd_report(cfg: RunConfig, ws: Workspace, flags: list[str], show_progress: bool, runs: Sequence[str] = ()) -> None:
    written, summary = build_comparison(ws.root / "runs", ws.report, cfg.report.reference_run, runs or None)
    write_log(ws.report, "REPORT", {"Seed": cfg.seed, **summary}, written=written)


def cmd_run(cfg: RunConfig, ws: Workspace, flags: list[str], show_progress: bool) -> None:
    cmd_gen_data(cfg, ws, flags, show_progress)
    if "P" not in flags:
        cmd_pretrain(cfg, ws, flags, show_progress)
    cmd_train(cfg, ws, flags, show_progress)
    cmd_boost(cfg, ws, flags, show_progress)
    name = run_name(flags)
    cmd_eval(cfg, ws, flags, show_progress, [name, name + BOOST_SUFFIX])
    cmd_report(cfg, ws, flags, show_progress)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "boost": cmd_boost,
    "eval": cmd_eval,
    "report": cmd_report,
    "run": cmd_run,
}


# -- argument parsing ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON run config")
    common.add_argument("--seed", type=int, default=None, help="Overrides the config seed")
    common.add_argument("--out", type=Path, default=Path(os.getenv("MIRNET_OUT_DIR", "out")),
                        help="Workspace root for every artifact")
    common.add_argument("--ablate", action="append", default=[],
                        help="C (no constraints), G (no GAT), P (no pretraining); repeatable or combined (CG)")
    common.add_argument("--profile", choices=PROFILES, default=os.getenv("MIRNET_PROFILE", "desk"))
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Config override such as train.epochs=5")
    common.add_argument("--log-level", choices=LOG_LEVELS, default=os.getenv("MIRNET_LOG_LEVEL", "INFO").upper())

    p = _Parser(prog="mirnet", description="Desk-scale MIRNet pipeline")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        verb_parser = sub.add_parser(verb, parents=[common])
        if verb in ("eval", "report"):
            verb_parser.add_argument("--run", "--runs", dest="runs", action="append", default=[],
                                     help="Run name under runs/ (repeatable)")
    return p


def run(verb: str, config: Path | None = None, overrides: Sequence[str] = (), *, seed: int | None = None,
        out: Path = Path("out"), ablate: Sequence[str] = (), profile: str = "desk",
        runs: Sequence[str] = (), show_progress: bool = True) -> int:
    """Run one verb; returns the process exit status."""
    try:
        if verb not in COMMANDS:
            raise ConfigError(f"unknown verb '{verb}', expected one of {VERBS}")
        flags = ablation_flags(ablate)
        cfg = load_run_config(config, profile, overrides, seed)
        ws = Workspace(out)
        if verb in ("eval", "report"):
            COMMANDS[verb](cfg, ws, flags, show_progress, runs)
        else:
            COMMANDS[verb](cfg, ws, flags, show_progress)
    except ConfigError as exc:
        print(f"{verb}: configuration error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"{verb}: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    show_progress = logging.getLogger().getEffectiveLevel() <= logging.INFO
    return run(args.verb, args.config, args.overrides, seed=args.seed, out=args.out, ablate=args.ablate,
               profile=args.profile, runs=getattr(args, "runs", []), show_progress=show_progress)


if __name__ == "__main__":
    sys.exit(main())
