"""
report.py

Joins the metric reports of several runs into comparison tables and heatmap
matrices (CSV only, no plotting).

- comparison.csv: one row per run, the six headline scores
- f1_heatmap.csv: runs x labels, per-label F1
- missed_heatmap.csv: runs x dimension groups, missed-detection counts
- relative_change.csv: every score relative to the reference run
- graph_edges.csv: label-graph edge list of the reference run
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from mirnet.artifacts import MissingArtifactError, read_json, write_csv
from mirnet.metrics import SCORE_COLUMNS

logger = logging.getLogger(__name__)


class ReportError(ValueError):
    pass


def discover_runs(runs_dir: Path) -> list[str]:
    runs_dir = Path(runs_dir)
    if not runs_dir.is_dir():
        return []
    return sorted(p.name for p in runs_dir.iterdir() if (p / "metrics.json").exists())


def load_run_metrics(runs_dir: Path, runs: Sequence[str] | None = None) -> dict[str, dict]:
    names = list(runs) if runs else discover_runs(runs_dir)
    if not names:
        raise MissingArtifactError(Path(runs_dir) / "<run>" / "metrics.json", "eval")
    out = {}
    for name in names:
        path = Path(runs_dir) / name / "metrics.json"
        if not path.exists():
            raise MissingArtifactError(path, "eval")
        out[name] = read_json(path)
    return out


def comparison_table(metrics: dict[str, dict]) -> pd.DataFrame:
    rows = [{"run": name, **{col: report[col] for col in SCORE_COLUMNS}} for name, report in metrics.items()]
    return pd.DataFrame(rows, columns=["run", *SCORE_COLUMNS]).set_index("run")


def f1_heatmap(metrics: dict[str, dict]) -> pd.DataFrame:
    long_df = pd.DataFrame([{"run": name, "label": row["label"], "f1": row["f1"]}
                            for name, report in metrics.items() for row in report["per_label"]])
    label_order = list(dict.fromkeys(long_df["label"]))
    matrix = long_df.groupby(["run", "label"])["f1"].sum().unstack(fill_value=0)
    return matrix.reindex(index=list(metrics), columns=label_order)


def missed_heatmap(metrics: dict[str, dict]) -> pd.DataFrame:
    long_df = pd.DataFrame([{"run": name, "dimension": dim, "missed": count}
                            for name, report in metrics.items()
                            for dim, count in report["missed_by_dimension"].items()])
    dim_order = list(dict.fromkeys(long_df["dimension"]))
    matrix = long_df.groupby(["run", "dimension"])["missed"].sum().unstack(fill_value=0)
    return matrix.reindex(index=list(metrics), columns=dim_order)


def relative_change(comparison: pd.DataFrame, reference: str) -> pd.DataFrame:
    """(score - reference score) / reference score; a zero reference score gives nan."""
    if reference not in comparison.index:
        raise ReportError(f"reference run '{reference}' is not among {list(comparison.index)}")
    base = comparison.loc[reference].replace(0.0, np.nan)
    return comparison.sub(base, axis=1).div(base, axis=1)


def graph_edges(graph: dict, label_names: Sequence[str]) -> pd.DataFrame:
    enhanced = {(min(a["i"], a["j"]), max(a["i"], a["j"]))
                for a in graph.get("adjustments", []) if a["action"] == "enhance"}
    rows = []
    for edge in graph["edges"]:
        i, j = edge["i"], edge["j"]
        rows.append({"i": i, "j": j, "label_i": label_names[i], "label_j": label_names[j],
                     "count": edge["count"], "confidence": edge["confidence"],
                     "enhanced": (min(i, j), max(i, j)) in enhanced})
    return pd.DataFrame(rows, columns=["i", "j", "label_i", "label_j", "count", "confidence", "enhanced"])


def build_report(runs_dir: Path, out_dir: Path, reference: str = "MIRNet",
                 runs: Sequence[str] | None = None) -> tuple[list[Path], dict]:
    """Write every report table; returns (written paths, summary for the processing log)."""
    runs_dir, out_dir = Path(runs_dir), Path(out_dir)
    metrics = load_run_metrics(runs_dir, runs)
    comparison = comparison_table(metrics)
    written = [
        write_csv(out_dir / "comparison.csv", comparison, index=True),
        write_csv(out_dir / "f1_heatmap.csv", f1_heatmap(metrics), index=True),
        write_csv(out_dir / "missed_heatmap.csv", missed_heatmap(metrics), index=True),
    ]
    summary = {"Runs": len(metrics), "Reference run": reference}
    if reference in metrics:
        written.append(write_csv(out_dir / "relative_change.csv", relative_change(comparison, reference), index=True))
        graph_path = runs_dir / reference / "graph.json"
        if graph_path.exists():
            label_names = [row["label"] for row in metrics[reference]["per_label"]]
            edges = graph_edges(read_json(graph_path), label_names)
            written.append(write_csv(out_dir / "graph_edges.csv", edges))
            summary["Graph edges"] = len(edges)
    else:
        logger.warning("reference run '%s' has no metrics; skipping relative changes and graph edges", reference)
    logger.info("report over %d run(s) written to %s", len(metrics), out_dir)
    return written, summary
