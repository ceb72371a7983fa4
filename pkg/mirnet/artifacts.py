"""
artifacts.py

Atomic file writers and the plain-text processing log every verb leaves in its
output folder.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable

import pandas as pd


class MissingArtifactError(FileNotFoundError):
    """An upstream artifact is absent; the message names the verb that makes it."""

    def __init__(self, path: Path, verb: str):
        super().__init__(f"missing {path}; run `{verb}` first")
        self.path = path
        self.verb = verb


def require(path: Path, verb: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(Path(path), verb)
    return Path(path)


def atomic_write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dumps_json(payload: Any, indent: int | None = 2) -> str:
    return json.dumps(payload, indent=indent, sort_keys=True, ensure_ascii=False) + "\n"


def write_json(path: Path, payload: Any, indent: int | None = 2) -> Path:
    return atomic_write_text(path, dumps_json(payload, indent))


def read_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_jsonl(path: Path, records: Iterable[dict]) -> Path:
    frame = pd.DataFrame(list(records))
    text = frame.to_json(orient="records", lines=True, double_precision=15) if len(frame) else ""
    if text and not text.endswith("\n"):
        text += "\n"
    return atomic_write_text(path, text)


def write_csv(path: Path, frame: pd.DataFrame, index: bool = False) -> Path:
    return atomic_write_text(path, frame.to_csv(index=index, lineterminator="\n"))


def write_log(out_dir: Path, title: str, summary: dict[str, Any], details: list[str] | None = None,
              written: Iterable[Path] = ()) -> Path:
    """PROCESSING LOG layout: title, SUMMARY block, DETAILS block, written files."""
    width = max((len(k) for k in summary), default=0) + 2
    lines = [f"PROCESSING LOG - {title}", "", "SUMMARY"]
    lines += [f"{(key + ':').ljust(width)} {value}" for key, value in summary.items()]
    lines += ["", "DETAILS"]
    lines += details or ["(none)"]
    lines.append("")
    lines += [f"Written: {path}" for path in written]
    log_file = Path(out_dir) / "log.txt"
    atomic_write_text(log_file, "\n".join(lines) + "\n")
    return log_file
