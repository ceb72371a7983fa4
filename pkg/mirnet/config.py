"""
config.py

RunConfig: the dataclass tree every verb reads, loaded strictly from JSON.

Precedence, lowest first: dataclass defaults (desk scale) -> --profile preset ->
config file -> --set key.path=value overrides -> --seed.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from mirnet.dataset import FULL_GROUPS, FULL_PREVALENCE, GeneratorConfig, check_feasible
from mirnet.gat import GatConfig
from mirnet.label_graph import GraphConfig
from mirnet.losses import ConstraintRule, LossError, ObjectiveSettings, load_rules
from mirnet.mae import MaeConfig
from mirnet.model import ModelConfig
from mirnet.train import ABLATIONS, BoostConfig, TrainConfig

PROFILES = ("desk", "full")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_labeled: int = 1000
    n_unlabeled: int = 2000


@dataclass
class ModelSection:
    node_dim: int = 32
    head_hidden: int = 64
    gat: GatConfig = field(default_factory=GatConfig)


@dataclass
class ReportConfig:
    reference_run: str = "MIRNet"


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    mae: MaeConfig = field(default_factory=MaeConfig)
    model: ModelSection = field(default_factory=ModelSection)
    graph: GraphConfig = field(default_factory=GraphConfig)
    objective: ObjectiveSettings = field(default_factory=ObjectiveSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    boost: BoostConfig = field(default_factory=BoostConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    @property
    def rules(self) -> list[ConstraintRule]:
        return list(self.generator.rules)

    def model_config(self, ablate: typing.Iterable[str] = ()) -> ModelConfig:
        return ModelConfig(num_labels=self.generator.num_labels, node_dim=self.model.node_dim,
                           head_hidden=self.model.head_hidden, use_gat="G" not in set(ablate),
                           encoder=self.mae, gat=self.model.gat)

    def to_dict(self) -> dict:
        return _plain(self)


FULL_PROFILE: dict[str, Any] = {
    "data": {"n_labeled": 4000, "n_unlabeled": 15905},
    "generator": {"num_labels": 22, "height": 224, "width": 224, "patch_size": 16,
                  "prevalence": FULL_PREVALENCE, "groups": FULL_GROUPS},
    "mae": {"image_size": 224, "patch_size": 16, "embed_dim": 768, "depth": 12, "num_heads": 12,
            "decoder_embed_dim": 512, "decoder_depth": 4, "decoder_num_heads": 16, "epochs": 400,
            "batch_size": 256},
    "model": {"node_dim": 768, "head_hidden": 640, "gat": {"num_heads": 8, "hidden_dim": 96}},
    "train": {"epochs": 200, "batch_size": 200},
}


# -- plain-data conversion -----------------------------------------------------------

def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# -- strict typed loading ------------------------------------------------------------

def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _type_name(tp: Any) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _coerce(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if tp is Any:
        return value
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in typing.get_args(tp):
            return None
        errors = []
        for option in typing.get_args(tp):
            if option is type(None):
                continue
            try:
                return _coerce(option, value, path)
            except ConfigError as exc:
                errors.append(str(exc))
        deeper = [message for message in errors if not message.startswith(f"{path}: ")]
        if deeper:
            raise ConfigError(deeper[0])
        raise ConfigError(f"{path}: expected {' or '.join(_type_name(o) for o in typing.get_args(tp))}, "
                          f"got {type(value).__name__}")
    if origin is list:
        (item,) = typing.get_args(tp) or (Any,)
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_coerce(item, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        _, item = typing.get_args(tp) or (str, Any)
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
        return {k: _coerce(item, v, _join(path, str(k))) for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {type(value).__name__}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {type(value).__name__}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected float, got {type(value).__name__}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected str, got {type(value).__name__}")
        return value
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError:
            raise ConfigError(f"{path}: expected one of {[m.value for m in tp]}, got {value!r}") from None
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    raise ConfigError(f"{path}: unsupported field type {_type_name(tp)}")


def _build(cls: type, raw: Any, path: str) -> Any:
    """New instance of dataclass `cls` from `raw`; missing optional fields keep their defaults."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{_join(path, unknown[0])}: unknown key")
    missing = [name for name, f in known.items() if name not in raw and f.default is dataclasses.MISSING
               and f.default_factory is dataclasses.MISSING]
    if missing:
        raise ConfigError(f"{_join(path, missing[0])}: required key is missing")
    kwargs = {key: _coerce(hints[key], value, _join(path, key)) for key, value in raw.items()}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def _apply(instance: Any, overlay: dict, path: str) -> Any:
    """Overlay a raw dict onto an existing dataclass instance, recursing into nested dataclasses."""
    if not isinstance(overlay, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(overlay).__name__}")
    cls = type(instance)
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    for key, value in overlay.items():
        where = _join(path, key)
        if key not in known:
            raise ConfigError(f"{where}: unknown key")
        current = getattr(instance, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _apply(current, value, where)
        else:
            setattr(instance, key, _coerce(hints[key], value, where))
    return instance


def deep_merge(base: dict, overlay: dict) -> dict:
    out = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_override(expression: str) -> dict:
    """'train.epochs=5' -> {"train": {"epochs": 5}}; values parse as JSON, else as plain strings."""
    key, sep, text = expression.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override '{expression}' must look like key.path=value")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    out: dict = value
    for part in reversed(key.strip().split(".")):
        out = {part: out}
    return out


def read_config_file(path: Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


def _resolve_rules(cfg: RunConfig, base_dir: Path) -> None:
    rules = cfg.generator.rules
    if isinstance(rules, str):
        rules_path = (base_dir / rules).resolve()
        try:
            cfg.generator.rules = load_rules(rules_path)
        except FileNotFoundError:
            raise ConfigError(f"generator.rules: rules file {rules_path} does not exist") from None
        except (LossError, json.JSONDecodeError) as exc:
            raise ConfigError(f"generator.rules: {exc}") from exc


def validate(cfg: RunConfig) -> None:
    gen, mae = cfg.generator, cfg.mae
    if gen.height != gen.width or gen.height != mae.image_size:
        raise ConfigError(f"mae.image_size: {mae.image_size} must match square generator images "
                          f"{gen.height}x{gen.width}")
    if gen.patch_size != mae.patch_size:
        raise ConfigError(f"mae.patch_size: {mae.patch_size} differs from generator.patch_size {gen.patch_size}")
    if cfg.data.n_labeled < 1 or cfg.data.n_unlabeled < 0:
        raise ConfigError("data: sample counts must be non-negative and n_labeled positive")
    try:
        mae.validate()
        cfg.model.gat.validate()
        cfg.train.validate()
        check_feasible(gen, cfg.data.n_labeled)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for rule in gen.rules:
        try:
            rule.validate(gen.num_labels)
        except LossError as exc:
            raise ConfigError(f"generator.rules: {exc}") from exc


def load_run_config(path: Path | None = None, profile: str = "desk", overrides: typing.Sequence[str] = (),
                    seed: int | None = None) -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile '{profile}', expected one of {PROFILES}")
    overlay: dict = FULL_PROFILE if profile == "full" else {}
    base_dir = Path.cwd()
    if path is not None:
        overlay = deep_merge(overlay, read_config_file(path))
        base_dir = Path(path).resolve().parent
    for expression in overrides:
        overlay = deep_merge(overlay, parse_override(expression))
    if seed is not None:
        overlay = deep_merge(overlay, {"seed": seed})

    cfg = _apply(RunConfig(), overlay, "")
    _resolve_rules(cfg, base_dir)
    cfg.generator.seed = cfg.seed
    validate(cfg)
    return cfg


def ablation_flags(values: typing.Iterable[str]) -> list[str]:
    flags = []
    for value in values:
        for flag in value.upper().replace(",", ""):
            if flag not in ABLATIONS:
                raise ConfigError(f"unknown ablation '{flag}', expected one of {ABLATIONS}")
            if flag not in flags:
                flags.append(flag)
    return sorted(flags)
