"""
model.py

Fine-tuning model: MAE encoder -> mean-pooled z -> label nodes -> GAT stack -> head.

Parameter groups: "encoder.*" (shared names with the pretraining checkpoint),
"nodes.*", "gat.*", "head.*". With use_gat False (the -G ablation) the GAT
stack is replaced by the identity and the head sees [v^(0) || v^(0)].
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from mirnet.diffcore import Tensor
from mirnet.gat import GatConfig, GraphContext, gat_forward, init_gat, init_head, init_node_params, init_nodes, predict
from mirnet.layers import Params
from mirnet.mae import MaeConfig, encode_image, init_encoder

logger = logging.getLogger(__name__)

_BLOCK = re.compile(r"^encoder\.blocks\.(\d+)\.")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_labels: int = 8
    node_dim: int = 32
    head_hidden: int = 64
    use_gat: bool = True
    encoder: MaeConfig = field(default_factory=MaeConfig)
    gat: GatConfig = field(default_factory=GatConfig)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["encoder"] = self.encoder.architecture()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return cls(num_labels=int(raw["num_labels"]), node_dim=int(raw["node_dim"]),
                   head_hidden=int(raw["head_hidden"]), use_gat=bool(raw["use_gat"]),
                   encoder=MaeConfig(**raw["encoder"]), gat=GatConfig(**raw["gat"]))


def init_model(cfg: ModelConfig, rng: np.random.Generator, encoder: Params | None = None) -> Params:
    """Fresh parameters; a pretrained encoder replaces the random encoder weights by name."""
    if cfg.num_labels < 1:
        raise ModelError("the model needs at least one label")
    params: Params = {}
    init_encoder(params, cfg.encoder, rng)
    if encoder is not None:
        load_encoder(params, encoder)
    init_node_params(params, "nodes", rng, cfg.encoder.embed_dim, cfg.node_dim, cfg.num_labels)
    if cfg.use_gat:
        init_gat(params, "gat", rng, cfg.node_dim, cfg.gat)
    init_head(params, "head", rng, cfg.node_dim, cfg.head_hidden, cfg.num_labels)
    return params


def load_encoder(params: Params, encoder: Params) -> None:
    expected = {name for name in params if name.startswith("encoder.")}
    if set(encoder) != expected:
        missing = sorted(expected - set(encoder))[:3]
        extra = sorted(set(encoder) - expected)[:3]
        raise ModelError(f"pretrained encoder does not match the architecture (missing {missing}, unexpected {extra})")
    for name, t in encoder.items():
        if t.shape != params[name].shape:
            raise ModelError(f"pretrained '{name}' has shape {t.shape}, model expects {params[name].shape}")
        params[name].data = t.data.copy()


def forward(params: Params, cfg: ModelConfig, images: np.ndarray, ctx: GraphContext) -> Tensor:
    """Label probabilities (B, K)."""
    if ctx.num_labels != cfg.num_labels:
        raise ModelError(f"graph has {ctx.num_labels} labels, model has {cfg.num_labels}")
    z = encode_image(params, cfg.encoder, images)
    V0 = init_nodes(params, "nodes", z)
    VL = gat_forward(params, "gat", V0, ctx, cfg.gat) if cfg.use_gat else V0
    return predict(params, "head", V0, VL)


def num_layers(cfg: ModelConfig) -> int:
    return cfg.encoder.depth + 1


def layer_id(name: str, cfg: ModelConfig) -> int:
    """patch_embed -> 0, encoder block i -> i + 1, everything above the blocks -> depth + 1."""
    if name.startswith("encoder.patch_embed."):
        return 0
    match = _BLOCK.match(name)
    if match:
        return int(match.group(1)) + 1
    return num_layers(cfg)
