"""
gat.py

Graph-attention decoder over the label graph.

- init_nodes: v_k^(0) = proj(z) + e_k (shared projection, learned per-label offsets)
- attention: e_ij = LeakyReLU(a^T [W v_i || W v_j]), softmax over N(i) (self-loops
  included). The "v2" variant scores a^T LeakyReLU(W v_i + W v_j).
- rare-label boost: row k of alpha scaled by 1 + log(1 / max(pi_k, 1e-4))
- confidence weighting: alpha_ij * M_ij / max M, self-loops at 1
- update: ReLU(sum_j alpha~_ij W v_j); hidden layers concatenate heads, the
  last layer averages them. alpha~ is not renormalized.
- head: sigmoid(MLP([v^(0) || v^(L)]) + b_k)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from mirnet.diffcore import DEFAULT_NEGATIVE_SLOPE, Tensor, concat, leaky_relu, relu, sigmoid, softmax
from mirnet.label_graph import LabelGraph
from mirnet.layers import Params, init_linear, linear, param, xavier_uniform

logger = logging.getLogger(__name__)

PREVALENCE_FLOOR = 1e-4
VARIANTS = ("v1", "v2")


class GatError(ValueError):
    pass


@dataclass
class GatConfig:
    num_layers: int = 2
    num_heads: int = 8
    hidden_dim: int = 4
    negative_slope: float = DEFAULT_NEGATIVE_SLOPE
    variant: str = "v1"
    rare_boost: bool = True
    confidence_weighting: bool = True

    def validate(self) -> None:
        if self.num_layers < 1 or self.num_heads < 1 or self.hidden_dim < 1:
            raise GatError("GAT layers, heads and hidden width must be positive")
        if self.variant not in VARIANTS:
            raise GatError(f"unknown attention variant '{self.variant}', expected one of {VARIANTS}")


def add_self_loops(adjacency: np.ndarray) -> np.ndarray:
    out = np.array(adjacency, dtype=bool, copy=True)
    np.fill_diagonal(out, True)
    return out


def rare_boost_factors(prevalence: np.ndarray) -> np.ndarray:
    """1 + log(1 / pi_k) with pi_k clamped to at least 1e-4."""
    pi = np.clip(np.asarray(prevalence, dtype=np.float64), PREVALENCE_FLOOR, 1.0)
    return 1.0 + np.log(1.0 / pi)


@dataclass(frozen=True)
class GraphContext:
    """Frozen per-run graph inputs shared by every GAT layer."""

    adjacency: np.ndarray
    boost: np.ndarray
    confidence: np.ndarray

    @property
    def num_labels(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def build(cls, adjacency: np.ndarray, prevalence: np.ndarray, confidence: np.ndarray | None = None,
              rare_boost: bool = True, confidence_weighting: bool = True) -> "GraphContext":
        K = adjacency.shape[0]
        looped = add_self_loops(adjacency)
        boost = rare_boost_factors(prevalence) if rare_boost else np.ones(K)
        if confidence_weighting and confidence is not None:
            weights = np.where(looped, np.asarray(confidence, dtype=np.float64), 0.0)
            np.fill_diagonal(weights, 1.0)
        else:
            weights = looped.astype(np.float64)
        return cls(adjacency=looped, boost=boost, confidence=weights)

    @classmethod
    def from_graph(cls, graph: LabelGraph, prevalence: np.ndarray, cfg: GatConfig) -> "GraphContext":
        return cls.build(graph.adjacency, prevalence, graph.confidence, cfg.rare_boost, cfg.confidence_weighting)


# -- nodes ---------------------------------------------------------------------------

def init_node_params(params: Params, prefix: str, rng: np.random.Generator, embed_dim: int, node_dim: int,
                     num_labels: int) -> None:
    init_linear(params, f"{prefix}.proj", rng, embed_dim, node_dim)
    params[f"{prefix}.label_embed"] = param(rng.normal(0.0, 0.02, size=(num_labels, node_dim)))


def init_nodes(params: Params, prefix: str, z: Tensor) -> Tensor:
    """(B, D) image embedding -> (B, K, d) layer-0 node features."""
    projected = linear(params, f"{prefix}.proj", z)
    batch, dim = projected.shape
    return projected.reshape(batch, 1, dim) + params[f"{prefix}.label_embed"]


# -- attention layer -----------------------------------------------------------------

def init_gat_layer(params: Params, prefix: str, rng: np.random.Generator, in_dim: int, out_dim: int,
                   num_heads: int, variant: str = "v1") -> None:
    params[f"{prefix}.weight"] = param(xavier_uniform(rng, in_dim, num_heads * out_dim))
    width = 2 * out_dim if variant == "v1" else out_dim
    bound = math.sqrt(6.0 / (width + 1))
    params[f"{prefix}.att"] = param(rng.uniform(-bound, bound, size=(num_heads, width)))


def _project(params: Params, prefix: str, V: Tensor, num_heads: int) -> Tensor:
    batch, K, _ = V.shape
    projected = V @ params[f"{prefix}.weight"]
    head_dim = projected.shape[-1] // num_heads
    return projected.reshape(batch, K, num_heads, head_dim).transpose(0, 2, 1, 3)


def attention(params: Params, prefix: str, V: Tensor, adjacency: np.ndarray, num_heads: int,
              variant: str = "v1", negative_slope: float = DEFAULT_NEGATIVE_SLOPE) -> tuple[Tensor, Tensor]:
    """Softmax attention (B, H, K, K) restricted to the adjacency, and the projected features (B, H, K, dh)."""
    adjacency = np.asarray(adjacency, dtype=bool)
    isolated = ~adjacency.any(axis=1)
    if isolated.any():
        raise GatError(f"labels {np.flatnonzero(isolated).tolist()} have no neighbor; add self-loops first")
    g = _project(params, prefix, V, num_heads)
    batch, heads, K, head_dim = g.shape
    a = params[f"{prefix}.att"]
    if variant == "v1":
        a_src = a[:, :head_dim].reshape(1, heads, 1, head_dim)
        a_dst = a[:, head_dim:].reshape(1, heads, 1, head_dim)
        s_src = (g * a_src).sum(axis=-1).reshape(batch, heads, K, 1)
        s_dst = (g * a_dst).sum(axis=-1).reshape(batch, heads, 1, K)
        scores = leaky_relu(s_src + s_dst, negative_slope)
    elif variant == "v2":
        pair = g.reshape(batch, heads, K, 1, head_dim) + g.reshape(batch, heads, 1, K, head_dim)
        scores = (leaky_relu(pair, negative_slope) * a.reshape(1, heads, 1, 1, head_dim)).sum(axis=-1)
    else:
        raise GatError(f"unknown attention variant '{variant}'")
    return softmax(scores, axis=-1, mask=adjacency), g


def scale_rows(alpha: Tensor, factors: np.ndarray) -> Tensor:
    """alpha_kj * factors_k: outgoing attention of label k scaled, rows not renormalized."""
    return alpha * np.asarray(factors, dtype=np.float64).reshape(-1, 1)


def rare_label_boost(alpha: Tensor, prevalence: np.ndarray) -> Tensor:
    return scale_rows(alpha, rare_boost_factors(prevalence))


def confidence_weight(alpha: Tensor, confidence: np.ndarray) -> Tensor:
    return alpha * np.asarray(confidence, dtype=np.float64)


def gat_layer(params: Params, prefix: str, V: Tensor, ctx: GraphContext, num_heads: int, last: bool,
              variant: str = "v1", negative_slope: float = DEFAULT_NEGATIVE_SLOPE) -> Tensor:
    alpha, g = attention(params, prefix, V, ctx.adjacency, num_heads, variant, negative_slope)
    alpha = confidence_weight(scale_rows(alpha, ctx.boost), ctx.confidence)
    aggregated = alpha @ g
    batch, heads, K, head_dim = aggregated.shape
    if last:
        merged = aggregated.mean(axis=1)
    else:
        merged = aggregated.transpose(0, 2, 1, 3).reshape(batch, K, heads * head_dim)
    return relu(merged)


# -- stack and head ------------------------------------------------------------------

def init_gat(params: Params, prefix: str, rng: np.random.Generator, node_dim: int, cfg: GatConfig) -> None:
    cfg.validate()
    in_dim = node_dim
    for layer in range(cfg.num_layers):
        last = layer == cfg.num_layers - 1
        out_dim = node_dim if last else cfg.hidden_dim
        init_gat_layer(params, f"{prefix}.layers.{layer}", rng, in_dim, out_dim, cfg.num_heads, cfg.variant)
        in_dim = cfg.num_heads * cfg.hidden_dim


def gat_forward(params: Params, prefix: str, V0: Tensor, ctx: GraphContext, cfg: GatConfig) -> Tensor:
    V = V0
    for layer in range(cfg.num_layers):
        V = gat_layer(params, f"{prefix}.layers.{layer}", V, ctx, cfg.num_heads,
                      last=layer == cfg.num_layers - 1, variant=cfg.variant, negative_slope=cfg.negative_slope)
    return V


def init_head(params: Params, prefix: str, rng: np.random.Generator, node_dim: int, hidden: int,
              num_labels: int) -> None:
    init_linear(params, f"{prefix}.fc1", rng, 2 * node_dim, hidden)
    init_linear(params, f"{prefix}.fc2", rng, hidden, 1, bias=False)
    params[f"{prefix}.bias"] = param(np.zeros(num_labels))


def predict(params: Params, prefix: str, V0: Tensor, VL: Tensor) -> Tensor:
    """y_k = sigmoid(MLP([v_k^(0) || v_k^(L)]) + b_k), shape (B, K)."""
    if V0.shape != VL.shape:
        raise GatError(f"node features disagree: {V0.shape} vs {VL.shape}")
    batch, K, _ = V0.shape
    hidden = relu(linear(params, f"{prefix}.fc1", concat([V0, VL], axis=-1)))
    logits = linear(params, f"{prefix}.fc2", hidden).reshape(batch, K) + params[f"{prefix}.bias"]
    return sigmoid(logits)
