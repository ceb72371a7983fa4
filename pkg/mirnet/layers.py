"""
layers.py

Parameter initialisers and the transformer building blocks shared by the MAE
encoder/decoder and the fine-tuning model. Parameters live in a flat
`Params` dict keyed by dotted names ("encoder.blocks.0.attn.q.weight"); every
forward function takes the dict plus the name prefix of its block.
"""

from __future__ import annotations

import math

import numpy as np

from mirnet.diffcore import Tensor, relu, softmax

Params = dict[str, Tensor]

LAYER_NORM_EPS = 1e-6


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def init_linear(params: Params, prefix: str, rng: np.random.Generator, fan_in: int, fan_out: int,
                bias: bool = True, gain: float = 1.0) -> None:
    params[f"{prefix}.weight"] = param(xavier_uniform(rng, fan_in, fan_out, gain))
    if bias:
        params[f"{prefix}.bias"] = param(np.zeros(fan_out))


def linear(params: Params, prefix: str, x: Tensor) -> Tensor:
    out = x @ params[f"{prefix}.weight"]
    bias = params.get(f"{prefix}.bias")
    return out if bias is None else out + bias


def init_layer_norm(params: Params, prefix: str, dim: int) -> None:
    params[f"{prefix}.gamma"] = param(np.ones(dim))
    params[f"{prefix}.beta"] = param(np.zeros(dim))


def layer_norm(params: Params, prefix: str, x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered * (variance + eps) ** -0.5
    return normed * params[f"{prefix}.gamma"] + params[f"{prefix}.beta"]


def init_attention(params: Params, prefix: str, rng: np.random.Generator, dim: int, qkv_bias: bool = True) -> None:
    # key bias omitted: softmax is invariant to it
    init_linear(params, f"{prefix}.q", rng, dim, dim, bias=qkv_bias)
    init_linear(params, f"{prefix}.k", rng, dim, dim, bias=False)
    init_linear(params, f"{prefix}.v", rng, dim, dim, bias=qkv_bias)
    init_linear(params, f"{prefix}.proj", rng, dim, dim)


def self_attention(params: Params, prefix: str, x: Tensor, num_heads: int) -> Tensor:
    batch, tokens, dim = x.shape
    head_dim = dim // num_heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, tokens, num_heads, head_dim).transpose(0, 2, 1, 3)

    q = split(linear(params, f"{prefix}.q", x))
    k = split(linear(params, f"{prefix}.k", x))
    v = split(linear(params, f"{prefix}.v", x))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    attended = softmax(scores, axis=-1) @ v
    merged = attended.transpose(0, 2, 1, 3).reshape(batch, tokens, dim)
    return linear(params, f"{prefix}.proj", merged)


def init_block(params: Params, prefix: str, rng: np.random.Generator, dim: int, mlp_ratio: float,
               qkv_bias: bool = True) -> None:
    hidden = int(dim * mlp_ratio)
    init_layer_norm(params, f"{prefix}.norm1", dim)
    init_attention(params, f"{prefix}.attn", rng, dim, qkv_bias)
    init_layer_norm(params, f"{prefix}.norm2", dim)
    init_linear(params, f"{prefix}.mlp.fc1", rng, dim, hidden)
    init_linear(params, f"{prefix}.mlp.fc2", rng, hidden, dim)


def block(params: Params, prefix: str, x: Tensor, num_heads: int, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""
    x = x + self_attention(params, f"{prefix}.attn", layer_norm(params, f"{prefix}.norm1", x, eps), num_heads)
    hidden = relu(linear(params, f"{prefix}.mlp.fc1", layer_norm(params, f"{prefix}.norm2", x, eps)))
    return x + linear(params, f"{prefix}.mlp.fc2", hidden)


def sincos_pos_embed_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(positions.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed_2d(dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Fixed 2-D sine-cosine table of shape (grid_h * grid_w, dim), row-major patches."""
    if dim % 4 != 0:
        raise ValueError(f"positional embedding dim must be divisible by 4, got {dim}")
    rows, cols = np.meshgrid(np.arange(grid_h, dtype=np.float64), np.arange(grid_w, dtype=np.float64), indexing="ij")
    emb_rows = sincos_pos_embed_1d(dim // 2, rows)
    emb_cols = sincos_pos_embed_1d(dim // 2, cols)
    return np.concatenate([emb_rows, emb_cols], axis=1)


def copy_params(params: Params) -> Params:
    return {name: param(t.data.copy()) for name, t in params.items()}


def zero_grads(params: Params) -> None:
    for t in params.values():
        t.grad = None
