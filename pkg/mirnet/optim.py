"""
optim.py

AdamW with bias correction and decoupled weight decay, plus layer-wise
learning-rate decay: a parameter at layer id l of a stack with top id L gets
lr * layer_decay ** (L - l).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mirnet.layers import Params

logger = logging.getLogger(__name__)


class OptimizerError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    layer_decay: float = 0.75

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise OptimizerError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise OptimizerError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.weight_decay < 0:
            raise OptimizerError(f"weight decay must be non-negative, got {self.weight_decay}")
        if not 0.0 < self.layer_decay <= 1.0:
            raise OptimizerError(f"layer_decay must lie in (0, 1], got {self.layer_decay}")


@dataclass
class OptimizerState:
    config: OptimizerConfig
    multipliers: dict[str, float]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def lr_for(self, name: str) -> float:
        return self.config.lr * self.multipliers.get(name, 1.0)


def layer_multipliers(names: list[str], layer_of: Callable[[str], int] | None, num_layers: int,
                      layer_decay: float) -> dict[str, float]:
    """decay ** (num_layers - layer id); the top layer (id num_layers) keeps the base lr."""
    if layer_of is None:
        return {name: 1.0 for name in names}
    out = {}
    for name in names:
        layer = layer_of(name)
        if not 0 <= layer <= num_layers:
            raise OptimizerError(f"parameter '{name}' maps to layer {layer}, outside [0, {num_layers}]")
        out[name] = layer_decay ** (num_layers - layer)
    return out


def init_optimizer(params: Params, config: OptimizerConfig, layer_of: Callable[[str], int] | None = None,
                   num_layers: int = 0) -> OptimizerState:
    state = OptimizerState(config=config,
                           multipliers=layer_multipliers(sorted(params), layer_of, num_layers, config.layer_decay))
    for name, t in params.items():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def optimizer_step(params: Params, grads: dict[str, np.ndarray | None], state: OptimizerState) -> Params:
    """One in-place AdamW update; parameters without a gradient see a zero gradient."""
    cfg = state.config
    state.step += 1
    correction1 = 1.0 - cfg.beta1 ** state.step
    correction2 = 1.0 - cfg.beta2 ** state.step
    for name in sorted(params):
        t = params[name]
        grad = grads.get(name)
        grad = np.zeros_like(t.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != t.shape:
            raise OptimizerError(f"gradient for '{name}' has shape {grad.shape}, parameter has {t.shape}")
        if np.isnan(grad).any():
            raise OptimizerError(f"NaN gradient for parameter '{name}'")
        if name not in state.m:
            raise OptimizerError(f"parameter '{name}' is not registered with the optimizer")

        lr = state.lr_for(name)
        if cfg.weight_decay:
            t.data *= 1.0 - lr * cfg.weight_decay
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * grad * grad
        t.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
    return params


def collect_grads(params: Params) -> dict[str, np.ndarray | None]:
    return {name: t.grad for name, t in params.items()}
