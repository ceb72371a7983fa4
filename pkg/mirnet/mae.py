"""
mae.py

Masked-autoencoder pretraining on unlabeled images.

1. patchify: non-overlapping P x P patches, row-major, channel-last flattening
2. sample_mask: uniformly random visible subset of size round((1 - rho) N)
3. encoder: linear patch embedding + fixed sine-cosine positions, visible
   tokens only, pre-norm transformer blocks, final LayerNorm
4. decoder: project to the decoder width, restore the full sequence with the
   learned mask token at masked positions, add positions, blocks, predict pixels
5. loss: squared L2 error per masked patch, averaged over masked patches

Encoder parameters live under "encoder.", decoder parameters under "decoder.".
The fine-tuning model reuses the encoder names unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from tqdm import tqdm

from mirnet.diffcore import NonFiniteError, Tensor, concat, gather_rows, no_grad
from mirnet.layers import (LAYER_NORM_EPS, Params, block, init_block, init_layer_norm, init_linear, layer_norm,
                           linear, param, sincos_pos_embed_2d)
from mirnet.optim import OptimizerConfig, collect_grads, init_optimizer, optimizer_step

logger = logging.getLogger(__name__)


class MaeError(ValueError):
    pass


class PretrainDivergedError(RuntimeError):
    def __init__(self, epoch: int, detail: str):
        super().__init__(f"pretraining diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass
class MaeConfig:
    image_size: int = 32
    patch_size: int = 8
    in_chans: int = 3
    embed_dim: int = 32
    depth: int = 2
    num_heads: int = 4
    decoder_embed_dim: int = 16
    decoder_depth: int = 1
    decoder_num_heads: int = 2
    mlp_ratio: float = 4.0
    qkv_bias: bool = True
    norm_eps: float = LAYER_NORM_EPS
    mask_ratio: float = 0.75
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta2: float = 0.95

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise MaeError(f"image size {self.image_size} is not divisible by patch size {self.patch_size}")
        for dim, heads, label in ((self.embed_dim, self.num_heads, "encoder"),
                                  (self.decoder_embed_dim, self.decoder_num_heads, "decoder")):
            if dim % heads:
                raise MaeError(f"{label} width {dim} is not divisible by {heads} heads")
            if dim % 4:
                raise MaeError(f"{label} width {dim} must be divisible by 4 for 2-D positional encodings")
        if not 1 <= self.decoder_depth <= max(1, self.depth // 2):
            raise MaeError(f"decoder depth {self.decoder_depth} must be at least 1 and at most half "
                           f"the encoder depth {self.depth}")
        if self.decoder_embed_dim > self.embed_dim:
            raise MaeError("decoder must be narrower than the encoder")
        visible_count(self.num_patches, self.mask_ratio)

    def architecture(self) -> dict:
        keys = ("image_size", "patch_size", "in_chans", "embed_dim", "depth", "num_heads", "decoder_embed_dim",
                "decoder_depth", "decoder_num_heads", "mlp_ratio", "qkv_bias", "norm_eps")
        full = asdict(self)
        return {key: full[key] for key in keys}


# -- patches ----------------------------------------------------------------------

def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, C) -> (N, P*P*C), or batched (B, H, W, C) -> (B, N, P*P*C)."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    B, H, W, C = images.shape
    if H % patch_size or W % patch_size:
        raise MaeError(f"image {H}x{W} is not divisible by patch size {patch_size}")
    h, w = H // patch_size, W // patch_size
    patches = images.reshape(B, h, patch_size, w, patch_size, C).transpose(0, 1, 3, 2, 4, 5)
    patches = patches.reshape(B, h * w, patch_size * patch_size * C)
    return patches[0] if single else patches


def unpatchify(patches: np.ndarray, patch_size: int, height: int, width: int, channels: int = 3) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    B = patches.shape[0]
    h, w = height // patch_size, width // patch_size
    images = patches.reshape(B, h, w, patch_size, patch_size, channels).transpose(0, 1, 3, 2, 4, 5)
    images = images.reshape(B, height, width, channels)
    return images[0] if single else images


# -- masking -----------------------------------------------------------------------

@dataclass(frozen=True)
class MaskPlan:
    visible: np.ndarray
    masked: np.ndarray
    ratio: float

    @property
    def num_patches(self) -> int:
        return self.visible.size + self.masked.size


def visible_count(num_patches: int, rho: float) -> int:
    if not 0.0 < rho < 1.0:
        raise MaeError(f"mask ratio must lie strictly inside (0, 1), got {rho}")
    keep = int(round((1.0 - rho) * num_patches))
    if keep < 1:
        raise MaeError(f"mask ratio {rho} leaves no visible patch out of {num_patches}")
    if keep >= num_patches:
        raise MaeError(f"mask ratio {rho} masks no patch out of {num_patches}")
    return keep


def sample_mask(num_patches: int, rho: float, rng: np.random.Generator) -> MaskPlan:
    keep = visible_count(num_patches, rho)
    order = rng.permutation(num_patches)
    return MaskPlan(visible=np.sort(order[:keep]), masked=np.sort(order[keep:]), ratio=rho)


def _stack(plans: MaskPlan | Sequence[MaskPlan], batch: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(plans, MaskPlan):
        plans = [plans] * batch
    if len(plans) != batch:
        raise MaeError(f"{len(plans)} mask plans for a batch of {batch}")
    sizes = {(p.visible.size, p.masked.size) for p in plans}
    if len(sizes) != 1:
        raise MaeError("all mask plans in a batch must keep the same number of patches")
    return np.stack([p.visible for p in plans]), np.stack([p.masked for p in plans])


# -- parameters --------------------------------------------------------------------

def init_encoder(params: Params, cfg: MaeConfig, rng: np.random.Generator, prefix: str = "encoder") -> Params:
    cfg.validate()
    init_linear(params, f"{prefix}.patch_embed", rng, cfg.patch_dim, cfg.embed_dim)
    for i in range(cfg.depth):
        init_block(params, f"{prefix}.blocks.{i}", rng, cfg.embed_dim, cfg.mlp_ratio, cfg.qkv_bias)
    init_layer_norm(params, f"{prefix}.norm", cfg.embed_dim)
    return params


def init_decoder(params: Params, cfg: MaeConfig, rng: np.random.Generator, prefix: str = "decoder") -> Params:
    init_linear(params, f"{prefix}.embed", rng, cfg.embed_dim, cfg.decoder_embed_dim)
    params[f"{prefix}.mask_token"] = param(rng.normal(0.0, 0.02, size=cfg.decoder_embed_dim))
    for i in range(cfg.decoder_depth):
        init_block(params, f"{prefix}.blocks.{i}", rng, cfg.decoder_embed_dim, cfg.mlp_ratio, cfg.qkv_bias)
    init_layer_norm(params, f"{prefix}.norm", cfg.decoder_embed_dim)
    init_linear(params, f"{prefix}.pred", rng, cfg.decoder_embed_dim, cfg.patch_dim)
    return params


def init_mae(cfg: MaeConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    init_encoder(params, cfg, rng)
    init_decoder(params, cfg, rng)
    return params


def encoder_params(params: Params, prefix: str = "encoder") -> Params:
    return {name: t for name, t in params.items() if name.startswith(prefix + ".")}


# -- forward -----------------------------------------------------------------------

def encode(params: Params, cfg: MaeConfig, patches: np.ndarray, index: np.ndarray | None = None,
           prefix: str = "encoder") -> Tensor:
    """Encoder output for the patches at `index` (B, n) in that order, or for all patches."""
    B, N, _ = patches.shape
    pos = sincos_pos_embed_2d(cfg.embed_dim, cfg.grid, cfg.grid)
    if index is None:
        index = np.broadcast_to(np.arange(N), (B, N))
    rows = np.arange(B)[:, None]
    x = linear(params, f"{prefix}.patch_embed", Tensor(patches[rows, index])) + pos[index]
    for i in range(cfg.depth):
        x = block(params, f"{prefix}.blocks.{i}", x, cfg.num_heads, cfg.norm_eps)
    return layer_norm(params, f"{prefix}.norm", x, cfg.norm_eps)


def encode_image(params: Params, cfg: MaeConfig, images: np.ndarray, prefix: str = "encoder") -> Tensor:
    """Mean-pooled embedding z (B, D) with every patch visible."""
    tokens = encode(params, cfg, patchify(images, cfg.patch_size), prefix=prefix)
    return tokens.mean(axis=1)


def decode(params: Params, cfg: MaeConfig, latent: Tensor, visible: np.ndarray, masked: np.ndarray,
           prefix: str = "decoder") -> Tensor:
    B, n_visible, _ = latent.shape
    n_masked = masked.shape[1]
    x = linear(params, f"{prefix}.embed", latent)
    mask_tokens = Tensor(np.ones((B, n_masked, 1))) * params[f"{prefix}.mask_token"]
    sequence = concat([x, mask_tokens], axis=1)
    # restore the original patch order from the [visible, masked] layout
    restore = np.argsort(np.concatenate([visible, masked], axis=1), axis=1, kind="stable")
    x = gather_rows(sequence, restore)
    x = x + sincos_pos_embed_2d(cfg.decoder_embed_dim, cfg.grid, cfg.grid)
    for i in range(cfg.decoder_depth):
        x = block(params, f"{prefix}.blocks.{i}", x, cfg.decoder_num_heads, cfg.norm_eps)
    x = layer_norm(params, f"{prefix}.norm", x, cfg.norm_eps)
    return linear(params, f"{prefix}.pred", x)


def mae_forward(images: np.ndarray, plans: MaskPlan | Sequence[MaskPlan], params: Params, cfg: MaeConfig) -> Tensor:
    """Full reconstruction (B, N, P*P*C) in original patch order."""
    patches = patchify(images, cfg.patch_size)
    if patches.ndim == 2:
        patches = patches[None]
    visible, masked = _stack(plans, patches.shape[0])
    if visible.shape[1] + masked.shape[1] != cfg.num_patches:
        raise MaeError(f"mask plan covers {visible.shape[1] + masked.shape[1]} patches, image has {cfg.num_patches}")
    latent = encode(params, cfg, patches, visible)
    return decode(params, cfg, latent, visible, masked)


def masked_mse(target: np.ndarray, reconstruction: Tensor, plans: MaskPlan | Sequence[MaskPlan]) -> Tensor:
    """Per image: mean over masked patches of the summed squared pixel error; then batch mean."""
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 2:
        target = target[None]
    if reconstruction.shape != target.shape:
        raise MaeError(f"reconstruction {reconstruction.shape} does not match target patches {target.shape}")
    B, N, _ = target.shape
    _, masked = _stack(plans, B)
    if masked.shape[1] == 0:
        raise MaeError("masked_mse needs at least one masked patch")
    weights = np.zeros((B, N, 1))
    weights[np.arange(B)[:, None], masked] = 1.0 / masked.shape[1]
    diff = reconstruction - target
    return (diff * diff * weights).sum() * (1.0 / B)


# -- training ----------------------------------------------------------------------

def _monitor_batch(images: np.ndarray, cfg: MaeConfig, seed: int, size: int = 64) -> tuple[np.ndarray, list[MaskPlan]]:
    rng = np.random.default_rng([seed, 1])
    pick = rng.choice(len(images), size=min(size, len(images)), replace=False)
    plans = [sample_mask(cfg.num_patches, cfg.mask_ratio, rng) for _ in pick]
    return images[np.sort(pick)], plans


def monitor_loss(params: Params, cfg: MaeConfig, images: np.ndarray, plans: Sequence[MaskPlan]) -> float:
    with no_grad():
        reconstruction = mae_forward(images, plans, params, cfg)
        return masked_mse(patchify(images, cfg.patch_size), reconstruction, plans).item()


def pretrain(images: np.ndarray, cfg: MaeConfig, seed: int = 0,
             show_progress: bool = True) -> tuple[Params, list[dict]]:
    """Train encoder + decoder on unlabeled images; returns (encoder params, per-epoch history).

    History entry 0 is the untrained model. `loss` is masked MSE on a fixed monitoring
    batch with fixed masks, `train_loss` the mean over the epoch's batches.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) < 1:
        raise MaeError("pretraining needs at least one unlabeled image")
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = init_mae(cfg, rng)
    state = init_optimizer(params, OptimizerConfig(lr=cfg.lr, beta2=cfg.beta2, weight_decay=cfg.weight_decay,
                                                   layer_decay=1.0))
    monitor_images, monitor_plans = _monitor_batch(images, cfg, seed)
    history = [{"epoch": 0, "loss": monitor_loss(params, cfg, monitor_images, monitor_plans), "train_loss": None}]
    batch_size = min(cfg.batch_size, len(images))

    for epoch in tqdm(range(1, cfg.epochs + 1), desc="Pretraining", disable=not show_progress):
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = images[order[start:start + batch_size]]
            plans = [sample_mask(cfg.num_patches, cfg.mask_ratio, rng) for _ in range(len(batch))]
            try:
                loss = masked_mse(patchify(batch, cfg.patch_size), mae_forward(batch, plans, params, cfg), plans)
            except NonFiniteError as exc:
                raise PretrainDivergedError(epoch, str(exc)) from exc
            if not np.isfinite(loss.item()):
                raise PretrainDivergedError(epoch, f"loss {loss.item()}")
            loss.backward()
            optimizer_step(params, collect_grads(params), state)
            for t in params.values():
                t.grad = None
            losses.append(loss.item())
        record = {"epoch": epoch, "loss": monitor_loss(params, cfg, monitor_images, monitor_plans),
                  "train_loss": float(np.mean(losses))}
        history.append(record)
        logger.debug("pretrain epoch %d: monitor %.6f train %.6f", epoch, record["loss"], record["train_loss"])

    logger.info("pretraining done: masked MSE %.4f -> %.4f over %d epochs",
                history[0]["loss"], history[-1]["loss"], cfg.epochs)
    return encoder_params(params), history
