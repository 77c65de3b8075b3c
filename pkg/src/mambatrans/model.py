"""End-to-end fused-to-visible translator."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn, ops
from .attention import ConfigError, MMCAConfig
from .blocks import MMSSB, MMSSGConfig, mm_ssg_stack
from .serialize import MODEL_TAG, load_checkpoint, save_checkpoint
from .tensor import Tensor

MAX_TEXT_TOKENS = 64
MIN_SIDE = 8


class CheckpointMismatch(ValueError):
    """A checkpoint was written for a different model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    feature_channels: int = 180
    num_groups: int = 2
    blocks_per_group: int = 2
    state_dim: int = 16
    num_heads: int = 4
    text_vocab: int = 64
    latent_ratio: int = 2
    residual_output: bool = True
    query_from: str = "text"

    def __post_init__(self):
        if self.feature_channels % self.num_heads:
            raise ConfigError(f"num_heads={self.num_heads} must divide feature_channels={self.feature_channels}")
        if min(self.num_groups, self.blocks_per_group, self.state_dim, self.text_vocab, self.latent_ratio) < 1:
            raise ConfigError("model sizes must be positive")

    @property
    def text_embed_dim(self) -> int:
        return self.feature_channels

    @property
    def latent_channels(self) -> int:
        return self.latent_ratio * self.feature_channels

    @property
    def stack(self) -> MMSSGConfig:
        return MMSSGConfig(self.blocks_per_group, self.num_groups)

    @property
    def attention(self) -> MMCAConfig:
        return MMCAConfig(self.feature_channels, self.num_heads, self.query_from)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class TranslatorModel(nn.Module):
    """All learnable parameters of the translator, built deterministically from ``seed``."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self._config = config
        rng = np.random.default_rng(seed)
        c = config.feature_channels
        self.img_conv = nn.Conv2d(rng, 3, c, k=3)
        self.mask_conv = nn.Conv2d(rng, 1, c, k=3)
        self.text_embedding = Tensor(rng.standard_normal((config.text_vocab, c)).astype(np.float32), requires_grad=True)
        self.blocks = [
            MMSSB(rng, c, config.latent_channels, config.state_dim, config.attention)
            for _ in range(config.stack.depth)
        ]
        self.recon_conv = nn.Conv2d(rng, c, 3, k=3)
        self.recon_conv.weight.data[...] = 0.0
        self.recon_conv.bias.data[...] = 0.0

    @property
    def config(self) -> ModelConfig:
        return self._config


def init_weights(model: TranslatorModel, seed: int) -> TranslatorModel:
    """Reset ``model`` to the deterministic initialization for ``seed``."""
    dtype = model.img_conv.weight.dtype
    model.load_state_dict(TranslatorModel(model.config, seed).state_dict())
    return model.to(dtype) if dtype != np.float32 else model


def patch_embed(fmap: Tensor) -> Tensor:
    """Stride-1 unfolding: token ``k`` is grid position ``(k // W, k % W)``."""
    h, w, c = fmap.shape
    return ops.reshape(fmap, (h * w, c))


def patch_unembed(tokens: Tensor, h: int, w: int) -> Tensor:
    if tokens.shape[0] != h * w:
        raise ValueError(f"{tokens.shape[0]} tokens cannot fill a {h}x{w} grid")
    return ops.reshape(tokens, (h, w, tokens.shape[1]))


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def extract_shallow(fused, voted_mask, text_ids: Sequence[int], model: TranslatorModel):
    """Shallow image, mask and text features ``(F_I, F_mask, F_text)``."""
    dtype = model.img_conv.weight.dtype
    fused = _as_tensor(fused, dtype)
    voted_mask = _as_tensor(voted_mask, dtype)
    if fused.ndim != 3 or fused.shape[2] != 3:
        raise ValueError(f"fused image must be (H, W, 3), got {fused.shape}")
    h, w = fused.shape[:2]
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
    if voted_mask.ndim == 2:
        voted_mask = ops.reshape(voted_mask, (h, w, 1))
    if voted_mask.shape != (h, w, 1):
        raise ValueError(f"mask shape {voted_mask.shape} does not match image {h}x{w}")
    ids = np.asarray(list(text_ids), dtype=np.intp)
    if ids.size == 0:
        raise ValueError("text token sequence is empty")
    if ids.size > MAX_TEXT_TOKENS:
        raise ValueError(f"at most {MAX_TEXT_TOKENS} text tokens are supported, got {ids.size}")
    if ids.min() < 0 or ids.max() >= model.config.text_vocab:
        raise ValueError(f"token id outside vocabulary of {model.config.text_vocab}")
    F_I = model.img_conv(fused)
    F_mask = model.mask_conv(voted_mask)
    F_text = ops.embedding(model.text_embedding, ids)
    return F_I, F_mask, F_text


def translate(fused, voted_mask, text_ids: Sequence[int], model: TranslatorModel, training: bool = False) -> Tensor:
    """Translate a fused image toward the visible distribution.

    With ``residual_output`` the head predicts a correction added to the
    input. Outside training the result is clamped to ``[0, 1]``.
    """
    dtype = model.img_conv.weight.dtype
    fused = _as_tensor(fused, dtype)
    F_I, F_mask, F_text = extract_shallow(fused, voted_mask, text_ids, model)
    h, w = fused.shape[:2]
    target = _as_tensor(voted_mask, dtype)
    target = ops.reshape(target, (h, w)) if target.ndim == 3 else target
    feats = mm_ssg_stack(F_I, F_mask, F_text, target, model.config.stack, model.blocks)
    delta = model.recon_conv(feats)
    out = ops.add(fused, delta) if model.config.residual_output else delta
    if not training:
        out = ops.clamp(out, 0.0, 1.0)
    return out


def save_model(path, model: TranslatorModel) -> None:
    header = {"format": "MTCKPT1", "config": model.config.to_dict()}
    save_checkpoint(path, MODEL_TAG, header, model.state_dict())


def load_model(path, expected: ModelConfig | None = None) -> TranslatorModel:
    header, tensors = load_checkpoint(Path(path), MODEL_TAG)
    config = ModelConfig.from_dict(header["config"])
    if expected is not None and config != expected:
        raise CheckpointMismatch(f"{path}: checkpoint config {config} differs from requested {expected}")
    model = TranslatorModel(config)
    model.load_state_dict(tensors)
    return model
