"""Mask-image-text cross-attention with target-mask gating."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, ops
from .tensor import Tensor

SCATTER_EPS = 1e-8


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MMCAConfig:
    embed_dim: int
    num_heads: int
    # "text": text tokens query the visual key/value grid (default).
    # "visual": every grid position queries the text tokens (ablation).
    query_from: str = "text"

    def __post_init__(self):
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(f"num_heads={self.num_heads} must divide embed_dim={self.embed_dim}")
        if self.query_from not in ("text", "visual"):
            raise ConfigError(f"query_from must be 'text' or 'visual', got {self.query_from!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


class MMCA(nn.Module):
    def __init__(self, rng: np.random.Generator, cfg: MMCAConfig):
        c = cfg.embed_dim
        self._cfg = cfg
        self.q_proj = nn.Linear(rng, c, c)
        self.conv1 = nn.Conv2d(rng, c, c, k=1)
        self.conv3 = nn.Conv2d(rng, c, c, k=3)
        self.fuse = nn.Linear(rng, 2 * c, c)
        # no key bias: it shifts every logit of a query equally and the softmax cancels it
        self.k_proj = nn.Linear(rng, c, c, bias=False)
        self.v_proj = nn.Linear(rng, c, c)
        self.out_proj = nn.Linear(rng, c, c)

    @property
    def cfg(self) -> MMCAConfig:
        return self._cfg


def fusion_feature(fused_feat: Tensor, mask_feat: Tensor, text_summary: Tensor) -> Tensor:
    """Elementwise sum of image, mask and broadcast text features."""
    if fused_feat.shape != mask_feat.shape:
        raise ValueError(f"image features {fused_feat.shape} and mask features {mask_feat.shape} differ")
    if text_summary.shape != (fused_feat.shape[-1],):
        raise ValueError(f"text summary must have shape ({fused_feat.shape[-1]},), got {text_summary.shape}")
    return ops.add(ops.add(fused_feat, mask_feat), ops.broadcast_to(text_summary, fused_feat.shape))


def _fused_tokens(fused_feat: Tensor, mask_feat: Tensor, text_summary: Tensor, w: MMCA) -> Tensor:
    fusion = fusion_feature(fused_feat, mask_feat, text_summary)
    branches = ops.concat([w.conv1(fusion), w.conv3(fusion)], axis=-1)
    h, wd, c = fused_feat.shape
    return ops.reshape(w.fuse(branches), (h * wd, c))


def build_kv(fused_feat: Tensor, mask_feat: Tensor, text_summary: Tensor, w: MMCA) -> tuple[Tensor, Tensor]:
    """Key/value token sequences (row-major ``H*W`` tokens) from the fusion feature."""
    tokens = _fused_tokens(fused_feat, mask_feat, text_summary, w)
    return w.k_proj(tokens), w.v_proj(tokens)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, c = x.shape
    return ops.transpose(ops.reshape(x, (n, heads, c // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    heads, n, d = x.shape
    return ops.reshape(ops.transpose(x, (1, 0, 2)), (n, heads * d))


def mmca(
    query_tokens: Tensor,
    fused_feat: Tensor,
    mask_feat: Tensor,
    text_tokens: Tensor,
    target_mask: Tensor,
    w: MMCA,
    return_details: bool = False,
):
    """Ternary cross-attention followed by multiplicative target-mask gating.

    With the default ``query_from="text"`` the projected text tokens attend
    over the ``H*W`` fusion tokens; each grid position then collects the
    query outputs weighted by the attention it received, normalized by the
    total attention at that position.

    Returns the gated ``(H, W, C)`` map, plus a dict with ``attn`` (heads x
    queries x keys) and ``pre_gate`` when ``return_details`` is set.
    """
    cfg = w.cfg
    h, wd, c = fused_feat.shape
    if c != cfg.embed_dim:
        raise ValueError(f"features have {c} channels, attention expects {cfg.embed_dim}")
    if target_mask.shape != (h, wd):
        raise ValueError(f"target mask shape {target_mask.shape} != {(h, wd)}")
    heads, scale = cfg.num_heads, 1.0 / np.sqrt(cfg.head_dim)
    text_summary = ops.mean(text_tokens, axis=0)
    tokens = _fused_tokens(fused_feat, mask_feat, text_summary, w)

    if cfg.query_from == "text":
        q = _split_heads(w.q_proj(query_tokens), heads)
        k = _split_heads(w.k_proj(tokens), heads)
        v = _split_heads(w.v_proj(tokens), heads)
        logits = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), scale)
        attn = ops.softmax(logits)                       # (heads, Lq, HW)
        out_q = ops.matmul(attn, v)                      # (heads, Lq, d)
        num = ops.matmul(ops.transpose(attn, (0, 2, 1)), out_q)
        den = ops.add(ops.sum(attn, axis=1), SCATTER_EPS)
        den = ops.broadcast_to(ops.reshape(den, (heads, h * wd, 1)), num.shape)
        spatial = _merge_heads(ops.div(num, den))
    else:
        q = _split_heads(w.q_proj(tokens), heads)
        k = _split_heads(w.k_proj(query_tokens), heads)
        v = _split_heads(w.v_proj(query_tokens), heads)
        attn = ops.softmax(ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), scale))
        spatial = _merge_heads(ops.matmul(attn, v))

    pre_gate = ops.reshape(w.out_proj(spatial), (h, wd, c))
    gate = ops.broadcast_to(ops.reshape(target_mask, (h, wd, 1)), (h, wd, c))
    out = ops.mul(pre_gate, gate)
    if return_details:
        return out, {"attn": attn, "pre_gate": pre_gate}
    return out
