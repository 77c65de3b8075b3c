"""Text-vision state-space module, the multimodal block and block stacking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn, ops
from .attention import MMCA, ConfigError, MMCAConfig, mmca
from .ssm import SSMParams, scan3d
from .tensor import Tensor


class TVSSM(nn.Module):
    """Weights of the text-vision state-space module.

    Image, mask and text are each projected into the shared ``latent``
    space; the image branch is then convolved depthwise before scanning.
    """

    def __init__(self, rng: np.random.Generator, channels: int, latent: int, state_dim: int):
        self.image_in_proj = nn.Linear(rng, channels, latent)
        self.mask_in_proj = nn.Linear(rng, channels, latent)
        self.text_in_proj = nn.Linear(rng, channels, latent)
        self.pre_scan_conv = nn.DepthwiseConv2d(rng, latent)
        self.spatial_scans = [SSMParams(rng, latent, state_dim) for _ in range(4)]
        self.text_scan = SSMParams(rng, latent, state_dim)
        self.out_norm = nn.LayerNorm(latent)
        self.out_proj = nn.Linear(rng, latent, channels)

    def tie_spatial_scans(self) -> None:
        """Share the first spatial scan's parameters across all four directions."""
        self.spatial_scans = [self.spatial_scans[0]] * 4


def tv_ssm(F_I: Tensor, F_mask: Tensor, F_text: Tensor, w: TVSSM) -> Tensor:
    if F_I.shape != F_mask.shape:
        raise ValueError(f"image features {F_I.shape} and mask features {F_mask.shape} differ")
    x = ops.silu(w.pre_scan_conv(w.image_in_proj(F_I)))
    scan = scan3d(x, w.text_in_proj(F_text), w.spatial_scans, w.text_scan)
    gate = ops.silu(w.mask_in_proj(F_mask))
    return w.out_proj(w.out_norm(ops.mul(scan.y, gate)))


class MMSSB(nn.Module):
    def __init__(self, rng: np.random.Generator, channels: int, latent: int, state_dim: int, attn: MMCAConfig):
        self.ln1 = nn.LayerNorm(channels)
        self.ln2 = nn.LayerNorm(channels)
        self.s = nn.ones((channels,))
        self.tv_ssm = TVSSM(rng, channels, latent, state_dim)
        self.post_conv = nn.Conv2d(rng, channels, channels, k=3)
        self.mmca = MMCA(rng, attn)


def mm_ssb(
    F_I: Tensor,
    F_mask: Tensor,
    F_text: Tensor,
    target_mask: Tensor,
    w: MMSSB,
    return_z: bool = False,
):
    """One multimodal block.

    ``Z = tv_ssm(LN1(F_I), F_mask, F_text) + s * LN1(F_I)`` and the output is
    ``mmca(F_text, conv(LN2(Z)), F_mask, F_text, mask) + Z``.
    """
    normed = w.ln1(F_I)
    z = ops.add(tv_ssm(normed, F_mask, F_text, w.tv_ssm), ops.mul(normed, w.s))
    attended = mmca(F_text, w.post_conv(w.ln2(z)), F_mask, F_text, target_mask, w.mmca)
    out = ops.add(attended, z)
    return (out, z) if return_z else out


@dataclass(frozen=True)
class MMSSGConfig:
    blocks_per_group: int = 2
    num_groups: int = 2

    def __post_init__(self):
        if self.blocks_per_group < 1 or self.num_groups < 1:
            raise ConfigError("blocks_per_group and num_groups must be >= 1")

    @property
    def depth(self) -> int:
        return self.blocks_per_group * self.num_groups


def mm_ssg_stack(
    F_I: Tensor,
    F_mask: Tensor,
    F_text: Tensor,
    target_mask: Tensor,
    cfg: MMSSGConfig,
    blocks: Sequence[MMSSB],
) -> Tensor:
    """Apply the blocks in order; mask, text and target mask are side inputs to every block."""
    if len(blocks) != cfg.depth:
        raise ConfigError(f"expected {cfg.depth} blocks ({cfg.num_groups}x{cfg.blocks_per_group}), got {len(blocks)}")
    x = F_I
    for block in blocks:
        x = mm_ssb(x, F_mask, F_text, target_mask, block)
    return x
