"""High-resolution feature construction, positional encoding and instance production."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError
from .nn_core import ConvBlock, bilinear_resize, coord_channels, group_count

HIGH_RES_MODES = ("p2", "summed", "semantic_fpn")


class _StepConv(nn.Sequential):
    """3x3 conv + GN + ReLU with replicate padding, so flat inputs stay flat."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__(
            nn.Conv2d(in_channels, channels, 3, padding=1, padding_mode="replicate"),
            nn.GroupNorm(group_count(channels), channels),
            nn.ReLU(),
        )


class HighResFeature(nn.Module):
    """Builds ``F_h`` at the finest pyramid resolution.

    ``p2`` projects the finest stage, ``summed`` adds the projections of every
    stage after resizing them to the finest grid, and ``semantic_fpn`` runs a
    coarse-to-fine upsample-and-add with a conv at every step. All modes share
    the finest-stage projection, so ``mode`` can be switched on a trained module.
    """

    def __init__(self, in_channels: int, out_channels: int, num_stages: int, mode: str = "semantic_fpn"):
        super().__init__()
        if mode not in HIGH_RES_MODES:
            raise ConfigurationError(f"unknown high-res feature mode {mode!r}; choose from {HIGH_RES_MODES}")
        self.mode = mode
        self.proj = nn.ModuleList(nn.Conv2d(in_channels, out_channels, 1, bias=False)
                                  for _ in range(num_stages))
        self.steps = nn.ModuleList(_StepConv(in_channels, in_channels) for _ in range(num_stages))

    def forward(self, pyramid: Sequence[Tensor], mode: str | None = None) -> Tensor:
        mode = mode or self.mode
        if mode not in HIGH_RES_MODES:
            raise ConfigurationError(f"unknown high-res feature mode {mode!r}; choose from {HIGH_RES_MODES}")
        finest = pyramid[0]
        size = finest.shape[-2:]
        if mode == "p2":
            return self.proj[0](finest)
        if mode == "summed":
            out = self.proj[0](finest)
            for p, x in zip(self.proj[1:], pyramid[1:]):
                out = out + bilinear_resize(p(x), size)
            return out
        y = self.steps[-1](pyramid[-1])
        for i in range(len(pyramid) - 2, -1, -1):
            y = F.interpolate(y, size=pyramid[i].shape[-2:], mode="bilinear", align_corners=False)
            y = self.steps[i](y + pyramid[i])
        return self.proj[0](y)


def build_high_res_feature(pyramid: Sequence[Tensor], module: HighResFeature, mode: str | None = None) -> Tensor:
    squeeze = pyramid[0].dim() == 3
    pyr = [p.unsqueeze(0) for p in pyramid] if squeeze else list(pyramid)
    out = module(pyr, mode)
    return out[0] if squeeze else out


class FeatureEncoder(nn.Module):
    """Coordinate channels + conv block + linear 1x1 projection: ``F_h -> F_e``."""

    def __init__(self, channels: int = 64, num_convs: int = 3, use_coords: bool = True):
        super().__init__()
        self.use_coords = use_coords
        self.block = ConvBlock(channels + (2 if use_coords else 0), channels, num_convs)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, fh: Tensor) -> Tensor:
        if self.use_coords:
            b, _, h, w = fh.shape
            fh = torch.cat([fh, coord_channels(h, w, batch=b, dtype=fh.dtype, device=fh.device)], 1)
        return self.out(self.block(fh))


def encode_feature(fh: Tensor, encoder: FeatureEncoder) -> Tensor:
    squeeze = fh.dim() == 3
    fe = encoder(fh.unsqueeze(0) if squeeze else fh)
    return fe[0] if squeeze else fe


def instance_logits(kernels: Tensor, fe: Tensor) -> Tensor:
    """Bias-free 1x1 convolution of ``F_e`` (C, H, W) with each kernel row -> (K, H, W)."""
    if kernels.dim() == 1:
        kernels = kernels.unsqueeze(0)
    if kernels.shape[-1] != fe.shape[0]:
        raise ConfigurationError(
            f"kernel length {kernels.shape[-1]} does not match encoded feature channels {fe.shape[0]}"
        )
    return torch.einsum("kc,chw->khw", kernels.to(fe.dtype), fe)


def produce_instances(kernels: Tensor, fe: Tensor) -> Tensor:
    """Soft masks ``sigmoid(K_j * F_e)``, one per kernel."""
    return torch.sigmoid(instance_logits(kernels, fe))
