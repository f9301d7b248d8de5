"""The assembled network: toy pyramid, shared position/kernel heads, feature encoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import Tensor, nn

from .feature_encoder import FeatureEncoder, HighResFeature
from .kernel_generator import KernelHead, PositionHead
from .nn_core import BackboneConfig, ToyFPN, init_fan_in_uniform


@dataclass
class ModelConfig:
    num_things: int = 3
    num_stuff: int = 2
    widths: tuple[int, ...] = (16, 32, 48, 64)
    fpn_channels: int = 32
    num_stages: int = 3
    head_channels: int = 128
    head_convs: int = 3
    kernel_dim: int = 64
    encoder_convs: int = 3
    encoder_mode: str = "semantic_fpn"
    coord_kernel: bool = True
    coord_encoder: bool = True

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(3, tuple(self.widths), self.fpn_channels, self.num_stages)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class ModelOutput:
    thing_logits: list[Tensor]  # per stage (B, N_th, H_i, W_i)
    stuff_logits: list[Tensor]  # per stage (B, N_st, H_i, W_i)
    kernel_maps: list[Tensor]  # per stage (B, C_e, H_i, W_i)
    encoded: Tensor  # (B, C_e, H/4, W/4)
    pyramid: list[Tensor] = field(default_factory=list)

    @property
    def thing_maps(self) -> list[Tensor]:
        return [torch.sigmoid(t) for t in self.thing_logits]

    @property
    def stuff_maps(self) -> list[Tensor]:
        return [torch.sigmoid(t) for t in self.stuff_logits]


class PanopticFCN(nn.Module):
    def __init__(self, config: ModelConfig | None = None, seed: int | None = 0):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        self.backbone = ToyFPN(cfg.backbone)
        c = cfg.fpn_channels
        self.position_head = PositionHead(c, cfg.num_things, cfg.num_stuff, cfg.head_channels, cfg.head_convs)
        self.kernel_head = KernelHead(c, cfg.kernel_dim, cfg.head_channels, cfg.head_convs, cfg.coord_kernel)
        self.high_res = HighResFeature(c, cfg.kernel_dim, cfg.num_stages, cfg.encoder_mode)
        self.encoder = FeatureEncoder(cfg.kernel_dim, cfg.encoder_convs, cfg.coord_encoder)
        gen = None
        if seed is not None:
            gen = torch.Generator().manual_seed(seed)
        init_fan_in_uniform(self, gen)
        self.position_head.reset_output_bias()

    @property
    def strides(self) -> list[int]:
        return self.backbone.strides

    def forward(self, images: Tensor) -> ModelOutput:
        pyramid = self.backbone(images)
        th, st, ker = [], [], []
        for x in pyramid:
            _, t, s = self.position_head(x)
            th.append(t)
            st.append(s)
            ker.append(self.kernel_head(x))
        fe = self.encoder(self.high_res(pyramid))
        return ModelOutput(th, st, ker, fe, pyramid)
