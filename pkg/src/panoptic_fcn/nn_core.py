"""Operator core: conv blocks, the toy feature pyramid, resizing, gradient checks
and the binary checkpoint format.

Everything trainable is a ``torch.nn.Module``; arrays are ``(C, H, W)`` or
``(B, C, H, W)`` tensors. Float32 is the default dtype; call ``.double()`` on a
module (and pass float64 inputs) for the 64-bit verification mode.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError, InputError, VerificationError

__all__ = [
    "BackboneConfig",
    "ConvBlock",
    "ToyFPN",
    "bilinear_resize",
    "build_pyramid",
    "conv_block_forward",
    "coord_channels",
    "finite_difference_check",
    "group_count",
    "init_fan_in_uniform",
    "load_checkpoint",
    "save_checkpoint",
]


def group_count(channels: int) -> int:
    """Group-norm group count used everywhere: ``min(8, channels)``, reduced to a divisor."""
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


def init_fan_in_uniform(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero bias."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.GroupNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


class ConvBlock(nn.Module):
    """A stack of 3x3 convolutions, each followed by GroupNorm and ReLU."""

    def __init__(self, in_channels: int, channels: int, num_convs: int = 3, stride: int = 1):
        super().__init__()
        if num_convs < 1:
            raise ConfigurationError(f"num_convs must be >= 1, got {num_convs}")
        if in_channels < 1 or channels < 1:
            raise ConfigurationError("channel counts must be >= 1")
        self.in_channels = in_channels
        self.channels = channels
        layers: list[nn.Module] = []
        c_in = in_channels
        for i in range(num_convs):
            layers.append(nn.Conv2d(c_in, channels, 3, stride=stride if i == 0 else 1, padding=1))
            layers.append(nn.GroupNorm(group_count(channels), channels))
            layers.append(nn.ReLU())
            c_in = channels
        self.layers = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.in_channels:
            raise ConfigurationError(
                f"conv block expects {self.in_channels} input channels, got {x.shape[-3]}"
            )
        return self.layers(x)


def conv_block_forward(x: Tensor, block: ConvBlock) -> Tensor:
    """Apply ``block`` to a ``(C, H, W)`` or ``(B, C, H, W)`` array."""
    if x.dim() == 3:
        return block(x.unsqueeze(0)).squeeze(0)
    return block(x)


def bilinear_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize with half-pixel centers (``align_corners=False``), no antialiasing.

    Accepts ``(H, W)``, ``(C, H, W)`` or ``(B, C, H, W)``.
    """
    h, w = int(size[0]), int(size[1])
    if h < 1 or w < 1:
        raise InputError(f"target size must be positive, got {size}")
    if tuple(x.shape[-2:]) == (h, w):
        return x.clone()
    lead = x.shape[:-2]
    flat = x.reshape(1, -1, *x.shape[-2:])
    out = F.interpolate(flat, size=(h, w), mode="bilinear", align_corners=False)
    return out.reshape(*lead, h, w)


def coord_channels(height: int, width: int, *, batch: int | None = None,
                   dtype=torch.float32, device=None) -> Tensor:
    """Two coordinate planes (x then y), each spanning ``[-1, 1]`` across its axis."""
    xs = torch.linspace(-1.0, 1.0, width, dtype=dtype, device=device)
    ys = torch.linspace(-1.0, 1.0, height, dtype=dtype, device=device)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    coords = torch.stack([xx, yy])
    if batch is not None:
        coords = coords.unsqueeze(0).expand(batch, -1, -1, -1)
    return coords


@dataclass
class BackboneConfig:
    """Toy backbone: strided conv encoder with a top-down lateral pyramid."""

    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 48, 64)
    fpn_channels: int = 32
    num_stages: int = 3

    @property
    def strides(self) -> list[int]:
        return [2 ** (i + 2) for i in range(self.num_stages)]


class ToyFPN(nn.Module):
    """Strided-convolution encoder plus FPN-style top-down fusion.

    Produces ``num_stages`` maps at strides 4, 8, 16, ... each with
    ``fpn_channels`` channels.
    """

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        cfg = config or BackboneConfig()
        if len(cfg.widths) != cfg.num_stages + 1:
            raise ConfigurationError("backbone widths must have num_stages + 1 entries")
        self.config = cfg
        self.encoders = nn.ModuleList()
        c_in = cfg.in_channels
        for i, w in enumerate(cfg.widths):
            # level 0 is the stride-2 stem; each further level halves resolution again
            self.encoders.append(ConvBlock(c_in, w, num_convs=1 if i == 0 else 2, stride=2))
            c_in = w
        self.laterals = nn.ModuleList(nn.Conv2d(w, cfg.fpn_channels, 1) for w in cfg.widths[1:])
        self.outputs = nn.ModuleList(ConvBlock(cfg.fpn_channels, cfg.fpn_channels, 1)
                                     for _ in cfg.widths[1:])

    @property
    def strides(self) -> list[int]:
        return self.config.strides

    def forward(self, image: Tensor) -> list[Tensor]:
        squeeze = image.dim() == 3
        x = image.unsqueeze(0) if squeeze else image
        h, w = x.shape[-2:]
        largest = self.strides[-1]
        if h % largest or w % largest:
            ph, pw = (-h) % largest, (-w) % largest
            raise InputError(
                f"image size {h}x{w} not divisible by stride {largest}; pad by {ph} rows and {pw} columns"
            )
        feats = []
        for enc in self.encoders:
            x = enc(x)
            feats.append(x)
        lat = [l(f) for l, f in zip(self.laterals, feats[1:])]
        top = lat[-1]
        outs = [top]
        for l in reversed(lat[:-1]):
            top = l + F.interpolate(top, size=l.shape[-2:], mode="nearest")
            outs.insert(0, top)
        outs = [o(p) for o, p in zip(self.outputs, outs)]
        if squeeze:
            outs = [o.squeeze(0) for o in outs]
        return outs


def build_pyramid(image: Tensor, backbone: ToyFPN) -> list[Tensor]:
    """Run the toy backbone; returns one feature array per stage, finest first."""
    return backbone(image)


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-6,
    *,
    samples_per_param: int = 8,
    seed: int = 0,
) -> float:
    """Compare autograd gradients against central differences.

    ``loss_fn`` takes no arguments and recomputes the scalar loss from the
    current values of ``params`` (float64 tensors with ``requires_grad``).
    Returns the maximum over sampled entries of
    ``|analytic - fd| / max(|analytic|, |fd|, 1e-8)``.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise VerificationError("finite_difference_check requires float64 parameters")
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise VerificationError(f"loss is not finite: {loss.item()!r}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            idx = rng.choice(n, size=min(samples_per_param, n), replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = loss_fn().item()
                flat[i] = orig - epsilon
                down = loss_fn().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise VerificationError(f"non-finite loss while perturbing entry {int(i)}")
                fd = (up - down) / (2 * epsilon)
                an = gflat[i].item()
                rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
                worst = max(worst, rel)
    return worst


_MAGIC = b"PFCN"
_VERSION = 1


def save_checkpoint(state: dict[str, Tensor] | nn.Module, path: str | Path) -> None:
    """Write parameters as ``PFCN`` + u32 version + named row-major float32 entries."""
    if isinstance(state, nn.Module):
        state = state.state_dict()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, Tensor]:
    """Read a file written by :func:`save_checkpoint` into an ordered state dict."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise InputError(f"{path}: bad magic {data[:4]!r}, expected {_MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    state: dict[str, Tensor] = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            state[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise InputError(f"{path}: truncated or malformed entry at byte {pos}") from exc
    return state
