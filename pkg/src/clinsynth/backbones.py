"""Volumetric generators and the conditional patch discriminator.

All generators share one 3D U-Net body. The mask is fed as K one-hot channels
(concatenated after the noisy image for the diffusion model); text fusion
layers, when configured, act on encoder features at selected levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .fusion import FUSION_KINDS, make_fusion_stack

CLASS_NAMES = ("background", "right_lung", "left_lung", "airway")
NUM_CLASSES = len(CLASS_NAMES)


class ShapeError(ValueError):
    pass


@dataclass
class FusionSpec:
    kind: str = "cross_attention"
    embed_dim: int = 768
    levels: Optional[tuple[int, ...]] = None  # U-Net level indices; None = deepest level
    key_dim: Optional[int] = None
    residual: bool = True

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ConfigError(f"fusion.kind must be one of {FUSION_KINDS}, got {self.kind!r}")
        if self.levels is not None:
            self.levels = tuple(int(i) for i in self.levels)


@dataclass
class GeneratorConfig:
    in_channels: int = NUM_CLASSES
    out_channels: int = 1
    base_channels: int = 32
    depth_levels: int = 4  # number of 2x downsamplings
    fusion: Optional[FusionSpec] = None
    out_activation: str = "tanh"
    time_embedding: bool = False
    input_shape: Optional[tuple[int, int, int]] = None

    def __post_init__(self):
        if self.depth_levels < 2:
            raise ConfigError("depth_levels must be >= 2")
        if min(self.in_channels, self.out_channels, self.base_channels) <= 0:
            raise ConfigError("channel counts must be positive")
        if self.out_activation not in ("tanh", "none"):
            raise ConfigError(f"out_activation must be 'tanh' or 'none', got {self.out_activation!r}")
        if isinstance(self.fusion, dict):
            self.fusion = FusionSpec(**self.fusion)
        if self.fusion is not None:
            levels = self.fusion_levels
            bad = [i for i in levels if not 0 <= i <= self.depth_levels]
            if bad:
                raise ConfigError(f"fusion levels {bad} outside 0..{self.depth_levels}")
        if self.input_shape is not None:
            check_spatial(self.input_shape, self.depth_levels)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth_levels + 1)]

    @property
    def fusion_levels(self) -> tuple[int, ...]:
        if self.fusion is None:
            return ()
        if self.fusion.levels is None:
            return (self.depth_levels,)
        return self.fusion.levels


def check_spatial(shape: Sequence[int], depth_levels: int) -> None:
    factor = 2 ** depth_levels
    if any(s <= 0 or s % factor for s in shape):
        raise ShapeError(f"spatial shape {tuple(shape)} must be divisible by 2**depth_levels = {factor}")


def one_hot_mask(mask: torch.Tensor, num_classes: int = NUM_CLASSES) -> torch.Tensor:
    """(B, D, H, W) integer labels -> (B, K, D, H, W) float one-hot."""
    if mask.dim() != 4:
        raise ShapeError(f"mask must be (B, D, H, W), got {tuple(mask.shape)}")
    return F.one_hot(mask.long(), num_classes).permute(0, 4, 1, 2, 3).float()


def _groups(c: int) -> int:
    # at least two channels per group, so a 1x1x1 bottleneck still normalises
    for g in (8, 4, 2):
        if c % g == 0 and c // g >= 2:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int | None = None):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.temb = nn.Linear(temb_dim, cout) if temb_dim else None

    def forward(self, x, temb=None):
        h = F.silu(self.norm1(self.conv1(x)))
        if self.temb is not None:
            h = h + self.temb(temb)[:, :, None, None, None]
        return F.silu(self.norm2(self.conv2(h)))


class UNet3D(nn.Module):
    """Mask-conditioned volumetric U-Net with optional timestep and text inputs."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        L = cfg.depth_levels
        temb_dim = None
        if cfg.time_embedding:
            temb_dim = ch[0] * 4
            self.time_mlp = nn.Sequential(nn.Linear(ch[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for i in range(L + 1):
            self.enc.append(ConvBlock(cin, ch[i], temb_dim))
            if i < L:
                self.down.append(nn.Conv3d(ch[i], ch[i], 4, stride=2, padding=1))
            cin = ch[i]
        self.up = nn.ModuleList(nn.ConvTranspose3d(ch[i + 1], ch[i], 2, stride=2) for i in range(L))
        self.dec = nn.ModuleList(ConvBlock(2 * ch[i], ch[i], temb_dim) for i in range(L))
        self.head = nn.Conv3d(ch[0], cfg.out_channels, 1)
        # Built last so the backbone initialisation does not depend on whether text is used.
        self.fusion = None
        self._fusion_index: dict[int, int] = {}
        if cfg.fusion is not None:
            f = cfg.fusion
            self.fusion = make_fusion_stack(f.kind, [ch[i] for i in cfg.fusion_levels], f.embed_dim,
                                            f.key_dim, f.residual)
            self._fusion_index = {lvl: j for j, lvl in enumerate(cfg.fusion_levels)}

    @property
    def uses_text(self) -> bool:
        return self.fusion is not None

    def forward(self, x: torch.Tensor, t: torch.Tensor | None = None, emb: torch.Tensor | None = None) -> torch.Tensor:
        cfg = self.cfg
        if x.dim() != 5 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected input (B, {cfg.in_channels}, D, H, W), got {tuple(x.shape)}")
        check_spatial(x.shape[2:], cfg.depth_levels)
        if emb is not None and self.fusion is None:
            raise ConfigError("an embedding was given but the model has no fusion layers")
        temb = None
        if cfg.time_embedding:
            if t is None:
                raise ConfigError("this model needs a timestep")
            temb = self.time_mlp(timestep_embedding(t, cfg.channels[0]))
        skips = []
        h = x
        for i, block in enumerate(self.enc):
            h = block(h, temb)
            if emb is not None and i in self._fusion_index:
                h = self.fusion[self._fusion_index[i]](h, emb)
            if i < cfg.depth_levels:
                skips.append(h)
                h = self.down[i](h)
        for i in reversed(range(cfg.depth_levels)):
            h = self.up[i](h)
            h = self.dec[i](torch.cat([h, skips[i]], dim=1), temb)
        out = self.head(h)
        return torch.tanh(out) if cfg.out_activation == "tanh" else out


class Generator(UNet3D):
    """Image generator for the pure U-Net and pix2pix backbones: mask (+ text) -> image."""

    def forward(self, mask_onehot: torch.Tensor, emb: torch.Tensor | None = None) -> torch.Tensor:  # type: ignore[override]
        return super().forward(mask_onehot, None, emb)


class DiffusionUNet(UNet3D):
    """Noise predictor: (x_t || mask one-hot, t, text) -> epsilon."""

    def __init__(self, cfg: GeneratorConfig, timesteps: int, num_classes: int = NUM_CLASSES):
        if cfg.in_channels != cfg.out_channels + num_classes or not cfg.time_embedding or cfg.out_activation != "none":
            raise ConfigError("diffusion U-Net needs in_channels = out_channels + K, time_embedding and no output activation")
        super().__init__(cfg)
        self.timesteps = timesteps

    def forward(self, x_t, mask_onehot, t, emb=None):  # type: ignore[override]
        if isinstance(t, int):
            t = torch.full((x_t.shape[0],), t, dtype=torch.long)
        if torch.any(t < 0) or torch.any(t >= self.timesteps):
            raise ValueError(f"timestep out of range [0, {self.timesteps}): {t.tolist()}")
        if x_t.shape[2:] != mask_onehot.shape[2:]:
            raise ShapeError(f"image {tuple(x_t.shape)} and mask {tuple(mask_onehot.shape)} are not aligned")
        return super().forward(torch.cat([x_t, mask_onehot], dim=1), t, emb)


class PatchDiscriminator(nn.Module):
    """Conditional PatchGAN on (image || mask one-hot); each stride-2 conv halves space."""

    def __init__(self, image_channels: int = 1, num_classes: int = NUM_CLASSES, base_channels: int = 16,
                 n_down: int = 3):
        super().__init__()
        self.image_channels = image_channels
        self.num_classes = num_classes
        layers: list[nn.Module] = []
        cin, c = image_channels + num_classes, base_channels
        for i in range(n_down):
            layers.append(nn.Conv3d(cin, c, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm3d(c, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            cin, c = c, c * 2
        layers.append(nn.Conv3d(cin, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, image: torch.Tensor, mask_onehot: torch.Tensor) -> torch.Tensor:
        if image.shape[0] != mask_onehot.shape[0] or image.shape[2:] != mask_onehot.shape[2:]:
            raise ShapeError(f"image {tuple(image.shape)} and mask {tuple(mask_onehot.shape)} are not aligned")
        return self.net(torch.cat([image, mask_onehot], dim=1))


def generator_config(base_channels: int = 32, depth_levels: int = 4, fusion: FusionSpec | None = None,
                     num_classes: int = NUM_CLASSES) -> GeneratorConfig:
    return GeneratorConfig(in_channels=num_classes, out_channels=1, base_channels=base_channels,
                           depth_levels=depth_levels, fusion=fusion, out_activation="tanh")


def diffusion_config(base_channels: int = 32, depth_levels: int = 4, fusion: FusionSpec | None = None,
                     num_classes: int = NUM_CLASSES) -> GeneratorConfig:
    return GeneratorConfig(in_channels=1 + num_classes, out_channels=1, base_channels=base_channels,
                           depth_levels=depth_levels, fusion=fusion, out_activation="none", time_embedding=True)
