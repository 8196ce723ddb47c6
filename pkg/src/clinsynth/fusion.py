"""Text-visual fusion layers for volumetric feature maps.

Two units, both shape preserving on (B, C, D, H, W) inputs conditioned on a
(B, E) text embedding:

* ``AffineFusion`` / ``AffineFusionBlock``: channelwise scale and shift
  predicted from the embedding, stacked DFBlock style (fuse, conv, fuse).
* ``CrossAttentionFusion``: the embedding is the only key; queries and values
  come from the feature map, and the softmax runs over spatial positions.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

FUSION_KINDS = ("affine", "cross_attention")


class FusionShapeError(ValueError):
    pass


def _check(features: torch.Tensor, embedding: torch.Tensor, channels: int, embed_dim: int):
    if features.dim() != 5:
        raise FusionShapeError(f"expected a rank-5 feature map (B, C, D, H, W), got shape {tuple(features.shape)}")
    if features.shape[1] != channels:
        raise FusionShapeError(f"channel mismatch: expected C={channels}, got C={features.shape[1]}")
    if embedding.dim() != 2 or embedding.shape[1] != embed_dim:
        raise FusionShapeError(f"expected embedding of shape (B, {embed_dim}), got {tuple(embedding.shape)}")
    if embedding.shape[0] != features.shape[0]:
        raise FusionShapeError(f"batch mismatch: features B={features.shape[0]}, embedding B={embedding.shape[0]}")


class _MLP(nn.Sequential):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, out_bias: float):
        super().__init__(nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, out_dim))
        nn.init.zeros_(self[2].weight)
        nn.init.constant_(self[2].bias, out_bias)


class AffineFusion(nn.Module):
    """out = gamma(emb) * x + theta(emb), gamma/theta broadcast over space.

    The output layers start at gamma == 1, theta == 0, so a fresh unit is the
    identity.
    """

    def __init__(self, channels: int, embed_dim: int, hidden: int | None = None):
        super().__init__()
        self.channels = channels
        self.embed_dim = embed_dim
        hidden = hidden or max(channels, 32)
        self.mlp_gamma = _MLP(embed_dim, hidden, channels, 1.0)
        self.mlp_theta = _MLP(embed_dim, hidden, channels, 0.0)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        _check(x, emb, self.channels, self.embed_dim)
        gamma = self.mlp_gamma(emb)[:, :, None, None, None]
        theta = self.mlp_theta(emb)[:, :, None, None, None]
        return gamma * x + theta


class AffineFusionBlock(nn.Module):
    """fuse -> 3D conv -> fuse, with independent parameters for the two fuses.

    The convolution is applied as a residual ``x + conv(x)`` with zero-initialised
    weights, which makes the whole block exactly the identity at init.
    """

    def __init__(self, channels: int, embed_dim: int, hidden: int | None = None):
        super().__init__()
        self.channels = channels
        self.embed_dim = embed_dim
        self.fuse1 = AffineFusion(channels, embed_dim, hidden)
        self.conv = nn.Conv3d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)
        self.fuse2 = AffineFusion(channels, embed_dim, hidden)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.fuse1(x, emb)
        h = h + self.conv(h)
        return self.fuse2(h, emb)


class CrossAttentionFusion(nn.Module):
    """Spatial attention with a single text-derived key per sample.

    weights[b, n] = softmax_n(q[b, :, n] . k[b, :] / sqrt(d_k)); the output at
    position n is weights[b, n] * v[b, :, n] (one weight shared across
    channels), plus the input when ``residual`` is set.
    """

    def __init__(self, channels: int, embed_dim: int, key_dim: int | None = None, residual: bool = True):
        super().__init__()
        self.channels = channels
        self.embed_dim = embed_dim
        self.key_dim = key_dim or channels
        self.residual = residual
        self.conv_q = nn.Conv3d(channels, self.key_dim, 1)
        self.w_k = nn.Linear(embed_dim, self.key_dim)
        self.conv_v = nn.Conv3d(channels, channels, 1)
        self.scale = 1.0 / math.sqrt(self.key_dim)

    def attention_weights(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        """(B, D*H*W) softmax weights over flattened positions."""
        _check(x, emb, self.channels, self.embed_dim)
        q = self.conv_q(x).flatten(2)  # B, Ck, N
        k = self.w_k(emb)  # B, Ck
        logits = torch.einsum("bcn,bc->bn", q, k) * self.scale
        return F.softmax(logits, dim=-1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        w = self.attention_weights(x, emb)
        v = self.conv_v(x)
        out = v * w.view(x.shape[0], 1, *x.shape[2:])
        return out + x if self.residual else out


def affine_fuse(features: torch.Tensor, embedding: torch.Tensor, params: AffineFusionBlock | AffineFusion) -> torch.Tensor:
    return params(features, embedding)


def cross_attention_fuse(features: torch.Tensor, embedding: torch.Tensor, params: CrossAttentionFusion) -> torch.Tensor:
    return params(features, embedding)


def make_fusion_layer(kind: str, channels: int, embed_dim: int, key_dim: int | None = None,
                      residual: bool = True) -> nn.Module:
    if channels <= 0 or embed_dim <= 0:
        raise ConfigError(f"channel counts must be positive (channels={channels}, embed_dim={embed_dim})")
    if kind == "affine":
        return AffineFusionBlock(channels, embed_dim)
    if kind == "cross_attention":
        return CrossAttentionFusion(channels, embed_dim, key_dim, residual)
    raise ConfigError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")


def make_fusion_stack(kind: str, levels: list[int], embed_dim: int, key_dim: int | None = None,
                      residual: bool = True) -> nn.ModuleList:
    """One independently parameterised layer per channel count in ``levels``."""
    if not levels:
        raise ConfigError("fusion stack needs at least one level")
    return nn.ModuleList(make_fusion_layer(kind, c, embed_dim, key_dim, residual) for c in levels)
