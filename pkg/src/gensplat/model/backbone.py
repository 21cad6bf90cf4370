"""Per-frame conv U-Net with a cross-frame attention bottleneck, plus the
noise-level embedding and the multi-scale camera (ray map) embedder."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class NoiseEmbedding(nn.Module):
    """Fourier features of the preconditioned noise level -> time vector."""

    def __init__(self, dim: int, n_freqs: int = 32):
        super().__init__()
        self.register_buffer("freqs", 2.0 ** torch.arange(n_freqs).float())
        self.mlp = nn.Sequential(
            nn.Linear(2 * n_freqs, dim), nn.SiLU(), nn.Linear(dim, dim)
        )

    def forward(self, c_noise: torch.Tensor) -> torch.Tensor:
        # c_noise: [M]
        ang = c_noise[:, None] * self.freqs[None, :]
        return self.mlp(torch.cat([torch.sin(ang), torch.cos(ang)], dim=1))


class ResBlock(nn.Module):
    def __init__(self, channels: int, time_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.temb = nn.Linear(time_dim, channels)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class CrossFrameAttention(nn.Module):
    """Full attention over all frames' spatial tokens at the bottleneck."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.out = nn.Linear(channels, channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        # x: [M, C, H, W]; the frame axis is folded into one token sequence,
        # so the block is equivariant to frame permutations
        M, C, H, W = x.shape
        h = self.norm(x).permute(0, 2, 3, 1).reshape(1, M * H * W, C)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        dh = C // self.heads

        def split(t):
            return t.reshape(1, -1, self.heads, dh).transpose(1, 2)

        att = F.scaled_dot_product_attention(split(q), split(k), split(v))
        att = att.transpose(1, 2).reshape(1, M * H * W, C)
        out = self.out(att).reshape(M, H, W, C).permute(0, 3, 1, 2)
        return x + out


class CameraEmbedder(nn.Module):
    """Encodes per-pixel ray maps into one embedding per backbone scale."""

    def __init__(self, channels: tuple):
        super().__init__()
        c0, c1, c2 = channels
        self.stem = nn.Sequential(
            nn.Conv2d(6, c0 // 2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c0 // 2, c0, 3, padding=1),
        )
        self.down1 = nn.Sequential(nn.SiLU(), nn.Conv2d(c0, c1, 3, stride=2, padding=1))
        self.down2 = nn.Sequential(nn.SiLU(), nn.Conv2d(c1, c2, 3, stride=2, padding=1))

    def forward(self, pluckers: torch.Tensor) -> list[torch.Tensor]:
        # pluckers: [M, 6, H, W]
        e0 = self.stem(pluckers)
        e1 = self.down1(e0)
        e2 = self.down2(e1)
        return [e0, e1, e2]


class Backbone(nn.Module):
    """3-level U-Net over per-frame latent stacks.

    Frames ride the batch axis; cross-frame mixing happens through full
    attention at the bottleneck and at the middle scale (one attention at
    the bottleneck alone starves the far frames of reference content when
    only one view is clean). Camera embeddings are added at matching scales.
    """

    def __init__(self, in_channels: int, channels: tuple, time_dim: int):
        super().__init__()
        c0, c1, c2 = channels
        self.conv_in = nn.Conv2d(in_channels, c0, 3, padding=1)
        self.enc0 = ResBlock(c0, time_dim)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = ResBlock(c1, time_dim)
        self.attn1 = CrossFrameAttention(c1)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c2, time_dim)
        self.attn = CrossFrameAttention(c2)
        self.mid2 = ResBlock(c2, time_dim)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec1 = ResBlock(c1, time_dim)
        self.fuse1 = nn.Conv2d(2 * c1, c1, 1)
        self.attn2 = CrossFrameAttention(c1)
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec0 = ResBlock(c0, time_dim)
        self.fuse0 = nn.Conv2d(2 * c0, c0, 1)

    def forward(self, x, temb, cam_embs):
        h0 = self.enc0(self.conv_in(x) + cam_embs[0], temb)
        h1 = self.enc1(self.down1(F.silu(h0)) + cam_embs[1], temb)
        h1 = self.attn1(h1)
        h2 = self.mid1(self.down2(F.silu(h1)) + cam_embs[2], temb)
        h2 = self.attn(h2)
        h2 = self.mid2(h2, temb)
        u1 = self.up1(F.interpolate(h2, scale_factor=2, mode="nearest"))
        u1 = self.dec1(self.fuse1(torch.cat([u1, h1], dim=1)), temb)
        u1 = self.attn2(u1)
        u0 = self.up0(F.interpolate(u1, scale_factor=2, mode="nearest"))
        u0 = self.dec0(self.fuse0(torch.cat([u0, h0], dim=1)), temb)
        return u0
