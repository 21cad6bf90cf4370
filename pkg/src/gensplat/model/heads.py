"""Prediction heads: per-pixel depth distribution, opacity, splat parameters,
the v-space refinement block, and the image-resolution 3D decoder."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class DepthHead(nn.Module):
    """Two linear layers -> (disparity mean in (0,1), variance > 0)."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, 2)
        # start near mid-range disparity with small variance
        nn.init.zeros_(self.fc2.weight)
        with torch.no_grad():
            self.fc2.bias.copy_(torch.tensor([0.0, -4.0]))

    def forward(self, feats):
        h = self.fc2(F.relu(self.fc1(feats)))
        mean = torch.sigmoid(h[..., 0])
        var = F.softplus(h[..., 1])
        return mean, var


class OpacityHead(nn.Module):
    """Maps a sampled disparity to opacity; 4 linear layers, ReLU, sigmoid."""

    def __init__(self, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(1, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1),
        )
        # bias toward opaque splats at init
        nn.init.zeros_(self.net[-1].weight)
        with torch.no_grad():
            self.net[-1].bias.fill_(2.0)

    def forward(self, disparity):
        return torch.sigmoid(self.net(disparity[..., None]))[..., 0]


class GaussianHead(nn.Module):
    """Single linear layer -> scale, rotation, color, feature, pixel offset."""

    def __init__(self, dim: int, feature_dim: int, scale_ref: float = 0.15):
        super().__init__()
        self.feature_dim = feature_dim
        self.scale_ref = scale_ref
        self.fc = nn.Linear(dim, 3 + 4 + 3 + feature_dim + 2)

    def forward(self, feats):
        out = self.fc(feats)
        Fdim = self.feature_dim
        scale = 1e-4 + self.scale_ref * F.softplus(out[..., 0:3])
        quat = out[..., 3:7] + out.new_tensor([1.0, 0.0, 0.0, 0.0])
        quat = F.normalize(quat, dim=-1)
        color = torch.sigmoid(out[..., 7:10])
        feature = out[..., 10:10 + Fdim]
        offset = 0.5 * torch.tanh(out[..., 10 + Fdim:12 + Fdim])
        return scale, quat, color, feature, offset


class VRefiner(nn.Module):
    """Projects rendered feature maps to v-space and adds a zero-initialized
    residual that sees both the rendered features and the backbone stream."""

    def __init__(self, render_dim: int, skip_dim: int, out_dim: int):
        super().__init__()
        self.proj = nn.Conv2d(render_dim, out_dim, 1)
        self.residual = nn.Sequential(
            nn.Conv2d(render_dim + skip_dim, 64, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(64, out_dim, 3, padding=1),
        )
        nn.init.zeros_(self.residual[-1].weight)
        nn.init.zeros_(self.residual[-1].bias)

    def forward(self, rendered, skip):
        return self.proj(rendered) + self.residual(torch.cat([rendered, skip], dim=1))


class DirectVHead(nn.Module):
    """Ablation head: v-space prediction straight from the backbone stream,
    bypassing the 3D representation."""

    def __init__(self, skip_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(skip_dim, 64, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(64, out_dim, 3, padding=1),
        )

    def forward(self, skip):
        return self.net(skip)


class _UpBlock(nn.Module):
    """Replication-padded conv + nearest-neighbor x2 upsampling."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1, padding_mode="replicate")

    def forward(self, x):
        return F.interpolate(F.silu(self.conv(x)), scale_factor=2, mode="nearest")


class DecoderUpsampler(nn.Module):
    """Lifts epipolar feature grids to image resolution (x4)."""

    def __init__(self, in_dim: int, channels: tuple):
        super().__init__()
        c0, c1 = channels
        self.up1 = _UpBlock(in_dim, c0)
        self.up2 = _UpBlock(c0, c1)
        self.out = nn.Conv2d(c1, c1, 3, padding=1, padding_mode="replicate")
        self.out_dim = c1

    def forward(self, x):
        return F.silu(self.out(self.up2(self.up1(x))))
