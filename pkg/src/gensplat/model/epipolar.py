"""Epipolar transformer: per-pixel queries attend to feature samples taken
along the pixel's epipolar line in the two neighboring frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from ..geometry import Camera, epipolar_sample_grid, pixel_center_grid
from .sampler import bilinear_corners, fixed_grid_sample


@dataclass
class EpipolarGeometry:
    """Precomputed epipolar sampling pattern for one camera trajectory.

    For every frame and both neighbor slots (0: previous, 1: next) the
    bilinear corner indices/weights of the line samples are prebuilt;
    weights are zeroed for lines that miss the neighbor image and for
    missing neighbors at the trajectory ends. Built once per trajectory.
    """

    corner_idx: torch.Tensor   # [2M, P*S, 4] flat pixel indices in the neighbor
    corner_wgt: torch.Tensor   # [2M, P*S, 4] bilinear weights (0 = dead sample)
    nbr_idx: torch.Tensor      # [2M] which frame each stacked row samples from
    valid: torch.Tensor        # [M, 2, P] usable-line flags
    n_samples: int

    @staticmethod
    def build(cams: list[Camera], n_samples: int) -> "EpipolarGeometry":
        M = len(cams)
        h, w = cams[0].height, cams[0].width
        P = h * w
        pixels = pixel_center_grid(w, h).reshape(-1, 2)
        idx = np.zeros((2, M, P * n_samples, 4), dtype=np.int64)
        wgt = np.zeros((2, M, P * n_samples, 4), dtype=np.float32)
        valid = np.zeros((M, 2, P), dtype=bool)
        nbr = np.zeros((2, M), dtype=np.int64)
        for m in range(M):
            for slot, n_ in ((0, m - 1), (1, m + 1)):
                nbr[slot, m] = min(max(n_, 0), M - 1)
                if n_ < 0 or n_ >= M:
                    continue
                pts, ok = epipolar_sample_grid(cams[m], cams[n_], pixels, n_samples)
                ci, cw = bilinear_corners(pts, cams[n_].width, cams[n_].height)
                cw *= ok[:, None, None].astype(np.float32)
                idx[slot, m] = ci.reshape(P * n_samples, 4)
                wgt[slot, m] = cw.reshape(P * n_samples, 4)
                valid[m, slot] = ok
        return EpipolarGeometry(
            corner_idx=torch.from_numpy(idx.reshape(2 * M, P * n_samples, 4)),
            corner_wgt=torch.from_numpy(wgt.reshape(2 * M, P * n_samples, 4)),
            nbr_idx=torch.from_numpy(nbr.reshape(2 * M)),
            valid=torch.from_numpy(valid),
            n_samples=n_samples,
        )

    def sample_mask(self) -> torch.Tensor:
        """[M, P, 2S]: sample is usable (line hit the image and neighbor exists)."""
        M, _, P = self.valid.shape
        ok = self.valid[:, :, :, None].expand(M, 2, P, self.n_samples)
        return ok.permute(0, 2, 1, 3).reshape(M, P, 2 * self.n_samples)


class EpipolarBlock(nn.Module):
    """Cross-view attention along epipolar lines, then a pointwise MLP.

    Keys/values are projected per source pixel and then bilinearly sampled
    (projection commutes with interpolation), which avoids projecting every
    line sample separately.
    """

    def __init__(self, dim: int, heads: int, kv_dim: int = 32):
        super().__init__()
        self.heads = heads
        self.kv_dim = kv_dim
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, kv_dim)
        self.k = nn.Linear(dim, kv_dim)
        self.v = nn.Linear(dim, kv_dim)
        self.out = nn.Linear(kv_dim, dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.null_token = nn.Parameter(torch.zeros(dim))
        self.mlp = nn.Sequential(
            nn.LayerNorm(dim), nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )

    def forward(self, tokens: torch.Tensor, geom: EpipolarGeometry) -> torch.Tensor:
        M, P, D = tokens.shape
        S = geom.n_samples
        kv = self.kv_dim
        dh = kv // self.heads

        normed = self.norm_kv(tokens)
        kv_map = torch.cat([self.k(normed), self.v(normed)], dim=2)  # [M, P, 2kv]
        stacked = kv_map[geom.nbr_idx]                               # [2M, P, 2kv]
        sampled = fixed_grid_sample(stacked, geom.corner_idx, geom.corner_wgt)
        sampled = sampled.reshape(2, M, P, S, 2 * kv).permute(1, 2, 0, 3, 4)
        sampled = sampled.reshape(M, P, 2 * S, 2 * kv)
        k_s, v_s = sampled[..., :kv], sampled[..., kv:]

        null_n = self.norm_kv(self.null_token)
        k_all = torch.cat([k_s, self.k(null_n).expand(M, P, 1, kv)], dim=2)
        v_all = torch.cat([v_s, self.v(null_n).expand(M, P, 1, kv)], dim=2)
        mask = torch.cat(
            [geom.sample_mask(), torch.ones(M, P, 1, dtype=torch.bool)], dim=2
        )

        q = self.q(self.norm_q(tokens)).reshape(M, P, self.heads, dh)
        k_h = k_all.reshape(M, P, -1, self.heads, dh)
        v_h = v_all.reshape(M, P, -1, self.heads, dh)
        scores = (q.unsqueeze(2) * k_h).sum(-1) / dh**0.5            # [M, P, 2S+1, h]
        scores = scores.masked_fill(~mask[..., None], float("-inf"))
        att = torch.softmax(scores, dim=2)
        mixed = (att.unsqueeze(-1) * v_h).sum(2)                     # [M, P, h, dh]
        tokens = tokens + self.out(mixed.reshape(M, P, kv))
        return tokens + self.mlp(tokens)


class EpipolarTransformer(nn.Module):
    """Stack of epipolar attention blocks over per-frame feature grids."""

    def __init__(self, dim: int, blocks: int = 2, heads: int = 4, n_samples: int = 32):
        super().__init__()
        self.n_samples = n_samples
        self.blocks = nn.ModuleList(EpipolarBlock(dim, heads) for _ in range(blocks))

    def forward(self, feats: torch.Tensor, geom: EpipolarGeometry) -> torch.Tensor:
        # feats: [M, D, H, W] -> refined [M, D, H, W]
        M, D, H, W = feats.shape
        tokens = feats.permute(0, 2, 3, 1).reshape(M, H * W, D)
        for block in self.blocks:
            tokens = block(tokens, geom)
        return tokens.reshape(M, H, W, D).permute(0, 3, 1, 2)
