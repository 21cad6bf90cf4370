"""The denoiser: channel-concatenated frame sequence in, per-frame denoised
latents plus an explicit splat scene out.

Pipeline per call: preconditioned inputs -> camera-conditioned U-Net ->
epipolar transformer -> depth/opacity/splat heads -> differentiable splat
rendering at latent resolution -> v-refinement -> preconditioned output.
A separate decoder lifts the epipolar features to image-resolution splats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from ..config import ModelConfig
from ..diffusion import LatentFrame, precondition
from ..errors import BadConfigError, ShapeMismatchError
from ..geometry import Camera, plucker_map
from ..rendering import rasterize_torch
from .backbone import Backbone, CameraEmbedder, NoiseEmbedding
from .epipolar import EpipolarGeometry, EpipolarTransformer
from .heads import (
    DecoderUpsampler,
    DepthHead,
    DirectVHead,
    GaussianHead,
    OpacityHead,
    VRefiner,
)


def assemble_input(
    refs: list[LatentFrame], targets: list[LatentFrame]
) -> tuple[torch.Tensor, np.ndarray, np.ndarray]:
    """Channel-concatenate [own latent, condition slot] per frame.

    Frames are ordered by their trajectory index. Returns (x [M, 2C, h, w]
    float32, sigmas [M], is_ref [M]).
    """
    frames = sorted(refs + targets, key=lambda f: f.index)
    if not frames:
        raise ShapeMismatchError("no frames to assemble")
    shape = frames[0].latent.shape
    for f in frames:
        if f.latent.shape != shape:
            raise ShapeMismatchError(f"frame latent {f.latent.shape} != {shape}")
    stack = np.stack(
        [np.concatenate([f.latent, f.cond], axis=2) for f in frames]
    ).astype(np.float32)
    x = torch.from_numpy(stack).permute(0, 3, 1, 2).contiguous()
    sigmas = np.array([f.sigma for f in frames])
    is_ref = np.array([f.is_reference for f in frames])
    return x, sigmas, is_ref


@dataclass
class SplatPrediction:
    """Per-pixel splats flattened across frames (torch tensors, [N, ...])."""

    means: torch.Tensor
    scales: torch.Tensor
    quats: torch.Tensor
    opacities: torch.Tensor
    colors: torch.Tensor
    features: torch.Tensor
    frame_idx: torch.Tensor    # [N] source frame of each splat
    pixel_idx: torch.Tensor    # [N] flat source pixel in that frame
    depths: torch.Tensor       # [N] camera-space depth w.r.t. the source frame
    disp_mean: torch.Tensor    # [M, P]
    disp_var: torch.Tensor     # [M, P]
    offsets: torch.Tensor      # [M, P, 2]

    def __len__(self):
        return len(self.means)


@dataclass
class DenoiseResult:
    denoised: torch.Tensor               # [M, C, h, w]
    v_hat: torch.Tensor                  # [M, C, h, w]
    backbone_features: torch.Tensor      # [M, c0, h, w]
    epi_features: torch.Tensor | None
    prediction: SplatPrediction | None
    renders: dict | None                 # color/feature/alpha/depth stacks


def latent_cameras(cams: list[Camera], factor: int) -> list[Camera]:
    return [c.scaled(1.0 / factor) for c in cams]


def _cam_tensors(cam: Camera, dtype=torch.float32):
    return (
        torch.tensor(cam.R, dtype=dtype),
        torch.tensor(cam.t, dtype=dtype),
        cam.fx, cam.fy, cam.cx, cam.cy,
    )


class Denoiser(nn.Module):
    def __init__(self, config: ModelConfig, latent_factor: int = 4,
                 sigma_data: float = 0.5, sigma_min: float = 0.02):
        super().__init__()
        config.validate()
        self.config = config
        self.latent_factor = latent_factor
        self.sigma_data = sigma_data
        self.sigma_min = sigma_min
        C = config.latent_channels
        c0 = config.backbone_channels[0]
        D = config.epi_dim
        self.noise_emb = NoiseEmbedding(config.time_dim)
        self.camera_embedder = CameraEmbedder(config.backbone_channels)
        self.backbone = Backbone(2 * C, config.backbone_channels, config.time_dim)
        if config.use_3d:
            self.epi_proj = nn.Conv2d(c0, D, 1)
            self.epipolar = EpipolarTransformer(
                D, config.epi_blocks, config.epi_heads, config.epi_samples
            )
            self.depth_head = DepthHead(D)
            self.opacity_head = OpacityHead()
            self.gaussian_head = GaussianHead(D, config.feature_dim, scale_ref=0.15)
            self.v_refiner = VRefiner(config.feature_dim, c0, C)
            self.dec_upsampler = DecoderUpsampler(D, config.decoder_channels)
            du = self.dec_upsampler.out_dim
            self.dec_depth = DepthHead(du)
            self.dec_opacity = OpacityHead()
            # image-resolution pixels subtend 1/factor of a latent pixel
            self.dec_gaussian = GaussianHead(du, config.feature_dim,
                                             scale_ref=0.15 / latent_factor)
        else:
            self.direct_v = DirectVHead(c0, C)

    # -- building blocks ----------------------------------------------------

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def plucker_tensor(self, cams: list[Camera]) -> torch.Tensor:
        maps = np.stack([plucker_map(c) for c in cams])
        return torch.from_numpy(maps).permute(0, 3, 1, 2).contiguous().to(self.dtype)

    def backbone_features(self, x: torch.Tensor, sigmas: np.ndarray,
                          cams_latent: list[Camera]) -> torch.Tensor:
        """Preconditioned input scaling + camera/noise conditioning + U-Net."""
        C = self.config.latent_channels
        pres = [precondition(float(s), self.sigma_data, self.sigma_min) for s in sigmas]
        c_in = torch.tensor([p.c_in for p in pres], dtype=x.dtype)
        c_in0 = precondition(0.0, self.sigma_data, self.sigma_min).c_in
        scaled = torch.cat(
            [x[:, :C] * c_in[:, None, None, None], x[:, C:] * c_in0], dim=1
        )
        c_noise = torch.tensor([p.c_noise for p in pres], dtype=x.dtype)
        temb = self.noise_emb(c_noise)
        cam_embs = self.camera_embedder(self.plucker_tensor(cams_latent))
        return self.backbone(scaled, temb, cam_embs)

    def epi_features(self, h_dec: torch.Tensor, geom: EpipolarGeometry) -> torch.Tensor:
        return self.epipolar(self.epi_proj(h_dec), geom)

    def _assemble_splats(self, feats, cams, depth_samples, rng,
                         depth_head, opacity_head, gaussian_head):
        """Shared splat construction for the latent-res heads and the decoder.

        feats: [M, D, H, W] on the grid matching `cams` resolution.
        """
        M, D, H, W = feats.shape
        P = H * W
        dtype = feats.dtype
        tokens = feats.permute(0, 2, 3, 1).reshape(M, P, D)
        disp_mean, disp_var = depth_head(tokens)          # [M, P]
        scale, quat, color, feature, offset = gaussian_head(tokens)

        iy, ix = torch.meshgrid(torch.arange(H), torch.arange(W), indexing="ij")
        px = (ix.reshape(-1).to(dtype) + 0.5)[None, :] + offset[..., 0]
        py = (iy.reshape(-1).to(dtype) + 0.5)[None, :] + offset[..., 1]

        S = depth_samples
        if rng is None:
            eta = torch.zeros(S, M, P, dtype=dtype)
        else:
            eta = torch.randn(S, M, P, generator=rng, dtype=dtype)
        disp = disp_mean[None] + torch.sqrt(disp_var[None] + 1e-12) * eta  # [S, M, P]
        disp = disp.clamp(1e-3, 1.0)
        d_near, d_far = self.config.d_near, self.config.d_far
        depth = 1.0 / (disp * (1.0 / d_near - 1.0 / d_far) + 1.0 / d_far)
        opacity = opacity_head(disp.reshape(-1)).reshape(S, M, P)

        # every flattened tensor below uses (frame, sample, pixel) order
        means, depths_flat = [], []
        for m, cam in enumerate(cams):
            R, t, fx, fy, cx, cy = _cam_tensors(cam, dtype)
            xc = (px[m] - cx) / fx
            yc = (py[m] - cy) / fy
            z = depth[:, m]                                    # [S, P]
            pc = torch.stack([xc[None] * z, yc[None] * z, z], dim=-1)  # [S, P, 3]
            world = (pc - t) @ R                               # R^T applied per row
            means.append(world.reshape(-1, 3))
            depths_flat.append(z.reshape(-1))

        def tile(t_):  # repeat per-pixel predictions for every depth sample
            expanded = t_.unsqueeze(1).expand(M, S, *t_.shape[1:])
            return expanded.reshape(M * S * P, -1)

        return SplatPrediction(
            means=torch.cat(means, dim=0),
            scales=tile(scale),
            quats=tile(quat),
            opacities=opacity.permute(1, 0, 2).reshape(-1),
            colors=tile(color),
            features=tile(feature),
            frame_idx=torch.arange(M).repeat_interleave(S * P),
            pixel_idx=torch.arange(P).repeat(M * S),
            depths=torch.cat(depths_flat, dim=0),
            disp_mean=disp_mean,
            disp_var=disp_var,
            offsets=offset,
        )

    def predict_splats(self, epi: torch.Tensor, cams_latent: list[Camera],
                       depth_supervised: bool, rng: torch.Generator | None
                       ) -> SplatPrediction:
        """Per-pixel splats at latent resolution; one depth sample per pixel
        under depth supervision, several otherwise (reparameterized)."""
        S = 1 if depth_supervised else self.config.depth_samples
        return self._assemble_splats(
            epi, cams_latent, S, rng, self.depth_head, self.opacity_head,
            self.gaussian_head,
        )

    def render_views(self, pred: SplatPrediction, cams: list[Camera],
                     width: int, height: int) -> dict:
        colors, feats, alphas, depths = [], [], [], []
        for cam in cams:
            c, f, a, d = rasterize_torch(
                pred.means, pred.scales, pred.quats, pred.opacities,
                pred.colors, pred.features, cam, width, height,
            )
            colors.append(c.permute(2, 0, 1))
            feats.append(f.permute(2, 0, 1))
            alphas.append(a)
            depths.append(d)
        return {
            "color": torch.stack(colors),
            "feature": torch.stack(feats),
            "alpha": torch.stack(alphas),
            "depth": torch.stack(depths),
        }

    def refine_v(self, rendered_features: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        """v-space output: 1x1 projection of the rendered feature maps plus a
        zero-initialized residual over [skip, rendered]."""
        if rendered_features.shape[-2:] != skip.shape[-2:]:
            raise ShapeMismatchError(
                f"rendered {tuple(rendered_features.shape)} vs skip {tuple(skip.shape)}"
            )
        return self.v_refiner(rendered_features, skip)

    # -- full passes ----------------------------------------------------------

    def denoise_full(
        self,
        x: torch.Tensor,
        sigmas: np.ndarray,
        is_ref: np.ndarray,
        cams: list[Camera],
        rng: torch.Generator | None = None,
        depth_supervised: bool = False,
        geom: EpipolarGeometry | None = None,
    ) -> DenoiseResult:
        """Run the network on an assembled frame stack.

        Target frames get D = c_skip * z + c_out * v_hat; reference frames
        pass through bit-identically.
        """
        if len(cams) != x.shape[0]:
            raise ShapeMismatchError(f"{x.shape[0]} frames but {len(cams)} cameras")
        C = self.config.latent_channels
        cams_lat = latent_cameras(cams, self.latent_factor)
        h_dec = self.backbone_features(x, sigmas, cams_lat)

        epi = prediction = renders = None
        if self.config.use_3d:
            if geom is None:
                geom = EpipolarGeometry.build(cams_lat, self.config.epi_samples)
            epi = self.epi_features(h_dec, geom)
            prediction = self.predict_splats(epi, cams_lat, depth_supervised, rng)
            h, w = cams_lat[0].height, cams_lat[0].width
            renders = self.render_views(prediction, cams_lat, w, h)
            v_hat = self.refine_v(renders["feature"], h_dec)
        else:
            v_hat = self.direct_v(h_dec)

        pres = [precondition(float(s), self.sigma_data, self.sigma_min) for s in sigmas]
        c_skip = torch.tensor([p.c_skip for p in pres], dtype=x.dtype)
        c_out = torch.tensor([p.c_out for p in pres], dtype=x.dtype)
        z_own = x[:, :C]
        denoised = c_skip[:, None, None, None] * z_own + c_out[:, None, None, None] * v_hat
        ref_mask = torch.tensor(is_ref, dtype=torch.bool)
        denoised = torch.where(ref_mask[:, None, None, None], z_own, denoised)
        return DenoiseResult(
            denoised=denoised,
            v_hat=v_hat,
            backbone_features=h_dec,
            epi_features=epi,
            prediction=prediction,
            renders=renders,
        )

    def decode3d(self, epi: torch.Tensor, cams: list[Camera],
                 rng: torch.Generator | None = None) -> SplatPrediction:
        """Image-resolution per-pixel splats from (noise-free) epipolar
        features; one splat per pixel."""
        if not self.config.use_3d:
            raise BadConfigError("decode3d requires the 3D pathway")
        up = self.dec_upsampler(epi)
        return self._assemble_splats(
            up, cams, 1, rng, self.dec_depth, self.dec_opacity, self.dec_gaussian
        )


def parameter_manifest(model: nn.Module) -> dict[str, tuple]:
    return {name: tuple(p.shape) for name, p in model.state_dict().items()}


def init_denoiser(config: ModelConfig, seed: int, latent_factor: int = 4,
                  sigma_data: float = 0.5, sigma_min: float = 0.02) -> Denoiser:
    """Deterministic construction: same seed, same weights."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = Denoiser(config, latent_factor, sigma_data, sigma_min)
    return model
