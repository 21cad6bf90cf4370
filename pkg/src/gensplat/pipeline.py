"""Scene-level procedures: splat conditioning for chained generation,
autoregressive multi-segment synthesis, and per-scene refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .diffusion import LatentFrame, euler_sample, latent_decode, latent_encode, sigma_schedule
from .errors import NoValidPixelsError
from .geometry import Camera, pixel_center_grid, unproject_pixels
from .model import Denoiser, EpipolarGeometry, assemble_input, latent_cameras
from .model.denoiser import SplatPrediction
from .rendering import rasterize, rasterize_torch
from .scene import SplatScene
from .seeding import derive_rng, derive_seed


# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------

@dataclass
class ConditionedScene:
    """Splats whose feature vectors are image latents, used to render the
    condition slots of later generation steps."""

    scene: SplatScene
    covered: list = field(default_factory=list)  # cameras merged so far
    step: int = 0

    @property
    def latent_dim(self) -> int:
        return self.scene.feature_dim


def condition_splats(
    latents: np.ndarray,
    depths: np.ndarray,
    cams: list[Camera],
    mask: np.ndarray | None = None,
) -> ConditionedScene:
    """One splat per latent pixel carrying the latent as its feature.

    latents [F, h, w, C]; depths [F, h, w] (camera-space z per frame); cams
    are the latent-resolution cameras. The isotropic scale depth/fx makes a
    re-rendered splat cover about one pixel in its source view. Pixels with
    non-finite or non-positive depth (or mask False) produce no splats.
    """
    latents = np.asarray(latents, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    Fn, h, w, C = latents.shape
    grid = pixel_center_grid(w, h).reshape(-1, 2)
    means, scales, feats = [], [], []
    for f in range(Fn):
        cam = cams[f]
        d = depths[f].reshape(-1)
        keep = np.isfinite(d) & (d > 0)
        if mask is not None:
            keep &= np.asarray(mask[f]).reshape(-1)
        if not np.any(keep):
            continue
        means.append(unproject_pixels(cam, grid[keep], d[keep]))
        s = (d[keep] / cam.fx)[:, None].repeat(3, axis=1)
        scales.append(s)
        feats.append(latents[f].reshape(-1, C)[keep])
    if not means:
        raise NoValidPixelsError("no latent pixel had a usable depth")
    n = sum(len(m) for m in means)
    scene = SplatScene(
        means=np.concatenate(means),
        scales=np.concatenate(scales),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacities=np.ones(n),
        colors=np.zeros((n, 3)),
        features=np.concatenate(feats),
    )
    return ConditionedScene(scene=scene, covered=list(cams))


def render_condition(
    cond: ConditionedScene, cams: list[Camera]
) -> tuple[np.ndarray, np.ndarray]:
    """Render the conditioning splats into per-view latent grids.

    Returns (grids [n, h, w, C], masks [n, h, w]) with masks the accumulated
    alpha; these grids populate the target condition slots.
    """
    h, w = cams[0].height, cams[0].width
    grids = np.zeros((len(cams), h, w, cond.latent_dim))
    masks = np.zeros((len(cams), h, w))
    if len(cond.scene) == 0:
        return grids, masks
    for i, cam in enumerate(cams):
        out = rasterize(cond.scene, cam, w, h)
        grids[i] = out.feature
        masks[i] = out.alpha
    return grids, masks


# ---------------------------------------------------------------------------
# prediction -> scene
# ---------------------------------------------------------------------------

def prediction_to_scene(pred: SplatPrediction) -> SplatScene:
    return SplatScene(
        means=pred.means.detach().numpy().astype(np.float64),
        scales=pred.scales.detach().numpy().astype(np.float64),
        quats=pred.quats.detach().numpy().astype(np.float64),
        opacities=pred.opacities.detach().numpy().astype(np.float64),
        colors=pred.colors.detach().numpy().astype(np.float64),
        features=pred.features.detach().numpy().astype(np.float64),
    )


# ---------------------------------------------------------------------------
# autoregressive chaining
# ---------------------------------------------------------------------------

@dataclass
class ChainResult:
    scene: SplatScene            # union of decoded splats over all segments
    cond_scene: ConditionedScene
    images: np.ndarray           # [T, H, W, 3] in trajectory order
    cams: list[Camera]
    frame_segment: np.ndarray    # segment index per trajectory frame (-1: ref)


def _segment_latents(model, cfg, ref_lat, ref_cams, target_cams, cond_grids, seed):
    """Sample the target latents of one segment (refs at both ends)."""
    dcfg = cfg.diffusion
    cams = [ref_cams[0]] + list(target_cams) + [ref_cams[1]]
    cams_lat = latent_cameras(cams, cfg.diffusion.latent_factor)
    geom = EpipolarGeometry.build(cams_lat, cfg.model.epi_samples)
    L = len(target_cams)
    h, w = cams_lat[0].height, cams_lat[0].width
    C = cfg.model.latent_channels
    sched = sigma_schedule(dcfg.steps, dcfg.sigma_min, dcfg.sigma_max, dcfg.rho)

    def denoise_fn(z, sig, cond):
        refs = [
            LatentFrame(ref_lat[0], "reference", index=0),
            LatentFrame(ref_lat[1], "reference", index=L + 1),
        ]
        targets = []
        for i in range(L):
            cgrid = None if cond is None else cond.get(i)
            targets.append(LatentFrame(z[i], "target", sigma=sig, cond=cgrid, index=i + 1))
        if cond is None:
            for fr in refs + targets:
                fr.cond = np.zeros_like(fr.cond)
        x, sigmas, is_ref = assemble_input(refs, targets)
        gen = torch.Generator().manual_seed(
            derive_seed(seed, f"chain/noise/{float(sig):.6e}") ^ (0 if cond is None else 1)
        )
        with torch.no_grad():
            res = model.denoise_full(x, sigmas, is_ref, cams, rng=gen, geom=geom)
        return res.denoised[torch.from_numpy(~is_ref)].permute(0, 2, 3, 1).numpy().astype(np.float64)

    cond = cond_grids if cond_grids else {}
    z = euler_sample(
        denoise_fn, (L, h, w, C), sched, guidance_scale=dcfg.guidance_scale,
        rng=np.random.default_rng(derive_seed(seed, "chain/init")), cond=cond,
    )
    # decode the full segment's 3D scene from noise-free features
    all_lat = np.stack([ref_lat[0]] + [z[i] for i in range(L)] + [ref_lat[1]])
    frames = [LatentFrame(ref_lat[0], "reference", index=0),
              LatentFrame(ref_lat[1], "reference", index=L + 1)]
    targets = [LatentFrame(z[i], "target", sigma=0.0, index=i + 1) for i in range(L)]
    x, sigmas, is_ref = assemble_input(frames, targets)
    with torch.no_grad():
        h_dec = model.backbone_features(x, sigmas, cams_lat)
        epi = model.epi_features(h_dec, geom)
        decoded = model.decode3d(epi, cams)
        lat_pred = model.predict_splats(epi, cams_lat, depth_supervised=True, rng=None)
    M = len(cams)
    depth_lat = lat_pred.depths.reshape(M, h * w).numpy().reshape(M, h, w)
    return z, all_lat, cams, cams_lat, decoded, depth_lat


def autoregressive_generate(
    model: Denoiser,
    cfg: RunConfig,
    ref_images: np.ndarray,
    ref_cams: list[Camera],
    segments: list[list[Camera]],
    seed: int,
) -> ChainResult:
    """Chain segment generation over consecutive reference pairs.

    Segment i spans (ref_i, ref_{i+1}); its targets' condition slots are
    rendered from the conditioning scene accumulated so far (zero for the
    first segment). Decoded splats are merged by union; conditioning splats
    carry the predicted latents.
    """
    assert len(ref_images) >= 2 and len(segments) == len(ref_images) - 1
    factor = cfg.diffusion.latent_factor
    ref_lat = [latent_encode(img, factor) for img in ref_images]

    cond_scene: ConditionedScene | None = None
    out_scenes = []
    traj_images = []
    traj_cams = []
    frame_segment = []
    for s, seg_cams in enumerate(segments):
        cams_lat_target = latent_cameras(seg_cams, factor)
        cond_grids = None
        if cond_scene is not None and len(cond_scene.scene) > 0:
            grids, _ = render_condition(cond_scene, cams_lat_target)
            cond_grids = {i: grids[i] for i in range(len(seg_cams))}
        z, all_lat, cams, cams_lat, decoded, depth_lat = _segment_latents(
            model, cfg, (ref_lat[s], ref_lat[s + 1]), (ref_cams[s], ref_cams[s + 1]),
            seg_cams, cond_grids, derive_seed(seed, f"segment/{s}"),
        )
        out_scenes.append(prediction_to_scene(decoded))
        new_cond = condition_splats(all_lat, depth_lat, cams_lat)
        if cond_scene is None:
            cond_scene = new_cond
            cond_scene.step = 1
        else:
            cond_scene = ConditionedScene(
                scene=SplatScene.concatenate([cond_scene.scene, new_cond.scene]),
                covered=cond_scene.covered + new_cond.covered,
                step=cond_scene.step + 1,
            )
        # trajectory order: ref_s, targets...; the closing ref belongs to the
        # next segment except for the last one
        traj_images.append(ref_images[s][None])
        frame_segment.append(-1)
        for i in range(len(seg_cams)):
            traj_images.append(latent_decode(z[i], factor)[None])
            frame_segment.append(s)
        traj_cams.extend([ref_cams[s]] + list(seg_cams))
    traj_images.append(ref_images[-1][None])
    traj_cams.append(ref_cams[-1])
    frame_segment.append(-1)
    return ChainResult(
        scene=SplatScene.concatenate(out_scenes),
        cond_scene=cond_scene,
        images=np.concatenate(traj_images),
        cams=traj_cams,
        frame_segment=np.array(frame_segment),
    )


def overlap_psnr(scene: SplatScene, images: np.ndarray, cams: list[Camera],
                 alpha_threshold: float = 0.95) -> float:
    """PSNR between images and renders of `scene` over well-covered pixels."""
    from .training import psnr

    se, count = 0.0, 0
    for img, cam in zip(images, cams):
        out = rasterize(scene, cam)
        m = out.alpha > alpha_threshold
        if not np.any(m):
            continue
        se += float(((out.color[m] - img[m]) ** 2).sum())
        count += int(m.sum()) * 3
    if count == 0:
        raise NoValidPixelsError("no overlap pixels above the alpha threshold")
    mse = se / count
    return 99.0 if mse <= 1e-10 else min(99.0, float(10 * np.log10(1.0 / mse)))


# ---------------------------------------------------------------------------
# per-scene refinement
# ---------------------------------------------------------------------------

def refine_scene(
    init: SplatScene,
    images: np.ndarray,
    cams: list[Camera],
    iters: int = 5000,
    seed: int = 0,
    prune: bool = True,
    prune_every: int = 500,
    prune_alpha: float = 0.01,
) -> SplatScene:
    """Gradient-descent refinement of all splat parameters against image MSE.

    One random training view per iteration; per-group learning rates; plain
    gradient descent. iters=0 returns an unchanged copy. The input scene is
    never mutated.
    """
    if iters == 0 or len(init) == 0:
        return init.copy()
    rng = derive_rng(seed, "refine")
    extent = float(np.linalg.norm(init.means.max(axis=0) - init.means.min(axis=0)))
    extent = max(extent, 1e-6)

    means = torch.tensor(init.means, dtype=torch.float32, requires_grad=True)
    log_scales = torch.tensor(np.log(init.scales), dtype=torch.float32, requires_grad=True)
    quats = torch.tensor(init.quats, dtype=torch.float32, requires_grad=True)
    def _logit(arr):
        clipped = np.clip(arr, 1e-4, 1 - 1e-4)
        return np.log(clipped / (1 - clipped))

    logit_op = torch.tensor(_logit(init.opacities), dtype=torch.float32, requires_grad=True)
    logit_col = torch.tensor(_logit(init.colors), dtype=torch.float32, requires_grad=True)
    features = torch.tensor(init.features, dtype=torch.float32)
    keep_mask = np.ones(len(init), dtype=bool)

    opt = torch.optim.SGD([
        {"params": [means], "lr": 1e-3 * extent},
        {"params": [log_scales, quats, logit_op], "lr": 1e-2},
        {"params": [logit_col], "lr": 5e-3},
    ])
    gt = [torch.from_numpy(img).float() for img in images]
    for it in range(iters):
        v = int(rng.integers(len(cams)))
        color, _, _, _ = rasterize_torch(
            means, torch.exp(log_scales), quats, torch.sigmoid(logit_op),
            torch.sigmoid(logit_col), features, cams[v],
        )
        loss = (color - gt[v]).square().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if prune and (it + 1) % prune_every == 0:
            with torch.no_grad():
                alive = (torch.sigmoid(logit_op) >= prune_alpha).numpy()
            keep_mask &= alive
            with torch.no_grad():
                logit_op[~torch.from_numpy(keep_mask)] = -12.0  # effectively off

    with torch.no_grad():
        q = quats / torch.linalg.norm(quats, dim=1, keepdim=True)
        refined = SplatScene(
            means=means.numpy().astype(np.float64),
            scales=np.exp(log_scales.numpy()).astype(np.float64),
            quats=q.numpy().astype(np.float64),
            opacities=torch.sigmoid(logit_op).numpy().astype(np.float64),
            colors=torch.sigmoid(logit_col).numpy().astype(np.float64),
            features=features.numpy().astype(np.float64),
        )
    if prune:
        refined = refined.subset(keep_mask)
    return refined
