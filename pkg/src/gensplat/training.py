"""Training harness: procedural scene generation, losses, the optimizer
loop, decoder training at noise level zero, and reconstruction metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .diffusion import (
    LatentFrame,
    latent_decode,
    latent_encode,
    precondition,
    sample_training_sigma,
    sigma_schedule,
    v_target,
)
from .errors import BadParamsError, NoValidPixelsError, NonFiniteLossError, ShapeMismatchError
from .geometry import Camera, look_at_camera
from .model import Denoiser, EpipolarGeometry, assemble_input, latent_cameras
from .rendering import rasterize
from .scene import SplatScene
from .seeding import derive_rng, derive_seed


# ---------------------------------------------------------------------------
# procedural scenes
# ---------------------------------------------------------------------------

@dataclass
class SyntheticScene:
    """Ground-truth splat scene with a smooth camera arc and exact renders."""

    scene: SplatScene
    cams: list[Camera]            # M trajectory poses
    novel_cams: list[Camera]      # J extra poses between the targets
    images: np.ndarray            # [M, H, W, 3]
    depths: np.ndarray            # [M, H, W] expected camera-space z
    alphas: np.ndarray            # [M, H, W]
    novel_images: np.ndarray      # [J, H, W, 3]
    seed: int


def _catmull_rom(points: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Centripetal-free (uniform) Catmull-Rom through `points`, clamped ends.

    ts in [0, 1] spans the whole chain of len(points)-1 segments.
    """
    pts = np.concatenate([points[:1], points, points[-1:]], axis=0)
    n_seg = len(points) - 1
    out = np.zeros((len(ts), points.shape[1]))
    for i, t in enumerate(np.clip(ts, 0.0, 1.0)):
        s = min(int(t * n_seg), n_seg - 1)
        u = t * n_seg - s
        p0, p1, p2, p3 = pts[s], pts[s + 1], pts[s + 2], pts[s + 3]
        out[i] = 0.5 * (
            (2 * p1)
            + (-p0 + p2) * u
            + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u**2
            + (-p0 + 3 * p1 - 3 * p2 + p3) * u**3
        )
    return out


def gen_scene(
    seed: int,
    n_splats: int = 48,
    frames: int = 8,
    novel: int = 6,
    image_size: int = 64,
    arc_degrees: float = 40.0,
) -> SyntheticScene:
    """Random splats in a 2x2x2 box viewed from a smooth spline arc.

    Deterministic per seed. The J novel poses sit between consecutive
    target poses on the same spline.
    """
    if n_splats < 1 or frames < 2:
        raise BadParamsError(f"need n_splats >= 1 and frames >= 2, got {n_splats}, {frames}")
    rng = derive_rng(seed, "scene")
    quats = rng.standard_normal((n_splats, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    splats = SplatScene(
        means=rng.uniform(-1.0, 1.0, (n_splats, 3)),
        scales=rng.uniform(0.08, 0.35, (n_splats, 3)),
        quats=quats,
        opacities=rng.uniform(0.5, 1.0, n_splats),
        colors=rng.uniform(0.05, 1.0, (n_splats, 3)),
        features=np.zeros((n_splats, 1)),
    )

    # 4 control points on a shell sector facing the box
    arc = np.deg2rad(arc_degrees)
    base = rng.uniform(0, 2 * np.pi)
    angles = base + np.sort(rng.uniform(-arc / 2, arc / 2, 4))
    elev = rng.uniform(-0.25, 0.25, 4)
    radius = rng.uniform(3.2, 4.2, 4)
    control = np.stack(
        [
            radius * np.cos(elev) * np.sin(angles),
            radius * np.sin(elev),
            radius * np.cos(elev) * np.cos(angles),
        ],
        axis=1,
    )
    t_main = np.linspace(0.02, 0.98, frames)
    gaps = rng.choice(frames - 1, size=novel, replace=novel > frames - 1)
    t_novel = np.sort(
        [t_main[g] + rng.uniform(0.25, 0.75) * (t_main[g + 1] - t_main[g]) for g in gaps]
    )
    eyes = _catmull_rom(control, np.concatenate([t_main, t_novel]))
    target_pt = rng.uniform(-0.3, 0.3, 3)
    fx = 0.55 * image_size / np.tan(np.deg2rad(25.0))

    def _cam(eye):
        return look_at_camera(eye, target_pt, np.array([0.0, -1.0, 0.0]),
                              fx, fx, image_size, image_size)

    cams = [_cam(e) for e in eyes[:frames]]
    novel_cams = [_cam(e) for e in eyes[frames:]]

    images = np.zeros((frames, image_size, image_size, 3))
    depths = np.zeros((frames, image_size, image_size))
    alphas = np.zeros((frames, image_size, image_size))
    for m, cam in enumerate(cams):
        out = rasterize(splats, cam)
        images[m] = out.color
        depths[m] = out.depth
        alphas[m] = out.alpha
    novel_images = np.zeros((len(novel_cams), image_size, image_size, 3))
    for j, cam in enumerate(novel_cams):
        novel_images[j] = rasterize(splats, cam).color
    return SyntheticScene(splats, cams, novel_cams, images, depths, alphas,
                          novel_images, seed)


def block_mean(img: np.ndarray, factor: int) -> np.ndarray:
    """Area downsample by integer factor over the two leading spatial axes."""
    H, W = img.shape[:2]
    rest = img.shape[2:]
    return img.reshape(H // factor, factor, W // factor, factor, *rest).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    l_v: float
    l_lr: float
    l_nv: float
    l_d: float
    total: float
    weights: dict = field(default_factory=dict)


def loss_lr(renders: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over frames of per-frame mean squared pixel error."""
    if renders.shape != gt.shape:
        raise ShapeMismatchError(f"{tuple(renders.shape)} vs {tuple(gt.shape)}")
    return (renders - gt).square().mean()


def loss_nv(renders: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Reconstruction loss on novel viewpoints (rendered directly, no
    network pass); same form as loss_lr."""
    return loss_lr(renders, gt)


def loss_depth(pred, gt_points: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean Euclidean distance between predicted splat centers and the
    unprojected ground-truth surface points of their source pixels.

    gt_points [M, P, 3]; valid [M, P] marks pixels whose ground truth is
    opaque enough to define a depth.
    """
    tgt = gt_points[pred.frame_idx, pred.pixel_idx]
    keep = valid[pred.frame_idx, pred.pixel_idx]
    if not bool(keep.any()):
        raise NoValidPixelsError("no pixel passed the alpha mask")
    dist = torch.linalg.norm(pred.means - tgt, dim=1)
    return dist[keep].mean()


# ---------------------------------------------------------------------------
# per-scene training bundle
# ---------------------------------------------------------------------------

@dataclass
class SceneBundle:
    """A SyntheticScene plus everything the train step reuses across steps."""

    scene: SyntheticScene
    latents: np.ndarray            # [M, h, w, C] encoded ground truth
    gt_lr: torch.Tensor            # [M, 3, h, w]
    gt_nv_lr: torch.Tensor         # [J, 3, h, w]
    cams_lat: list[Camera]
    novel_cams_lat: list[Camera]
    geom: EpipolarGeometry
    gt_points: torch.Tensor        # [M, P, 3] unprojected GT surface points
    gt_valid: torch.Tensor         # [M, P]
    gt_depth_lat: np.ndarray       # [M, h, w]
    flipped: "SceneBundle | None" = None  # same scene, trajectory reversed


def build_bundle(scene: SyntheticScene, factor: int, epi_samples: int) -> SceneBundle:
    latents = np.stack([latent_encode(img, factor) for img in scene.images])
    gt_lr = torch.from_numpy(
        np.stack([block_mean(img, factor) for img in scene.images])
    ).float().permute(0, 3, 1, 2).contiguous()
    gt_nv_lr = torch.from_numpy(
        np.stack([block_mean(img, factor) for img in scene.novel_images])
    ).float().permute(0, 3, 1, 2).contiguous() if len(scene.novel_cams) else torch.zeros(0)
    cams_lat = latent_cameras(scene.cams, factor)
    novel_lat = latent_cameras(scene.novel_cams, factor)
    geom = EpipolarGeometry.build(cams_lat, epi_samples)

    M = len(scene.cams)
    h, w = cams_lat[0].height, cams_lat[0].width
    depth_lat = np.stack([block_mean(d, factor) for d in scene.depths])
    alpha_lat = np.stack([block_mean(a, factor) for a in scene.alphas])
    valid = alpha_lat > 0.99
    pts = np.zeros((M, h * w, 3))
    for m, cam in enumerate(cams_lat):
        from .geometry import pixel_center_grid, unproject_pixels

        grid = pixel_center_grid(w, h).reshape(-1, 2)
        d = np.maximum(depth_lat[m].reshape(-1), 1e-6)
        pts[m] = unproject_pixels(cam, grid, d)
    return SceneBundle(
        scene=scene,
        latents=latents,
        gt_lr=gt_lr,
        gt_nv_lr=gt_nv_lr,
        cams_lat=cams_lat,
        novel_cams_lat=novel_lat,
        geom=geom,
        gt_points=torch.from_numpy(pts).float(),
        gt_valid=torch.from_numpy(valid.reshape(M, -1)),
        gt_depth_lat=depth_lat,
    )


def flip_bundle(bundle: SceneBundle, epi_samples: int) -> SceneBundle:
    """The same scene with the camera trajectory reversed (training
    augmentation; novel views are order-free and stay as they are)."""
    s = bundle.scene
    rev = SyntheticScene(
        scene=s.scene,
        cams=s.cams[::-1],
        novel_cams=s.novel_cams,
        images=s.images[::-1].copy(),
        depths=s.depths[::-1].copy(),
        alphas=s.alphas[::-1].copy(),
        novel_images=s.novel_images,
        seed=s.seed,
    )
    return SceneBundle(
        scene=rev,
        latents=bundle.latents[::-1].copy(),
        gt_lr=bundle.gt_lr.flip(0),
        gt_nv_lr=bundle.gt_nv_lr,
        cams_lat=bundle.cams_lat[::-1],
        novel_cams_lat=bundle.novel_cams_lat,
        geom=EpipolarGeometry.build(bundle.cams_lat[::-1], epi_samples),
        gt_points=bundle.gt_points.flip(0),
        gt_valid=bundle.gt_valid.flip(0),
        gt_depth_lat=bundle.gt_depth_lat[::-1].copy(),
    )


def make_dataset(cfg: RunConfig, n_scenes: int, seed_offset: int = 0,
                 with_flip: bool = True) -> list[SceneBundle]:
    scenes = []
    for i in range(n_scenes):
        seed = derive_seed(cfg.seed, f"data/{seed_offset + i}")
        s = gen_scene(seed, cfg.scene.n_splats, cfg.scene.frames, cfg.scene.novel,
                      cfg.scene.image_size)
        bundle = build_bundle(s, cfg.diffusion.latent_factor, cfg.model.epi_samples)
        if with_flip:
            bundle.flipped = flip_bundle(bundle, cfg.model.epi_samples)
        scenes.append(bundle)
    return scenes


# ---------------------------------------------------------------------------
# train step
# ---------------------------------------------------------------------------

def _check_finite(value: torch.Tensor, name: str):
    if not bool(torch.isfinite(value).all()):
        raise NonFiniteLossError(f"{name} is not finite")


def sample_sigma(rng: np.random.Generator, dist: str, sigma_min: float,
                 sigma_max: float) -> float:
    """Training noise level.

    "lognormal": the image-scale prior; "mixed" adds a log-uniform component
    over the sampler's full range so the content-forming high-sigma steps
    see training signal too.
    """
    if dist == "lognormal" or (dist == "mixed" and rng.random() < 0.5):
        return sample_training_sigma(rng)
    return float(np.exp(rng.uniform(np.log(sigma_min), np.log(sigma_max))))


def make_frames(bundle: SceneBundle, ref_ids: list[int], sigma: float,
                noise: np.ndarray | None, cond_grids: dict | None = None):
    """LatentFrames for one scene: clean refs, noisy targets.

    noise [L, h, w, C] (None for sigma == 0); cond_grids maps target index
    -> rendered condition latent.
    """
    refs, targets = [], []
    t_slot = 0
    for m in range(len(bundle.scene.cams)):
        z0 = bundle.latents[m]
        if m in ref_ids:
            refs.append(LatentFrame(z0, "reference", index=m))
        else:
            z_t = z0 if noise is None else z0 + sigma * noise[t_slot]
            cond = None if cond_grids is None else cond_grids.get(m)
            targets.append(LatentFrame(z_t, "target", sigma=sigma, cond=cond, index=m))
            t_slot += 1
    return refs, targets


def train_step(
    model: Denoiser,
    bundles: list[SceneBundle],
    cfg: RunConfig,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
    torch_gen: torch.Generator,
    condition_fn=None,
) -> LossReport:
    """One AdamW update over a batch of scenes.

    condition_fn(bundle, ref_ids) -> {target_index: cond grid} supplies the
    splat-conditioning slots when cfg.train.splat_condition is set.
    """
    tcfg = cfg.train
    optimizer.zero_grad()
    acc = {"l_v": 0.0, "l_lr": 0.0, "l_nv": 0.0, "l_d": 0.0}
    total_loss = 0.0
    for bundle in bundles:
        if bundle.flipped is not None and rng.random() < 0.5:
            bundle = bundle.flipped
        M = len(bundle.scene.cams)
        K = cfg.scene.refs
        ref_ids = [0] if K == 1 else [0] + sorted(
            rng.choice(np.arange(1, M), size=K - 1, replace=False).tolist()
        )
        sigma = sample_sigma(rng, tcfg.sigma_dist, cfg.diffusion.sigma_min,
                             cfg.diffusion.sigma_max)
        L = M - len(ref_ids)
        h, w, C = bundle.latents.shape[1:]
        noise = rng.standard_normal((L, h, w, C))

        cond_grids = None
        if tcfg.splat_condition and condition_fn is not None:
            cond_grids = condition_fn(bundle, ref_ids)
        refs, targets = make_frames(bundle, ref_ids, sigma, noise, cond_grids)
        drop_cond = rng.random() < cfg.diffusion.cfg_drop_prob
        if drop_cond:
            for f in refs + targets:
                f.cond = np.zeros_like(f.cond)
        x, sigmas, is_ref = assemble_input(refs, targets)

        res = model.denoise_full(
            x, sigmas, is_ref, bundle.scene.cams, rng=torch_gen,
            depth_supervised=tcfg.depth_supervised, geom=bundle.geom,
        )

        v_tgt = np.stack([
            v_target(f.latent - sigma * noise[i], noise[i], sigma, cfg.diffusion.sigma_data)
            for i, f in enumerate(targets)
        ])
        v_tgt = torch.from_numpy(v_tgt).float().permute(0, 3, 1, 2)
        tgt_mask = torch.from_numpy(~is_ref)
        l_v = (res.v_hat[tgt_mask] - v_tgt).square().mean()
        _check_finite(l_v, "l_v")
        loss = l_v
        l_lr = l_nv = l_d = torch.tensor(0.0)
        if model.config.use_3d:
            l_lr = loss_lr(res.renders["color"], bundle.gt_lr)
            _check_finite(l_lr, "l_lr")
            nv_renders = model.render_views(
                res.prediction, bundle.novel_cams_lat,
                bundle.cams_lat[0].width, bundle.cams_lat[0].height,
            )
            l_nv = loss_nv(nv_renders["color"], bundle.gt_nv_lr)
            _check_finite(l_nv, "l_nv")
            loss = loss + tcfg.lambda_lr * l_lr + tcfg.lambda_nv * l_nv
            if tcfg.depth_supervised:
                l_d = loss_depth(res.prediction, bundle.gt_points, bundle.gt_valid)
                _check_finite(l_d, "l_d")
                loss = loss + tcfg.lambda_depth * l_d
        total_loss = total_loss + loss / len(bundles)
        acc["l_v"] += float(l_v.detach()) / len(bundles)
        acc["l_lr"] += float(l_lr.detach()) / len(bundles)
        acc["l_nv"] += float(l_nv.detach()) / len(bundles)
        acc["l_d"] += float(l_d.detach()) / len(bundles)

    _check_finite(total_loss, "total")
    total_loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteLossError(f"gradient of {name} is not finite")
    optimizer.step()
    return LossReport(
        l_v=acc["l_v"], l_lr=acc["l_lr"], l_nv=acc["l_nv"], l_d=acc["l_d"],
        total=float(total_loss.detach()),
        weights={"lambda_lr": tcfg.lambda_lr, "lambda_nv": tcfg.lambda_nv,
                 "lambda_depth": tcfg.lambda_depth},
    )


def make_optimizer(model: Denoiser, cfg: RunConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.train.lr, weight_decay=cfg.train.weight_decay,
    )


def train_loop(
    model: Denoiser,
    bundles: list[SceneBundle],
    cfg: RunConfig,
    log: "MetricsLog | None" = None,
    condition_fn=None,
    steps: int | None = None,
) -> list[LossReport]:
    steps = cfg.train.steps if steps is None else steps
    optimizer = make_optimizer(model, cfg)
    rng = derive_rng(cfg.seed, "train")
    torch_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "train/torch"))
    reports = []
    for step in range(steps):
        picks = rng.choice(len(bundles), size=cfg.train.batch_scenes, replace=False)
        batch = [bundles[i] for i in picks]
        report = train_step(model, batch, cfg, optimizer, rng, torch_gen, condition_fn)
        reports.append(report)
        if log is not None and (step % cfg.train.log_every == 0 or step == steps - 1):
            log.append(step, report)
    return reports


# ---------------------------------------------------------------------------
# decoder training (no noise, frozen everything else)
# ---------------------------------------------------------------------------

def decoder_parameter_names(model: Denoiser) -> list[str]:
    return [n for n, _ in model.named_parameters() if n.startswith("dec_")]


def state_hash(model: Denoiser, exclude_prefix: str | None = None) -> int:
    import zlib

    h = 0
    for name, p in sorted(model.state_dict().items()):
        if exclude_prefix and name.startswith(exclude_prefix):
            continue
        h = zlib.crc32(p.detach().cpu().numpy().tobytes(), h)
    return h


def train_decoder3d(
    model: Denoiser,
    bundles: list[SceneBundle],
    cfg: RunConfig,
    iters: int,
    views_per_iter: int = 4,
    lr: float = 3e-4,
) -> list[float]:
    """Train only the image-resolution decoder heads at noise level zero.

    The rest of the network is frozen (asserted via a state hash). Loss:
    image-space MSE of rendered decoded splats against ground truth on a
    random subset of input and novel views each iteration.
    """
    frozen_before = state_hash(model, exclude_prefix="dec_")
    for name, p in model.named_parameters():
        p.requires_grad_(name.startswith("dec_"))
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=lr, weight_decay=1e-5)
    rng = derive_rng(cfg.seed, "decoder3d")
    torch_gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "decoder3d/torch"))
    losses = []
    for _ in range(iters):
        bundle = bundles[int(rng.integers(len(bundles)))]
        scene = bundle.scene
        ref_ids = [0] if cfg.scene.refs == 1 else [0, len(scene.cams) - 1]
        refs, targets = make_frames(bundle, ref_ids, 0.0, None)
        for f in targets:
            assert f.sigma == 0.0
        x, sigmas, is_ref = assemble_input(refs, targets)
        with torch.no_grad():
            h_dec = model.backbone_features(x, sigmas, bundle.cams_lat)
            epi = model.epi_features(h_dec, bundle.geom)
        pred = model.decode3d(epi, scene.cams, rng=torch_gen)

        H = scene.cams[0].height
        all_cams = list(scene.cams) + list(scene.novel_cams)
        all_imgs = np.concatenate([scene.images, scene.novel_images])
        picks = rng.choice(len(all_cams), size=min(views_per_iter, len(all_cams)),
                           replace=False)
        loss = 0.0
        for v in picks:
            renders = model.render_views(pred, [all_cams[v]], H, H)
            gt = torch.from_numpy(all_imgs[v]).float().permute(2, 0, 1)[None]
            loss = loss + (renders["color"] - gt).square().mean()
        loss = loss / len(picks)
        _check_finite(loss, "decoder3d loss")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss))
    for p in model.parameters():
        p.requires_grad_(True)
    assert state_hash(model, exclude_prefix="dec_") == frozen_before, \
        "frozen parameters changed during decoder training"
    return losses


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images; capped at 99."""
    img_a = np.asarray(img_a)
    img_b = np.asarray(img_b)
    if img_a.shape != img_b.shape:
        raise ShapeMismatchError(f"{img_a.shape} vs {img_b.shape}")
    mse = float(np.mean((img_a - img_b) ** 2))
    if mse <= 1e-10:
        return 99.0
    return min(99.0, 10.0 * np.log10(1.0 / mse))


class MetricsLog:
    """CSV metrics log: step, L_v, L_LR, L_nv, L_d, psnr_eval, tsed_eval."""

    COLUMNS = ["step", "L_v", "L_LR", "L_nv", "L_d", "psnr_eval", "tsed_eval"]

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(self.COLUMNS)

    def append(self, step: int, report: LossReport,
               psnr_eval: float = float("nan"), tsed_eval: float = float("nan")):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([
                step, repr(report.l_v), repr(report.l_lr), repr(report.l_nv),
                repr(report.l_d), repr(psnr_eval), repr(tsed_eval),
            ])


# ---------------------------------------------------------------------------
# sampling and evaluation
# ---------------------------------------------------------------------------

def sample_targets(
    model: Denoiser,
    bundle: SceneBundle,
    cfg: RunConfig,
    seed: int,
    ref_ids: list[int] | None = None,
    cond_grids: dict | None = None,
) -> np.ndarray:
    """Generate the target frames of a scene; returns [M, H, W, 3] images
    with ground-truth references in their slots."""
    from .diffusion import euler_sample

    dcfg = cfg.diffusion
    M = len(bundle.scene.cams)
    ref_ids = [0] if ref_ids is None else ref_ids
    tgt_ids = [m for m in range(M) if m not in ref_ids]
    h, w, C = bundle.latents.shape[1:]
    sched = sigma_schedule(dcfg.steps, dcfg.sigma_min, dcfg.sigma_max, dcfg.rho)
    torch_gen = torch.Generator().manual_seed(derive_seed(seed, "sample/torch"))

    def denoise_fn(z, sig, cond):
        refs, targets = [], []
        for m in ref_ids:
            refs.append(LatentFrame(bundle.latents[m], "reference", index=m))
        for i, m in enumerate(tgt_ids):
            cgrid = None if cond is None else cond.get(m)
            targets.append(LatentFrame(z[i], "target", sigma=sig, cond=cgrid, index=m))
        if cond is None:  # unconditional branch: zero every condition slot
            for f in refs + targets:
                f.cond = np.zeros_like(f.cond)
        x, sigmas, is_ref = assemble_input(refs, targets)
        gen = torch.Generator().manual_seed(
            derive_seed(seed, f"sample/noise/{float(sig):.6e}") ^ (0 if cond is None else 1)
        )
        with torch.no_grad():
            res = model.denoise_full(
                x, sigmas, is_ref, bundle.scene.cams, rng=gen,
                depth_supervised=cfg.train.depth_supervised, geom=bundle.geom,
            )
        out = res.denoised[torch.from_numpy(~is_ref)].permute(0, 2, 3, 1).numpy()
        return out.astype(np.float64)

    cond = cond_grids if cond_grids is not None else {}
    z = euler_sample(
        denoise_fn, (len(tgt_ids), h, w, C), sched,
        guidance_scale=dcfg.guidance_scale,
        rng=np.random.default_rng(derive_seed(seed, "sample/init")),
        cond=cond,
    )
    images = bundle.scene.images.copy()
    for i, m in enumerate(tgt_ids):
        images[m] = latent_decode(z[i], cfg.diffusion.latent_factor)
    return images


def eval_scene(model, bundle, cfg, seed) -> dict:
    """PSNR over generated target frames plus block-matching TSED over
    consecutive generated frames."""
    from .geometry import fundamental_matrix, match_blocks, tsed

    images = sample_targets(model, bundle, cfg, seed)
    gt = bundle.scene.images
    tgt_ids = list(range(1, len(gt)))
    psnrs = [psnr(images[m], gt[m]) for m in tgt_ids]
    pairs = []
    for m in range(len(gt) - 1):
        corr = match_blocks(images[m], images[m + 1], grid_step=3, window=4,
                            search_radius=6)
        F = fundamental_matrix(bundle.scene.cams[m], bundle.scene.cams[m + 1])
        pairs.append((corr, F))
    return {
        "psnr": float(np.mean(psnrs)),
        "tsed": tsed(pairs, threshold=2.0, min_matches=10),
        "images": images,
        "pairs": pairs,
    }
