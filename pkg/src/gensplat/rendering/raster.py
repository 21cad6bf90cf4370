"""Depth-sorted differentiable rasterization of splat scenes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Camera
from ..scene import SplatScene
from . import kernels
from .projection import project_gaussians, project_gaussians_backward


@dataclass
class RenderOutput:
    """Per-pixel blending results.

    color   [H, W, 3]
    feature [H, W, F]
    alpha   [H, W]    accumulated opacity (sum of blend weights)
    depth   [H, W]    alpha-weighted expected camera-space z
    contrib [H, W]    number of splats that contributed to the pixel
    """

    color: np.ndarray
    feature: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    contrib: np.ndarray


@dataclass
class SplatGradients:
    """Loss gradients w.r.t. every splat field (shapes match SplatScene)."""

    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    features: np.ndarray


def _depth_order(proj, opacities) -> np.ndarray:
    """Indices of live splats, front to back; stable w.r.t. input order."""
    live = proj["valid"] & (opacities > 0) & np.isfinite(proj["z"])
    idx = np.nonzero(live)[0]
    order = np.argsort(proj["z"][idx], kind="stable")
    return idx[order]


def _bin_tiles(mean2d, cov2d, n_sorted, width, height, brute_force):
    """Assign sorted splats to 16x16 tiles via their 3-sigma bounding boxes.

    Returns (pair_splat [P], tile_start [T+1], tiles_x). Pair lists preserve
    depth order within each tile.
    """
    ts = kernels.TILE_SIZE
    tiles_x = (width + ts - 1) // ts
    tiles_y = (height + ts - 1) // ts
    n_tiles = tiles_x * tiles_y
    if brute_force:
        # a single bin containing every splat: per-pixel math is unchanged
        pair_splat = np.arange(n_sorted, dtype=np.int64)
        pair_splat = np.tile(pair_splat, n_tiles)
        tile_start = np.arange(n_tiles + 1, dtype=np.int64) * n_sorted
        return pair_splat, tile_start, tiles_x

    rx = 3.0 * np.sqrt(np.maximum(cov2d[:, 0, 0], 0.0))
    ry = 3.0 * np.sqrt(np.maximum(cov2d[:, 1, 1], 0.0))
    x0 = np.clip(np.floor((mean2d[:, 0] - rx) / ts), 0, tiles_x - 1).astype(np.int64)
    x1 = np.clip(np.floor((mean2d[:, 0] + rx) / ts), 0, tiles_x - 1).astype(np.int64)
    y0 = np.clip(np.floor((mean2d[:, 1] - ry) / ts), 0, tiles_y - 1).astype(np.int64)
    y1 = np.clip(np.floor((mean2d[:, 1] + ry) / ts), 0, tiles_y - 1).astype(np.int64)
    # drop splats whose bbox misses the image entirely
    off = (mean2d[:, 0] + rx < 0) | (mean2d[:, 0] - rx > width) | \
          (mean2d[:, 1] + ry < 0) | (mean2d[:, 1] - ry > height)
    nx = np.where(off, 0, x1 - x0 + 1)
    ny = np.where(off, 0, y1 - y0 + 1)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return (np.zeros(0, dtype=np.int64),
                np.zeros(n_tiles + 1, dtype=np.int64), tiles_x)
    splat_of_pair = np.repeat(np.arange(n_sorted), counts)
    # enumerate each splat's covered tiles in row-major order
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(starts, counts)
    nx_rep = np.repeat(np.maximum(nx, 1), counts)
    tx = np.repeat(x0, counts) + local % nx_rep
    ty = np.repeat(y0, counts) + local // nx_rep
    tile_of_pair = ty * tiles_x + tx
    order = np.lexsort((splat_of_pair, tile_of_pair))
    pair_splat = splat_of_pair[order]
    tile_sorted = tile_of_pair[order]
    tile_start = np.zeros(n_tiles + 1, dtype=np.int64)
    np.add.at(tile_start, tile_sorted + 1, 1)
    tile_start = np.cumsum(tile_start)
    return pair_splat, tile_start, tiles_x


def _prepare(means, scales, quats, opacities, colors, features, cam, width, height, brute_force):
    dtype = means.dtype
    proj = project_gaussians(means, scales, quats, cam)
    order = _depth_order(proj, opacities)
    mean2d = np.ascontiguousarray(proj["mean2d"][order].astype(dtype))
    conic = np.ascontiguousarray(proj["conic"][order].astype(dtype))
    opac = np.ascontiguousarray(opacities[order].astype(dtype))
    channels = np.ascontiguousarray(
        np.concatenate(
            [colors[order], features[order], proj["z"][order][:, None]], axis=1
        ).astype(dtype)
    )
    pair_splat, tile_start, tiles_x = _bin_tiles(
        mean2d, proj["cov2d"][order], len(order), width, height, brute_force
    )
    return proj, order, mean2d, conic, opac, channels, pair_splat, tile_start, tiles_x


def rasterize_arrays(
    means, scales, quats, opacities, colors, features,
    cam: Camera, width: int, height: int, brute_force: bool = False,
    return_cache: bool = False,
):
    """Array-level rasterization; dtype (f32/f64) follows `means`.

    With return_cache=True also returns the prepared per-view state so a
    following backward pass can skip the forward replay.
    """
    dtype = means.dtype
    F = features.shape[1]
    C = 3 + F + 1
    out = np.zeros((height, width, C), dtype=dtype)
    alpha = np.zeros((height, width), dtype=dtype)
    t_final = np.ones((height, width), dtype=np.float64)
    contrib = np.zeros((height, width), dtype=np.int32)
    n_passed = np.zeros((height, width), dtype=np.int32)
    cache = None
    if len(means) > 0:
        prep = _prepare(
            means, scales, quats, opacities, colors, features, cam, width, height, brute_force
        )
        (_, _, mean2d, conic, opac, channels, pair_splat, tile_start, tiles_x) = prep
        kernels.blend_forward(
            mean2d, conic, opac, channels, pair_splat, tile_start, tiles_x,
            width, height, out, alpha, t_final, contrib, n_passed,
        )
        cache = {"prep": prep, "t_final": t_final, "n_passed": n_passed}
    result = RenderOutput(
        color=out[:, :, :3],
        feature=out[:, :, 3:3 + F],
        alpha=alpha,
        depth=out[:, :, 3 + F],
        contrib=contrib,
    )
    if return_cache:
        return result, cache
    return result


def rasterize(
    scene: SplatScene,
    cam: Camera,
    width: int | None = None,
    height: int | None = None,
    brute_force: bool = False,
) -> RenderOutput:
    """Render a splat scene into color/feature/alpha/depth maps.

    `brute_force=True` evaluates every splat at every pixel (no tile culling);
    the result is bitwise identical to the tiled path and exists as its oracle.
    """
    width = cam.width if width is None else width
    height = cam.height if height is None else height
    return rasterize_arrays(
        scene.means, scene.scales, scene.quats, scene.opacities, scene.colors,
        scene.features, cam, width, height, brute_force,
    )


def rasterize_arrays_backward(
    means, scales, quats, opacities, colors, features,
    cam: Camera, width: int, height: int, grad_out, brute_force: bool = False,
    cache: dict | None = None,
) -> SplatGradients:
    dtype = means.dtype
    N = len(means)
    F = features.shape[1]
    C = 3 + F + 1
    zeros = SplatGradients(
        means=np.zeros((N, 3), dtype=dtype),
        scales=np.zeros((N, 3), dtype=dtype),
        quats=np.zeros((N, 4), dtype=dtype),
        opacities=np.zeros(N, dtype=dtype),
        colors=np.zeros((N, 3), dtype=dtype),
        features=np.zeros((N, F), dtype=dtype),
    )
    if N == 0:
        return zeros

    def _field(name, shape):
        v = getattr(grad_out, name, None) if not isinstance(grad_out, dict) else grad_out.get(name)
        if v is None:
            return np.zeros(shape, dtype=dtype)
        return np.ascontiguousarray(np.asarray(v, dtype=dtype).reshape(shape))

    g_channels = np.concatenate(
        [
            _field("color", (height, width, 3)),
            _field("feature", (height, width, F)),
            _field("depth", (height, width, 1)),
        ],
        axis=2,
    )
    g_channels = np.ascontiguousarray(g_channels)
    g_alpha = _field("alpha", (height, width))

    if cache is None:
        prep = _prepare(
            means, scales, quats, opacities, colors, features, cam, width, height, brute_force
        )
        (proj, order, mean2d, conic, opac, channels,
         pair_splat, tile_start, tiles_x) = prep
        # forward replay for per-pixel final transmittance and walk lengths
        out = np.zeros((height, width, C), dtype=dtype)
        alpha = np.zeros((height, width), dtype=dtype)
        t_final = np.ones((height, width), dtype=np.float64)
        contrib = np.zeros((height, width), dtype=np.int32)
        n_passed = np.zeros((height, width), dtype=np.int32)
        kernels.blend_forward(
            mean2d, conic, opac, channels, pair_splat, tile_start, tiles_x,
            width, height, out, alpha, t_final, contrib, n_passed,
        )
    else:
        (proj, order, mean2d, conic, opac, channels,
         pair_splat, tile_start, tiles_x) = cache["prep"]
        t_final = cache["t_final"]
        n_passed = cache["n_passed"]

    pair_grad = np.zeros((len(pair_splat), 6 + C), dtype=dtype)
    kernels.blend_backward(
        mean2d, conic, opac, channels, pair_splat, tile_start, tiles_x,
        width, height, t_final, n_passed, g_channels, g_alpha, pair_grad,
    )
    sorted_grad = np.zeros((len(order), 6 + C), dtype=dtype)
    kernels.reduce_pair_grads(pair_splat, pair_grad, sorted_grad)

    # scatter blending gradients back to original splat order
    d_mean2d = np.zeros((N, 2), dtype=dtype)
    d_conic = np.zeros((N, 3), dtype=dtype)
    d_opac = np.zeros(N, dtype=dtype)
    d_channels = np.zeros((N, C), dtype=dtype)
    d_mean2d[order] = sorted_grad[:, 0:2]
    d_conic[order] = sorted_grad[:, 2:5]
    d_opac[order] = sorted_grad[:, 5]
    d_channels[order] = sorted_grad[:, 6:]

    d_z = d_channels[:, 3 + F]
    d_means, d_scales, d_quats = project_gaussians_backward(
        proj, cam, d_mean2d, d_conic, d_z
    )
    zeros.means = d_means
    zeros.scales = d_scales
    zeros.quats = d_quats
    zeros.opacities = d_opac
    zeros.colors = d_channels[:, :3]
    zeros.features = d_channels[:, 3:3 + F]
    return zeros


def rasterize_backward(
    scene: SplatScene,
    cam: Camera,
    grad_out,
    width: int | None = None,
    height: int | None = None,
    brute_force: bool = False,
) -> SplatGradients:
    """Analytic gradients of a scalar loss through the rasterizer.

    grad_out carries the loss gradients w.r.t. the RenderOutput maps (dict or
    object; missing fields mean zero). Gradients flow through blending, the
    local-affine projection and covariance construction back to every
    SplatScene field, including the quaternion normalization.
    """
    width = cam.width if width is None else width
    height = cam.height if height is None else height
    return rasterize_arrays_backward(
        scene.means, scene.scales, scene.quats, scene.opacities, scene.colors,
        scene.features, cam, width, height, grad_out, brute_force,
    )


def render_multiview(
    scene: SplatScene,
    cams: list[Camera],
    width: int | None = None,
    height: int | None = None,
) -> list[RenderOutput]:
    """Rasterize the same scene from every camera, in camera order."""
    return [rasterize(scene, cam, width, height) for cam in cams]
