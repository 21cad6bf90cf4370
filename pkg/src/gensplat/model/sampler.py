"""Fixed-grid bilinear sampling as a custom autograd op.

The epipolar sample locations depend only on the cameras, so the four
bilinear corner indices and weights are precomputed once per trajectory;
forward gather and backward scatter then run as numba loops, which is far
cheaper on CPU than grid_sample's generic backward. The scatter loops are
parallel over batch entries only (each owns its output slice), so results
are independent of thread count.
"""

import numba
import numpy as np
import torch
from numba import prange


@numba.njit(parallel=True, cache=True)
def _gather(maps, idx, wgt, out):
    # maps [B, Ps, D], idx/wgt [B, N, 4] -> out [B, N, D]
    B, N, _ = idx.shape
    D = maps.shape[2]
    for b in prange(B):
        for n in range(N):
            w0 = wgt[b, n, 0]
            w1 = wgt[b, n, 1]
            w2 = wgt[b, n, 2]
            w3 = wgt[b, n, 3]
            if w0 == 0.0 and w1 == 0.0 and w2 == 0.0 and w3 == 0.0:
                continue
            j0 = idx[b, n, 0]
            j1 = idx[b, n, 1]
            j2 = idx[b, n, 2]
            j3 = idx[b, n, 3]
            for d in range(D):
                out[b, n, d] = (w0 * maps[b, j0, d] + w1 * maps[b, j1, d]
                                + w2 * maps[b, j2, d] + w3 * maps[b, j3, d])


@numba.njit(parallel=True, cache=True)
def _scatter(g_out, idx, wgt, g_maps):
    # transpose of _gather: g_maps [B, Ps, D] += w * g_out [B, N, D]
    B, N, _ = idx.shape
    D = g_maps.shape[2]
    for b in prange(B):
        for n in range(N):
            for c in range(4):
                w = wgt[b, n, c]
                if w != 0.0:
                    j = idx[b, n, c]
                    for d in range(D):
                        g_maps[b, j, d] += w * g_out[b, n, d]


class _FixedGridSample(torch.autograd.Function):
    @staticmethod
    def forward(ctx, maps, idx, wgt):
        maps_np = maps.detach().contiguous().numpy()
        idx_np = idx.numpy()
        wgt_np = wgt.numpy()
        out = np.zeros((maps_np.shape[0], idx_np.shape[1], maps_np.shape[2]),
                       dtype=maps_np.dtype)
        _gather(maps_np, idx_np, wgt_np, out)
        ctx.saved = (idx_np, wgt_np, maps_np.shape)
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, g_out):
        idx_np, wgt_np, shape = ctx.saved
        g = np.zeros(shape, dtype=wgt_np.dtype)
        _scatter(g_out.detach().contiguous().numpy(), idx_np, wgt_np, g)
        return torch.from_numpy(g), None, None


def fixed_grid_sample(maps: torch.Tensor, idx: torch.Tensor, wgt: torch.Tensor) -> torch.Tensor:
    """maps [B, Ps, D] sampled at precomputed bilinear corners -> [B, N, D]."""
    return _FixedGridSample.apply(maps, idx, wgt)


def bilinear_corners(points: np.ndarray, width: int, height: int):
    """Corner indices/weights for sampling at continuous pixel coordinates.

    points [..., 2]; out-of-image corners get weight 0 (zero padding).
    Returns (idx int64 [..., 4], wgt float32 [..., 4]).
    """
    gx = points[..., 0] - 0.5  # continuous coords -> cell space
    gy = points[..., 1] - 0.5
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    fx = gx - x0
    fy = gy - y0
    idx = np.zeros(points.shape[:-1] + (4,), dtype=np.int64)
    wgt = np.zeros(points.shape[:-1] + (4,), dtype=np.float32)
    for c, (dx, dy, w) in enumerate((
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    )):
        xi = x0 + dx
        yi = y0 + dy
        inside = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        idx[..., c] = (np.clip(yi, 0, height - 1) * width + np.clip(xi, 0, width - 1)).astype(np.int64)
        wgt[..., c] = (w * inside).astype(np.float32)
    return idx, wgt
