"""Tile-parallel alpha-blending kernels.

Splats arrive pre-sorted by camera-space depth; per pixel the kernels walk
them front to back, so tiled and whole-image (brute-force) binning produce
bitwise-identical output. Parallelism is over tiles: each tile owns its
pixels (forward) and its slice of the pair-gradient buffer (backward), and
the backward reduction over pairs runs serially in a fixed order, so results
do not depend on the thread count.

Density shaping: the 2D Gaussian is tapered to exactly zero at the 3-sigma
cutoff (C1 smooth) and soft-clamped below DENSITY_CAP (also C1), keeping the
rendered image a differentiable function of every splat parameter; hard
cutoffs would break finite-difference checks of the backward pass.

Transmittance is tracked in float64 and blending stops once it falls below
T_STOP; the per-pixel count of examined pairs lets the backward pass walk
exactly the pairs the forward pass processed.
"""

import numba
import numpy as np
from numba import prange

MSQ_CUTOFF = 9.0  # 3-sigma, squared Mahalanobis distance
TAPER_START = 8.0  # taper-to-zero band is [TAPER_START, MSQ_CUTOFF]
DENSITY_CAP = 0.999
CAP_KNEE = 0.98
TILE_SIZE = 16
T_STOP = 1e-15


@numba.njit(inline="always", cache=True)
def _density(m):
    """Tapered, soft-clamped Gaussian density from squared Mahalanobis m."""
    g = np.exp(-0.5 * m)
    if m > TAPER_START:
        u = (MSQ_CUTOFF - m) / (MSQ_CUTOFF - TAPER_START)
        g = g * (u * u * (3.0 - 2.0 * u))
    if g > CAP_KNEE:
        v = (g - CAP_KNEE) / (1.0 - CAP_KNEE)
        g = CAP_KNEE + (1.0 - CAP_KNEE) * (v + 0.85 * v * v - 0.9 * v * v * v)
    return g


@numba.njit(inline="always", cache=True)
def _density_grad(m):
    """(density, d density / d m)."""
    e = np.exp(-0.5 * m)
    if m > TAPER_START:
        u = (MSQ_CUTOFF - m) / (MSQ_CUTOFF - TAPER_START)
        win = u * u * (3.0 - 2.0 * u)
        dwin = -(6.0 * u - 6.0 * u * u) / (MSQ_CUTOFF - TAPER_START)
        g = e * win
        dg = e * (dwin - 0.5 * win)
    else:
        g = e
        dg = -0.5 * e
    if g > CAP_KNEE:
        v = (g - CAP_KNEE) / (1.0 - CAP_KNEE)
        dclamp = 1.0 + 1.7 * v - 2.7 * v * v
        g = CAP_KNEE + (1.0 - CAP_KNEE) * (v + 0.85 * v * v - 0.9 * v * v * v)
        dg = dg * dclamp
    return g, dg


@numba.njit(parallel=True, cache=True)
def blend_forward(
    mean2d,      # [Ns, 2] depth-sorted projected centers
    conic,       # [Ns, 3] inverse 2D covariance (a, b, c)
    opac,        # [Ns]
    channels,    # [Ns, C] blended payload (color | features | z)
    pair_splat,  # [P] sorted-splat index per (tile, splat) pair
    tile_start,  # [T+1] pair ranges per tile
    tiles_x,     # tile grid width
    width, height,
    out,         # [H, W, C] prezeroed
    alpha,       # [H, W] prezeroed
    t_final,     # [H, W] float64, pre-initialized to 1
    contrib,     # [H, W] int32 prezeroed
    n_passed,    # [H, W] int32 prezeroed: pairs examined per pixel
):
    n_tiles = tile_start.shape[0] - 1
    C = channels.shape[1]
    for t in prange(n_tiles):
        s0, s1 = tile_start[t], tile_start[t + 1]
        if s0 == s1:
            continue
        x_lo = (t % tiles_x) * TILE_SIZE
        y_lo = (t // tiles_x) * TILE_SIZE
        for iy in range(y_lo, min(y_lo + TILE_SIZE, height)):
            py = iy + 0.5
            for ix in range(x_lo, min(x_lo + TILE_SIZE, width)):
                px = ix + 0.5
                T = 1.0
                passed = 0
                for si in range(s0, s1):
                    k = pair_splat[si]
                    passed += 1
                    dx = px - mean2d[k, 0]
                    dy = py - mean2d[k, 1]
                    m = (conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy
                         + conic[k, 2] * dy * dy)
                    if m >= MSQ_CUTOFF:
                        continue
                    a = opac[k] * _density(m)
                    w = a * T
                    for c in range(C):
                        out[iy, ix, c] += w * channels[k, c]
                    alpha[iy, ix] += w
                    contrib[iy, ix] += 1
                    T *= 1.0 - a
                    if T < T_STOP:
                        break
                t_final[iy, ix] = T
                n_passed[iy, ix] = passed


@numba.njit(parallel=True, cache=True)
def blend_backward(
    mean2d, conic, opac, channels,
    pair_splat, tile_start, tiles_x, width, height,
    t_final,        # [H, W] float64 from the forward pass
    n_passed,       # [H, W] int32 from the forward pass
    g_channels,     # [H, W, C] incoming gradient on blended channels
    g_alpha,        # [H, W] incoming gradient on the alpha map
    pair_grad,      # [P, 6 + C] per-pair output (mx, my, ca, cb, cc, op, ch...)
):
    n_tiles = tile_start.shape[0] - 1
    C = channels.shape[1]
    for t in prange(n_tiles):
        s0, s1 = tile_start[t], tile_start[t + 1]
        if s0 == s1:
            continue
        x_lo = (t % tiles_x) * TILE_SIZE
        y_lo = (t // tiles_x) * TILE_SIZE
        for iy in range(y_lo, min(y_lo + TILE_SIZE, height)):
            py = iy + 0.5
            for ix in range(x_lo, min(x_lo + TILE_SIZE, width)):
                px = ix + 0.5
                T = t_final[iy, ix]
                S = 0.0  # suffix sum of w_j * gL_j over already-visited splats
                for si in range(s0 + n_passed[iy, ix] - 1, s0 - 1, -1):
                    k = pair_splat[si]
                    dx = px - mean2d[k, 0]
                    dy = py - mean2d[k, 1]
                    ca = conic[k, 0]
                    cb = conic[k, 1]
                    cc = conic[k, 2]
                    m = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if m >= MSQ_CUTOFF:
                        continue
                    g, dg_dm = _density_grad(m)
                    a = opac[k] * g
                    om = 1.0 - a
                    T = T / om  # transmittance in front of splat k
                    w = a * T
                    gL = g_alpha[iy, ix]
                    for c in range(C):
                        gL += g_channels[iy, ix, c] * channels[k, c]
                    dL_da = T * gL - S / om
                    S += w * gL
                    dL_dg = opac[k] * dL_da
                    dL_dm = dL_dg * dg_dm
                    pair_grad[si, 0] += dL_dm * (-2.0 * (ca * dx + cb * dy))
                    pair_grad[si, 1] += dL_dm * (-2.0 * (cb * dx + cc * dy))
                    pair_grad[si, 2] += dL_dm * dx * dx
                    pair_grad[si, 3] += dL_dm * 2.0 * dx * dy
                    pair_grad[si, 4] += dL_dm * dy * dy
                    pair_grad[si, 5] += g * dL_da
                    for c in range(C):
                        pair_grad[si, 6 + c] += w * g_channels[iy, ix, c]


@numba.njit(cache=True)
def reduce_pair_grads(pair_splat, pair_grad, out_grad):
    # fixed serial order: independent of thread count
    for si in range(pair_splat.shape[0]):
        k = pair_splat[si]
        for c in range(pair_grad.shape[1]):
            out_grad[k, c] += pair_grad[si, c]
