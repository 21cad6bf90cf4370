"""Torch autograd entry point for the rasterizer.

Splat parameter tensors flow through the numba kernels via zero-copy numpy
views; the analytic backward supplies the gradients, so splat predictions
made by a network train end to end.
"""

from __future__ import annotations

import torch

from ..geometry import Camera
from .raster import rasterize_arrays, rasterize_arrays_backward


class _RasterizeFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, scales, quats, opacities, colors, features, cam, width, height):
        arrays = tuple(
            t.detach().contiguous().cpu().numpy()
            for t in (means, scales, quats, opacities, colors, features)
        )
        out, cache = rasterize_arrays(*arrays, cam, width, height, return_cache=True)
        ctx.arrays = arrays
        ctx.cam = cam
        ctx.size = (width, height)
        ctx.cache = cache
        return (
            torch.from_numpy(out.color),
            torch.from_numpy(out.feature),
            torch.from_numpy(out.alpha),
            torch.from_numpy(out.depth),
        )

    @staticmethod
    def backward(ctx, g_color, g_feature, g_alpha, g_depth):
        width, height = ctx.size
        grad_out = {}
        for name, g in (("color", g_color), ("feature", g_feature),
                        ("alpha", g_alpha), ("depth", g_depth)):
            if g is not None:
                grad_out[name] = g.detach().contiguous().cpu().numpy()
        grads = rasterize_arrays_backward(
            *ctx.arrays, ctx.cam, width, height, grad_out, cache=ctx.cache
        )
        return (
            torch.from_numpy(grads.means),
            torch.from_numpy(grads.scales),
            torch.from_numpy(grads.quats),
            torch.from_numpy(grads.opacities),
            torch.from_numpy(grads.colors),
            torch.from_numpy(grads.features),
            None, None, None,
        )


def rasterize_torch(
    means: torch.Tensor,
    scales: torch.Tensor,
    quats: torch.Tensor,
    opacities: torch.Tensor,
    colors: torch.Tensor,
    features: torch.Tensor,
    cam: Camera,
    width: int | None = None,
    height: int | None = None,
):
    """Differentiable rendering; returns (color, feature, alpha, depth) tensors."""
    width = cam.width if width is None else width
    height = cam.height if height is None else height
    return _RasterizeFunction.apply(
        means, scales, quats, opacities, colors, features, cam, width, height
    )
