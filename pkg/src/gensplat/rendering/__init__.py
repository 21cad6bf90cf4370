from .projection import (
    COV2D_FLOOR,
    build_covariance,
    project_gaussian,
    project_gaussians,
    project_gaussians_backward,
    quat_to_rotmat,
)
from .raster import (
    RenderOutput,
    SplatGradients,
    rasterize,
    rasterize_arrays,
    rasterize_arrays_backward,
    rasterize_backward,
    render_multiview,
)
from .torch_bridge import rasterize_torch

__all__ = [
    "COV2D_FLOOR",
    "RenderOutput",
    "SplatGradients",
    "build_covariance",
    "project_gaussian",
    "project_gaussians",
    "project_gaussians_backward",
    "quat_to_rotmat",
    "rasterize",
    "rasterize_arrays",
    "rasterize_arrays_backward",
    "rasterize_backward",
    "rasterize_torch",
    "render_multiview",
]
