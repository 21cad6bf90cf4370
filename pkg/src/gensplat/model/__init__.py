from .checkpoint import load_weights, save_weights
from .denoiser import (
    Denoiser,
    DenoiseResult,
    SplatPrediction,
    assemble_input,
    init_denoiser,
    latent_cameras,
    parameter_manifest,
)
from .epipolar import EpipolarGeometry, EpipolarTransformer

__all__ = [
    "Denoiser",
    "DenoiseResult",
    "EpipolarGeometry",
    "EpipolarTransformer",
    "SplatPrediction",
    "assemble_input",
    "init_denoiser",
    "latent_cameras",
    "load_weights",
    "parameter_manifest",
    "save_weights",
]
