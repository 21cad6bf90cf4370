"""gensplat: pose-conditional latent diffusion over 3D Gaussian feature fields."""

__version__ = "0.1.0"
