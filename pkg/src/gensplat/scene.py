"""Splat scene container: arrays of 3D Gaussian primitives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidScaleError

DEFAULT_FEATURE_DIM = 32


@dataclass
class SplatScene:
    """A set of N anisotropic 3D Gaussians with per-splat appearance.

    means      [N, 3]  world-space centers (scene units)
    scales     [N, 3]  per-axis standard deviations, strictly positive
    quats      [N, 4]  unit rotation quaternions (w, x, y, z)
    opacities  [N]     in [0, 1]
    colors     [N, 3]  RGB in [0, 1]
    features   [N, F]  arbitrary per-splat feature vectors
    """

    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    features: np.ndarray = field(default=None)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        n = len(self.means)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if self.features is None:
            self.features = np.zeros((n, DEFAULT_FEATURE_DIM))
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            self.features = self.features.reshape(n, -1)
        assert len(self.features) == n

    def __len__(self) -> int:
        return len(self.means)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        if np.any(self.scales <= 0):
            raise InvalidScaleError("scales must be strictly positive")
        qn = np.linalg.norm(self.quats, axis=1)
        if np.any(np.abs(qn - 1.0) >= 1e-9):
            raise ValueError("quaternions must be unit length")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacities must lie in [0, 1]")
        for name in ("means", "scales", "quats", "opacities", "colors", "features"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")

    def copy(self) -> "SplatScene":
        return SplatScene(
            self.means.copy(), self.scales.copy(), self.quats.copy(),
            self.opacities.copy(), self.colors.copy(), self.features.copy(),
        )

    def subset(self, idx) -> "SplatScene":
        return SplatScene(
            self.means[idx], self.scales[idx], self.quats[idx],
            self.opacities[idx], self.colors[idx], self.features[idx],
        )

    @staticmethod
    def concatenate(scenes: list["SplatScene"]) -> "SplatScene":
        return SplatScene(
            np.concatenate([s.means for s in scenes]),
            np.concatenate([s.scales for s in scenes]),
            np.concatenate([s.quats for s in scenes]),
            np.concatenate([s.opacities for s in scenes]),
            np.concatenate([s.colors for s in scenes]),
            np.concatenate([s.features for s in scenes]),
        )

    @staticmethod
    def empty(feature_dim: int = DEFAULT_FEATURE_DIM) -> "SplatScene":
        return SplatScene(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
            np.zeros(0), np.zeros((0, 3)), np.zeros((0, feature_dim)),
        )
