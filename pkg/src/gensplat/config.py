"""Run configuration: defaults <- config file (TOML/JSON) <- CLI overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import BadConfigError


@dataclass
class DiffusionConfig:
    sigma_data: float = 0.5
    sigma_min: float = 0.02
    sigma_max: float = 80.0
    rho: float = 7.0
    steps: int = 30
    guidance_scale: float = 2.0
    cfg_drop_prob: float = 0.1
    latent_factor: int = 4


@dataclass
class ModelConfig:
    latent_size: int = 16
    latent_channels: int = 48
    feature_dim: int = 32      # per-splat feature channels
    epi_dim: int = 64          # epipolar transformer width
    epi_blocks: int = 2
    epi_heads: int = 4
    epi_samples: int = 32      # points per epipolar line and neighbor
    backbone_channels: tuple = (64, 96, 128)
    time_dim: int = 128
    depth_samples: int = 3     # splats per pixel without depth supervision
    d_near: float = 0.1
    d_far: float = 100.0
    use_3d: bool = True        # False: replace the splat pathway by a conv head
    decoder_channels: tuple = (48, 32)

    def validate(self):
        if self.latent_channels % 3 != 0:
            raise BadConfigError("latent_channels must be 3 * factor^2")
        if self.epi_dim % self.epi_heads != 0:
            raise BadConfigError("epi_dim must divide evenly into heads")
        if len(self.backbone_channels) != 3:
            raise BadConfigError("backbone uses exactly three levels")
        if self.depth_samples < 1 or self.epi_samples < 2:
            raise BadConfigError("need >= 1 depth sample and >= 2 epipolar samples")


@dataclass
class SceneConfig:
    n_splats: int = 48
    frames: int = 8            # M = refs + targets
    refs: int = 1              # K
    novel: int = 6             # J extra supervision-only views
    image_size: int = 64


@dataclass
class TrainConfig:
    lr: float = 1e-4           # desk-scale default
    full_scale_lr: float = 3e-5  # preset used when training at production scale
    weight_decay: float = 1e-4
    steps: int = 2000
    batch_scenes: int = 1
    sigma_dist: str = "mixed"  # "lognormal" | "mixed" (adds log-uniform tail)
    lambda_lr: float = 1.0
    lambda_nv: float = 1.0
    lambda_depth: float = 0.1
    depth_supervised: bool = False
    splat_condition: bool = False  # fill target condition slots from the scene so far
    n_train_scenes: int = 64
    log_every: int = 50
    preview_every: int = 0     # 0 disables preview renders


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 0           # 0: leave thread counts untouched
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.model.validate()
        if self.scene.refs < 1 or self.scene.refs >= self.scene.frames:
            raise BadConfigError("need 1 <= refs < frames")
        expected_c = 3 * self.diffusion.latent_factor**2
        if self.model.latent_channels != expected_c:
            raise BadConfigError(
                f"latent_channels {self.model.latent_channels} != 3*factor^2 = {expected_c}"
            )
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def snapshot(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        cfg = RunConfig()
        _apply(cfg, doc)
        return cfg.validate()

    @staticmethod
    def from_file(path) -> "RunConfig":
        path = Path(path)
        if path.suffix == ".toml":
            doc = tomllib.loads(path.read_text())
        else:
            doc = json.loads(path.read_text())
        return RunConfig.from_dict(doc)

    def apply_overrides(self, overrides: dict) -> "RunConfig":
        """Dotted-key overrides, e.g. {"train.lr": 3e-4, "seed": 7}."""
        for key, value in overrides.items():
            target = self
            parts = key.split(".")
            for part in parts[:-1]:
                target = getattr(target, part)
            leaf = parts[-1]
            if not hasattr(target, leaf):
                raise BadConfigError(f"unknown config key: {key}")
            current = getattr(target, leaf)
            if isinstance(current, tuple):
                value = tuple(value)
            elif current is not None and not isinstance(value, type(current)):
                value = type(current)(value)
            setattr(target, leaf, value)
        return self.validate()


def _apply(obj, doc: dict):
    for key, value in doc.items():
        if not hasattr(obj, key):
            raise BadConfigError(f"unknown config key: {key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise BadConfigError(f"config section {key} must be a table")
            _apply(current, value)
        elif isinstance(current, tuple):
            setattr(obj, key, tuple(value))
        else:
            setattr(obj, key, value)
