"""Configuration dataclasses and the two named presets.

Every dimension that differs between the full-size ("paper") and the
laptop-size ("desk") configuration lives here.  Modules take config
objects rather than bare ints so presets stay consistent end to end.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class CameraConfig:
    radius: float = 2.0
    fov_degrees: float = 40.0
    near: float = 0.1
    far: float = 4.0          # 2 * radius
    elevation_low: float = 0.0
    elevation_high: float = 30.0


@dataclass(frozen=True)
class RenderConfig:
    resolution: int = 32      # feature image is resolution x resolution
    n_samples: int = 24       # depth samples per ray
    depth_output: bool = True


@dataclass(frozen=True)
class TriPlaneConfig:
    resolution: int = 32
    channels: int = 8         # per plane; decoder sees 3x this

    @property
    def total_channels(self) -> int:
        return 3 * self.channels


@dataclass(frozen=True)
class DecoderConfig:
    hidden_width: int = 64
    color_channels: int = 8   # feature-image channels produced per point


@dataclass(frozen=True)
class GeneratorConfig:
    z_dim: int = 64
    embed_dim: int = 32
    mapping_width: int = 64
    mapping_layers: int = 4
    # synthesis: learned constant seed upsampled through modulated conv blocks
    seed_resolution: int = 8
    synthesis_channels: tuple[int, ...] = (24, 20, 16, 16)  # seed, then per block
    sr_channels: tuple[int, ...] = (12, 12)                 # super-resolution stack

    @property
    def w_dim(self) -> int:
        return self.mapping_width + self.embed_dim


@dataclass(frozen=True)
class DiscriminatorConfig:
    channels: tuple[int, ...] = (12, 24, 48, 48)
    head_width: int = 48


@dataclass(frozen=True)
class VocabularyConfig:
    shapes: tuple[str, ...] = ("sphere", "box", "torus", "capsule")
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    styles: tuple[str, ...] = ("plain", "striped")
    samples_per_prompt: int = 25
    heldout_prompts: int = 4
    image_resolution: int = 64


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch: int = 8
    lr_g: float = 2.5e-3
    lr_d: float = 2e-3
    beta1: float = 0.0
    beta2: float = 0.99
    adam_eps: float = 1e-8
    lambda_r1: float = 1.0
    r1_interval: int = 16
    lambda_clip: float = 0.1
    pose_swap_prob: float = 0.5
    checkpoint_interval: int = 1000
    workers: int = 1
    seed: int = 0


@dataclass(frozen=True)
class Config:
    preset: str = "desk"
    camera: CameraConfig = field(default_factory=CameraConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    triplane: TriPlaneConfig = field(default_factory=TriPlaneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    vocabulary: VocabularyConfig = field(default_factory=VocabularyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def image_resolution(self) -> int:
        return 2 * self.render.resolution

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Stable hash of the full configuration (used by checkpoints)."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def desk_config(**train_overrides) -> Config:
    """Small configuration that trains end to end on a single CPU.

    Narrower than the library defaults on purpose: the end-to-end run has a
    wall-clock budget on one core, and the dominant per-step costs scale with
    decoder width, depth samples per ray, and discriminator channel counts.
    These sizes meet the budget while still training to the acceptance
    thresholds, which are relative (distribution distance versus its own
    starting point, matched-versus-mismatched alignment), not absolute image
    quality.
    """
    cfg = Config(
        render=RenderConfig(resolution=32, n_samples=16),
        decoder=DecoderConfig(hidden_width=16, color_channels=8),
        generator=GeneratorConfig(synthesis_channels=(20, 16, 12, 12), sr_channels=(8, 8)),
        discriminator=DiscriminatorConfig(channels=(8, 16, 32, 32), head_width=32),
    )
    if train_overrides:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train_overrides))
    return cfg


def paper_config(**train_overrides) -> Config:
    """Full-size configuration matching the published dimensions.

    Construction and shape contracts are exercised by the test suite; actual
    training at this size is out of scope for CPU runs.
    """
    cfg = Config(
        preset="paper",
        render=RenderConfig(resolution=128, n_samples=96),
        triplane=TriPlaneConfig(resolution=256, channels=32),
        decoder=DecoderConfig(hidden_width=64, color_channels=32),
        generator=GeneratorConfig(
            z_dim=512,
            embed_dim=768,
            mapping_width=512,
            mapping_layers=4,
            seed_resolution=4,
            synthesis_channels=(256, 256, 128, 128, 96, 96, 96, 96),
            sr_channels=(64, 64),
        ),
        discriminator=DiscriminatorConfig(channels=(32, 64, 128, 256, 256, 256), head_width=256),
        vocabulary=VocabularyConfig(samples_per_prompt=25, image_resolution=256),
        train=TrainConfig(batch=32),
    )
    if train_overrides:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train_overrides))
    return cfg


PRESETS = {"desk": desk_config, "paper": paper_config}


def get_config(preset: str, **train_overrides) -> Config:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    return PRESETS[preset](**train_overrides)


def config_from_dict(d: dict) -> Config:
    """Inverse of Config.to_dict(): rebuild from a parsed config.json.

    JSON turns tuples into lists, so sequence fields are converted back;
    the round trip preserves equality and the digest.
    """
    gen = dict(d["generator"])
    gen["synthesis_channels"] = tuple(gen["synthesis_channels"])
    gen["sr_channels"] = tuple(gen["sr_channels"])
    disc = dict(d["discriminator"])
    disc["channels"] = tuple(disc["channels"])
    vocab = dict(d["vocabulary"])
    for key in ("shapes", "colors", "styles"):
        vocab[key] = tuple(vocab[key])
    return Config(
        preset=d["preset"],
        camera=CameraConfig(**d["camera"]),
        render=RenderConfig(**d["render"]),
        triplane=TriPlaneConfig(**d["triplane"]),
        decoder=DecoderConfig(**d["decoder"]),
        generator=GeneratorConfig(**gen),
        discriminator=DiscriminatorConfig(**disc),
        vocabulary=VocabularyConfig(**vocab),
        train=TrainConfig(**d["train"]),
    )
