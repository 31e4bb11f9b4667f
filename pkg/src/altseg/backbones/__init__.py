"""Encoder-decoder vision backbones behind a single feature contract.

Every backbone maps (B, 1, H, W, D) input to a :class:`FeatureBundle` holding the
deepest encoder map (channels ``s1``, spatial ``/2**L``) and the full-resolution
last decoder map (channels ``s2``). Modality never enters here: the same weights
process CT and MR, and all conditioning happens in the head.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from ..errors import CompatibilityError, ConfigError, ShapeError

UNET3D = "unet3d"
SWIN3D = "swin3d"


@dataclass(frozen=True)
class FeatureBundle:
    """Backbone outputs: ``f_enc_last`` (B,S1,H',W',D') and ``f_dec_last`` (B,S2,H,W,D)."""

    f_enc_last: torch.Tensor
    f_dec_last: torch.Tensor

    def __post_init__(self) -> None:
        if self.f_enc_last.ndim != 5 or self.f_dec_last.ndim != 5:
            raise ShapeError("feature maps must be rank-5 (B,C,H,W,D)")
        if self.f_enc_last.shape[0] != self.f_dec_last.shape[0]:
            raise ShapeError("encoder/decoder features disagree on batch size")
        if self.s1 <= self.s2:
            raise ShapeError(f"expected S1 > S2, got S1={self.s1}, S2={self.s2}")

    @property
    def s1(self) -> int:
        return self.f_enc_last.shape[1]

    @property
    def s2(self) -> int:
        return self.f_dec_last.shape[1]


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture description; ``depth`` counts encoder downsamplings past full
    resolution for unet3d and attention stages for swin3d (whose patch embedding
    adds one more factor of 2)."""

    kind: str = UNET3D
    base_channels: int = 0      # S2; 0 resolves to the per-kind default (64 / 48)
    depth: int = 0              # 0 resolves to the per-kind default (5 / 4)
    patch_size: int = 96
    channel_cap: int = 512      # unet3d: channels stop doubling here
    window_size: int = 7        # swin3d attention window edge
    blocks_per_stage: int = 2   # swin3d transformer blocks per stage

    def __post_init__(self) -> None:
        if self.kind not in (UNET3D, SWIN3D):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.base_channels == 0:
            object.__setattr__(self, "base_channels", 64 if self.kind == UNET3D else 48)
        if self.depth == 0:
            object.__setattr__(self, "depth", 5 if self.kind == UNET3D else 4)
        if self.base_channels < 1 or self.depth < 1:
            raise ConfigError("base_channels and depth must be positive")
        if self.channel_cap < self.base_channels:
            raise ConfigError("channel_cap must be >= base_channels")
        if self.patch_size % self.downsample_factor != 0:
            raise ConfigError(
                f"patch size {self.patch_size} not divisible by the total "
                f"downsampling factor {self.downsample_factor}"
            )

    @property
    def downsample_factor(self) -> int:
        extra = 1 if self.kind == SWIN3D else 0   # swin's patch embedding halves once more
        return 2 ** (self.depth + extra)

    @property
    def s2(self) -> int:
        return self.base_channels

    @property
    def s1(self) -> int:
        raw = self.base_channels * 2**self.depth
        return min(raw, self.channel_cap) if self.kind == UNET3D else raw

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def build_backbone(cfg: BackboneConfig) -> torch.nn.Module:
    """Instantiate the configured backbone; its forward returns a FeatureBundle."""
    if cfg.kind == UNET3D:
        from .unet import UNet3dBackbone

        return UNet3dBackbone(cfg)
    from .swin import Swin3dBackbone

    return Swin3dBackbone(cfg)


def forward_features(backbone: torch.nn.Module, images: torch.Tensor) -> FeatureBundle:
    """Run the vision branch; wraps shape validation around ``backbone(images)``."""
    if images.ndim != 5 or images.shape[1] != 1:
        raise ShapeError(f"expected (B,1,H,W,D) input, got {tuple(images.shape)}")
    return backbone(images)


def save_backbone(backbone: torch.nn.Module, path: str | Path) -> None:
    """Self-describing checkpoint: config, its hash, and the weights."""
    cfg: BackboneConfig = backbone.config
    torch.save(
        {
            "config": asdict(cfg),
            "config_hash": cfg.content_hash(),
            "state_dict": backbone.state_dict(),
        },
        str(path),
    )


def load_backbone(path: str | Path) -> torch.nn.Module:
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    cfg = BackboneConfig(**payload["config"])
    if cfg.content_hash() != payload["config_hash"]:
        raise CompatibilityError(f"backbone checkpoint {path} fails its config hash")
    backbone = build_backbone(cfg)
    backbone.load_state_dict(payload["state_dict"])
    return backbone
