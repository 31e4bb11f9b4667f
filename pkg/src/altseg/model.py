"""Full segmentation models: backbone plus head, called as ``model(images, modality)``."""

from __future__ import annotations

import torch
from torch import nn

from .backbones import BackboneConfig, build_backbone
from .core import Modality
from .errors import CompatibilityError, ConfigError
from .head import HeadConfig, TextConditionedHead
from .prompts import EmbeddingTable


class TextConditionedSegModel(nn.Module):
    """Backbone + text-driven dynamic head, with the frozen vectors as a buffer.

    The text table is baked in at construction; ``forward`` only needs the batch
    modality to select the CT or MR vector set.
    """

    def __init__(self, backbone: nn.Module, head: TextConditionedHead, table: EmbeddingTable):
        super().__init__()
        cfg = head.cfg
        if table.d_txt != cfg.d_txt:
            raise CompatibilityError(f"table d_txt {table.d_txt} != head d_txt {cfg.d_txt}")
        if backbone.s1 != cfg.s1 or backbone.s2 != cfg.s2:
            raise CompatibilityError(
                f"backbone declares S1={backbone.s1}, S2={backbone.s2} but head expects "
                f"S1={cfg.s1}, S2={cfg.s2}"
            )
        self.backbone = backbone
        self.head = head
        # (2, K, d_txt) ordered CT, MR; frozen, so a buffer rather than a parameter
        self.register_buffer("text_vectors", torch.from_numpy(table.stacked().copy()))

    @property
    def num_classes(self) -> int:
        return self.text_vectors.shape[1]

    def forward(self, images: torch.Tensor, modality: Modality) -> torch.Tensor:
        bundle = self.backbone(images)
        vectors = self.text_vectors[modality.index].to(images.dtype)
        return self.head.predict_stack(bundle, vectors)


class VisionOnlySegModel(nn.Module):
    """Baseline without text: a plain K-channel 1x1x1 conv head on decoder features."""

    def __init__(self, backbone: nn.Module, num_classes: int):
        super().__init__()
        if num_classes < 1:
            raise ConfigError("need at least one foreground class")
        self.backbone = backbone
        self.head = nn.Conv3d(backbone.s2, num_classes, kernel_size=1)
        self._num_classes = num_classes

    @property
    def num_classes(self) -> int:
        return self._num_classes

    def forward(self, images: torch.Tensor, modality: Modality) -> torch.Tensor:
        bundle = self.backbone(images)
        return torch.sigmoid(self.head(bundle.f_dec_last))


def build_model(
    backbone_cfg: BackboneConfig,
    table: EmbeddingTable | None,
    num_classes: int,
    head_cfg: HeadConfig | None = None,
) -> nn.Module:
    """Assemble a model; ``table=None`` selects the vision-only baseline."""
    backbone = build_backbone(backbone_cfg)
    if table is None:
        return VisionOnlySegModel(backbone, num_classes)
    if table.num_classes != num_classes:
        raise CompatibilityError(
            f"embedding table covers {table.num_classes} classes, task has {num_classes}"
        )
    if head_cfg is None:
        head_cfg = HeadConfig(d_txt=table.d_txt, s1=backbone_cfg.s1, s2=backbone_cfg.s2)
    return TextConditionedSegModel(backbone, TextConditionedHead(head_cfg), table)
