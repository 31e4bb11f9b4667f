"""Text-conditioned dynamic segmentation head.

One shared 1x1x1 conv (Conv-1) compresses the last decoder map to ``c_pre``
channels. For each class, a controller MLP maps the concatenation of that
class's frozen text vector and the pooled encoder feature to a flat parameter
vector, which is split into three per-voxel linear layers (8, 8, then 1 output
channels) applied as dynamic 1x1x1 convolutions ending in a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbones import FeatureBundle
from .core import Modality
from .errors import CompatibilityError, ConfigError, ShapeError, ValidationError
from .prompts import EmbeddingTable

MID_CHANNELS = 8  # fixed width of the first two dynamic layers


@dataclass(frozen=True)
class HeadConfig:
    """Dimensions of the head; ``s1``/``s2`` must match the backbone's declaration."""

    d_txt: int
    s1: int
    s2: int
    c_pre: int = 8
    hidden: int = 256
    inner_activations: bool = True

    def __post_init__(self) -> None:
        if min(self.d_txt, self.s1, self.s2, self.c_pre, self.hidden) < 1:
            raise ConfigError("all head dimensions must be >= 1")

    @property
    def theta_size(self) -> int:
        """Flat parameter count of the three dynamic layers."""
        m = MID_CHANNELS
        return (self.c_pre * m + m) + (m * m + m) + (m + 1)


def split_sizes(c_pre: int) -> tuple[int, ...]:
    """Per-chunk lengths in the pinned order [w1, b1, w2, b2, w3, b3]."""
    m = MID_CHANNELS
    return (c_pre * m, m, m * m, m, m, 1)


@dataclass(frozen=True)
class ControllerParams:
    """A batch of flat dynamic-head parameter vectors plus their layer split.

    Weights flatten row-major; concatenating the split in order reproduces
    ``theta_flat`` exactly.
    """

    theta_flat: torch.Tensor  # (B, theta_size)
    c_pre: int

    def __post_init__(self) -> None:
        expected = sum(split_sizes(self.c_pre))
        if self.theta_flat.ndim != 2 or self.theta_flat.shape[1] != expected:
            raise ValidationError(
                f"theta must be (B, {expected}) for c_pre={self.c_pre}, "
                f"got {tuple(self.theta_flat.shape)}"
            )

    def split(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """[(w1,b1), (w2,b2), (w3,b3)] with weights shaped (B, out, in)."""
        b = self.theta_flat.shape[0]
        m = MID_CHANNELS
        chunks = torch.split(self.theta_flat, split_sizes(self.c_pre), dim=1)
        w1, b1, w2, b2, w3, b3 = chunks
        return [
            (w1.reshape(b, m, self.c_pre), b1),
            (w2.reshape(b, m, m), b2),
            (w3.reshape(b, 1, m), b3),
        ]

    @staticmethod
    def from_split(parts: list[tuple[torch.Tensor, torch.Tensor]]) -> "ControllerParams":
        flat = torch.cat([t.reshape(t.shape[0], -1) for pair in parts for t in pair], dim=1)
        c_pre = parts[0][0].shape[2]
        return ControllerParams(flat, c_pre)


def global_pool(f_enc_last: torch.Tensor) -> torch.Tensor:
    """Average over the spatial axes only: (B,S1,H',W',D') -> (B,S1)."""
    if f_enc_last.ndim != 5:
        raise ShapeError(f"expected rank-5 encoder features, got {tuple(f_enc_last.shape)}")
    return f_enc_last.mean(dim=(2, 3, 4))


def controller(
    e_txt_k: torch.Tensor, e_vis: torch.Tensor, mlp: nn.Module, c_pre: int
) -> ControllerParams:
    """Generate per-sample dynamic parameters from [text ++ pooled-vision]."""
    if e_vis.ndim != 2:
        raise ShapeError(f"e_vis must be (B,S1), got {tuple(e_vis.shape)}")
    if e_txt_k.ndim == 1:
        e_txt_k = e_txt_k.unsqueeze(0).expand(e_vis.shape[0], -1)
    if e_txt_k.shape[0] != e_vis.shape[0]:
        raise ShapeError("text and vision embeddings disagree on batch size")
    theta = mlp(torch.cat([e_txt_k, e_vis], dim=1))
    return ControllerParams(theta, c_pre)


def reduce_channels(f_dec_last: torch.Tensor, conv1: nn.Conv3d) -> torch.Tensor:
    """Shared learned 1x1x1 compression of decoder features to c_pre channels."""
    if f_dec_last.ndim != 5:
        raise ShapeError(f"expected rank-5 decoder features, got {tuple(f_dec_last.shape)}")
    if f_dec_last.shape[1] != conv1.in_channels:
        raise ShapeError(
            f"decoder features have {f_dec_last.shape[1]} channels, conv expects {conv1.in_channels}"
        )
    return conv1(f_dec_last)


def dynamic_head(
    f_head_pre: torch.Tensor, theta: ControllerParams, inner_activations: bool = True
) -> torch.Tensor:
    """Apply the three per-voxel dynamic layers; returns probabilities (B,1,H,W,D).

    The per-sample weights run as a single grouped convolution over the batch.
    """
    b, c, h, w, d = f_head_pre.shape
    if theta.theta_flat.shape[0] != b:
        raise ShapeError("theta batch size does not match features")
    if theta.c_pre != c:
        raise ValidationError(f"theta was built for c_pre={theta.c_pre}, features have {c}")

    x = f_head_pre.reshape(1, b * c, h, w, d)
    layers = theta.split()
    for i, (wt, bias) in enumerate(layers):
        out_ch = wt.shape[1]
        weight = wt.reshape(b * out_ch, wt.shape[2], 1, 1, 1)
        x = F.conv3d(x, weight, bias.reshape(-1), groups=b)
        if inner_activations and i < len(layers) - 1:
            x = F.relu(x)
    return torch.sigmoid(x.reshape(b, 1, h, w, d))


class TextConditionedHead(nn.Module):
    """Learned parts of the head: the controller MLP and Conv-1."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_txt + cfg.s1, cfg.hidden),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.hidden, cfg.theta_size),
        )
        self.conv1 = nn.Conv3d(cfg.s2, cfg.c_pre, kernel_size=1)

    def predict_class(self, bundle: FeatureBundle, e_txt_k: torch.Tensor) -> torch.Tensor:
        e_vis = global_pool(bundle.f_enc_last)
        theta = controller(e_txt_k, e_vis, self.mlp, self.cfg.c_pre)
        f_head_pre = reduce_channels(bundle.f_dec_last, self.conv1)
        return dynamic_head(f_head_pre, theta, self.cfg.inner_activations)

    def predict_stack(self, bundle: FeatureBundle, vectors: torch.Tensor) -> torch.Tensor:
        """Stack one-vs-all maps for each row of ``vectors`` (K, d_txt) -> (B,K,H,W,D)."""
        e_vis = global_pool(bundle.f_enc_last)
        f_head_pre = reduce_channels(bundle.f_dec_last, self.conv1)
        maps = []
        for k in range(vectors.shape[0]):
            theta = controller(vectors[k], e_vis, self.mlp, self.cfg.c_pre)
            maps.append(dynamic_head(f_head_pre, theta, self.cfg.inner_activations))
        return torch.cat(maps, dim=1)


def predict_all_classes(
    bundle: FeatureBundle,
    table: EmbeddingTable,
    modality: Modality,
    head: TextConditionedHead,
) -> torch.Tensor:
    """One-vs-all probability maps for every class under one modality's prompts."""
    if table.d_txt != head.cfg.d_txt:
        raise CompatibilityError(
            f"embedding table is {table.d_txt}-d but head expects {head.cfg.d_txt}-d text"
        )
    ref = bundle.f_dec_last
    vectors = torch.as_tensor(table.stacked()[modality.index], dtype=ref.dtype, device=ref.device)
    return head.predict_stack(bundle, vectors)


def fuse_multiclass(probs: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Threshold-then-argmax fusion; ties resolve to the smallest class index."""
    if probs.ndim != 5:
        raise ShapeError(f"expected (B,K,H,W,D) probabilities, got {tuple(probs.shape)}")
    k = probs.shape[1]
    maxv = probs.max(dim=1).values
    labels = torch.zeros_like(maxv, dtype=torch.int64)
    for idx in range(k - 1, -1, -1):
        labels = torch.where(probs[:, idx] == maxv, idx + 1, labels)
    labels[maxv < threshold] = 0
    return labels
