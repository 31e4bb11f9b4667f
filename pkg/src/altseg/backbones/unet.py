"""Fully convolutional 3D U-Net backbone.

Channels double per downsampling stage up to ``channel_cap``. To keep the
parameter budget close to the reference scale (~19M at the 96/64/depth-5
default), stages below the cap use 3x3x3 strided downsampling plus a 3x3x3
refinement conv, while capped stages downsample with a cheap 2x2x2 strided conv
and skip refinement. The decoder mirrors this: transposed-conv upsampling,
1x1x1 fusion of the concatenated skip, and a 3x3x3 refinement below the cap.
"""

from __future__ import annotations

import torch
from torch import nn

from . import BackboneConfig, FeatureBundle


def _conv_in_relu(c_in: int, c_out: int, kernel: int, stride: int = 1) -> nn.Sequential:
    padding = kernel // 2 if kernel % 2 else 0
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, kernel, stride=stride, padding=padding, bias=False),
        nn.InstanceNorm3d(c_out, affine=True),
        nn.ReLU(inplace=True),
    )


class _DecoderStage(nn.Module):
    def __init__(self, c_in: int, c_skip: int, c_out: int, refine: bool):
        super().__init__()
        self.up = nn.Sequential(
            nn.ConvTranspose3d(c_in, c_out, kernel_size=2, stride=2, bias=False),
            nn.InstanceNorm3d(c_out, affine=True),
            nn.ReLU(inplace=True),
        )
        self.fuse = _conv_in_relu(c_out + c_skip, c_out, kernel=1)
        self.refine = _conv_in_relu(c_out, c_out, kernel=3) if refine else nn.Identity()

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.up(x)
        x = self.fuse(torch.cat([x, skip], dim=1))
        return self.refine(x)


class UNet3dBackbone(nn.Module):
    """Encoder-decoder with skip connections; see module docstring for the layout."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.config = cfg
        cap = cfg.channel_cap
        chans = [min(cfg.base_channels * 2**i, cap) for i in range(cfg.depth + 1)]
        self.s1 = chans[-1]
        self.s2 = chans[0]

        self.stem = nn.Sequential(
            _conv_in_relu(1, chans[0], kernel=3),
            _conv_in_relu(chans[0], chans[0], kernel=3),
        )
        downs = []
        for i in range(1, cfg.depth + 1):
            growing = chans[i] > chans[i - 1]
            stage = [_conv_in_relu(chans[i - 1], chans[i], kernel=3 if growing else 2, stride=2)]
            if chans[i] < cap:
                stage.append(_conv_in_relu(chans[i], chans[i], kernel=3))
            downs.append(nn.Sequential(*stage))
        self.downs = nn.ModuleList(downs)

        ups = []
        for i in range(cfg.depth, 0, -1):
            ups.append(
                _DecoderStage(chans[i], c_skip=chans[i - 1], c_out=chans[i - 1], refine=chans[i - 1] < cap)
            )
        self.ups = nn.ModuleList(ups)

    def forward(self, x: torch.Tensor) -> FeatureBundle:
        feats = [self.stem(x)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        f_enc_last = feats[-1]
        y = f_enc_last
        for up, skip in zip(self.ups, feats[-2::-1]):
            y = up(y, skip)
        return FeatureBundle(f_enc_last=f_enc_last, f_dec_last=y)
