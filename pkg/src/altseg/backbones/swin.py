"""Windowed-attention 3D encoder with patch merging and a convolutional decoder.

Follows the usual stage schedule (patch embedding to half resolution at S2
channels, then ``depth`` stages of two transformer blocks each, channels
doubling at every patch-merging step) at reduced fidelity: boundary windows are
zero-padded instead of attention-masked, and shifted windows wrap cyclically
without masking. The feature contract, not weight-level parity, is the goal.
"""

from __future__ import annotations

import itertools

import torch
import torch.nn.functional as F
from torch import nn

from . import BackboneConfig, FeatureBundle
from .unet import _conv_in_relu, _DecoderStage


class _WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping cubic windows."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 3, heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        coords = torch.tensor(list(itertools.product(range(window), repeat=3)))
        rel = coords[:, None, :] - coords[None, :, :] + window - 1
        index = (rel[..., 0] * (2 * window - 1) + rel[..., 1]) * (2 * window - 1) + rel[..., 2]
        self.register_buffer("rel_index", index, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (num_windows, tokens, dim) with tokens == window**3
        n, t, c = x.shape
        qkv = self.qkv(x).reshape(n, t, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn + self.rel_bias[self.rel_index].permute(2, 0, 1).unsqueeze(0)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, t, c)
        return self.proj(out)


def _partition(x: torch.Tensor, w: int) -> tuple[torch.Tensor, tuple[int, int, int], tuple[int, int, int]]:
    """Pad (B,D,H,W,C) to window multiples and split into (N, w^3, C) windows."""
    b, d, h, wd, c = x.shape
    pd, ph, pw = (-d) % w, (-h) % w, (-wd) % w
    if pd or ph or pw:
        x = F.pad(x, (0, 0, 0, pw, 0, ph, 0, pd))
    dp, hp, wp = x.shape[1:4]
    x = x.view(b, dp // w, w, hp // w, w, wp // w, w, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, w**3, c)
    return x, (d, h, wd), (dp, hp, wp)


def _unpartition(win: torch.Tensor, w: int, b: int, orig, padded) -> torch.Tensor:
    dp, hp, wp = padded
    c = win.shape[-1]
    x = win.view(b, dp // w, hp // w, wp // w, w, w, w, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, dp, hp, wp, c)
    d, h, wd = orig
    return x[:, :d, :h, :wd]


class _SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, shift: int):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, D, H, W, C) channel-last tokens
        y = self.norm1(x)
        if self.shift:
            y = torch.roll(y, shifts=(-self.shift,) * 3, dims=(1, 2, 3))
        win, orig, padded = _partition(y, self.window)
        win = self.attn(win)
        y = _unpartition(win, self.window, x.shape[0], orig, padded)
        if self.shift:
            y = torch.roll(y, shifts=(self.shift,) * 3, dims=(1, 2, 3))
        x = x + y
        return x + self.mlp(self.norm2(x))


class _PatchMerging(nn.Module):
    """Group 2x2x2 token neighbourhoods and project the concatenation to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduce = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, c = x.shape
        x = x.view(b, d // 2, 2, h // 2, 2, w // 2, 2, c)
        x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(b, d // 2, h // 2, w // 2, 8 * c)
        return self.reduce(self.norm(x))


def _to_channel_first(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 4, 1, 2, 3).contiguous()


class Swin3dBackbone(nn.Module):
    """Four (by default) attention stages for encoding, conv stages for decoding."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.config = cfg
        s2, depth, w = cfg.base_channels, cfg.depth, cfg.window_size
        dims = [s2 * 2**i for i in range(depth + 1)]
        self.s1 = dims[-1]
        self.s2 = s2

        self.stem = nn.Sequential(
            _conv_in_relu(1, s2, kernel=3),
            _conv_in_relu(s2, s2, kernel=3),
        )
        self.patch_embed = nn.Conv3d(1, s2, kernel_size=2, stride=2)
        self.embed_norm = nn.LayerNorm(s2)

        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i in range(depth):
            heads = max(1, dims[i] // 16)
            blocks = [
                _SwinBlock(dims[i], heads, w, shift=0 if j % 2 == 0 else w // 2)
                for j in range(cfg.blocks_per_stage)
            ]
            self.stages.append(nn.Sequential(*blocks))
            self.merges.append(_PatchMerging(dims[i]))
        self.bottleneck_norm = nn.LayerNorm(dims[-1])

        ups = []
        for i in range(depth, 0, -1):
            ups.append(_DecoderStage(dims[i], c_skip=dims[i - 1], c_out=dims[i - 1], refine=True))
        ups.append(_DecoderStage(dims[0], c_skip=s2, c_out=s2, refine=True))
        self.ups = nn.ModuleList(ups)

    def forward(self, x: torch.Tensor) -> FeatureBundle:
        skips = [self.stem(x)]
        t = self.patch_embed(x).permute(0, 2, 3, 4, 1)
        t = self.embed_norm(t)
        for stage, merge in zip(self.stages, self.merges):
            t = stage(t)
            skips.append(_to_channel_first(t))
            t = merge(t)
        f_enc_last = _to_channel_first(self.bottleneck_norm(t))

        y = f_enc_last
        for up, skip in zip(self.ups, skips[::-1]):
            y = up(y, skip)
        return FeatureBundle(f_enc_last=f_enc_last, f_dec_last=y)
