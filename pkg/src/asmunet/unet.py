"""3D encoder/decoder segmentation network hosting the ASM blocks."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import torch
import torch.nn as nn

from .asm import AsmBlock, AsmConfig

ASM_SITES = ("after_encoder_1", "before_last_decoder")


class ConfigError(ValueError):
    pass


@dataclass
class NetConfig:
    n_stages: int = 4
    strides: tuple = (1, 2, 2, 2)
    channels: tuple = (8, 16, 32, 64)
    in_channels: int = 1
    n_classes: int = 9
    asm: AsmConfig = field(default_factory=AsmConfig)
    asm_sites: tuple = ASM_SITES

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.channels = tuple(int(c) for c in self.channels)
        self.asm_sites = tuple(self.asm_sites)
        if not (len(self.strides) == len(self.channels) == self.n_stages):
            raise ConfigError("strides and channels must both have n_stages entries")
        if self.n_stages < 2:
            raise ConfigError("need at least two stages")
        if any(s not in (1, 2) for s in self.strides):
            raise ConfigError(f"strides must be 1 or 2, got {self.strides}")
        unknown = set(self.asm_sites) - set(ASM_SITES)
        if unknown:
            raise ConfigError(f"unknown ASM sites {sorted(unknown)}")

    @property
    def total_stride(self):
        return prod(self.strides)


def paper_config(n_classes=9, asm=None):
    return NetConfig(6, (1, 2, 2, 2, 2, 2), (32, 64, 128, 256, 320, 320), 1, n_classes,
                     asm or AsmConfig(n_branches=3))


def _conv_norm_relu(c_in, c_out, stride):
    return [nn.Conv3d(c_in, c_out, 3, stride=stride, padding=1),
            nn.InstanceNorm3d(c_out, affine=True),
            nn.ReLU(inplace=True)]


class EncoderBlock(nn.Sequential):
    def __init__(self, c_in, c_out, stride):
        super().__init__(*_conv_norm_relu(c_in, c_out, stride), *_conv_norm_relu(c_out, c_out, 1))


class DecoderBlock(nn.Module):
    def __init__(self, c_in, c_skip, c_out, stride):
        super().__init__()
        self.up = nn.ConvTranspose3d(c_in, c_out, stride, stride=stride)
        self.convs = nn.Sequential(*_conv_norm_relu(c_out + c_skip, c_out, 1),
                                   *_conv_norm_relu(c_out, c_out, 1))

    def forward(self, x, skip):
        return self.convs(torch.cat([self.up(x), skip], dim=1))


class ASMUNet(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        ch, st = cfg.channels, cfg.strides
        self.encoders = nn.ModuleList(
            [EncoderBlock(cfg.in_channels if i == 0 else ch[i - 1], ch[i], st[i])
             for i in range(cfg.n_stages)])
        # decoders[j] restores the resolution of encoder stage j
        self.decoders = nn.ModuleList(
            [DecoderBlock(ch[j + 1], ch[j], ch[j], st[j + 1]) for j in range(cfg.n_stages - 1)])
        self.head = nn.Conv3d(ch[0], cfg.n_classes, 1)
        use = set(cfg.asm_sites) if cfg.asm.n_branches > 0 else set()
        self.asm_enc = AsmBlock(ch[0], cfg.asm) if "after_encoder_1" in use else None
        # input of the last decoder block lives at stage-1 resolution and width
        self.asm_dec = AsmBlock(ch[1], cfg.asm) if "before_last_decoder" in use else None

    def check_input(self, x):
        if x.dim() != 5 or x.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected (B, {self.cfg.in_channels}, W, H, D), got {tuple(x.shape)}")
        bad = [n for n in x.shape[2:] if n % self.cfg.total_stride]
        if bad:
            raise ConfigError(
                f"patch dims {tuple(x.shape[2:])} not divisible by total stride {self.cfg.total_stride}")

    def forward(self, x):
        """``x`` (B, in_channels, W, H, D) -> logits (B, n_classes, W, H, D)."""
        self.check_input(x)
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i == 0 and self.asm_enc is not None:
                x = self.asm_enc(x)
            skips.append(x)
        x = skips.pop()
        for j in range(len(self.decoders) - 1, -1, -1):
            if j == 0 and self.asm_dec is not None:
                x = self.asm_dec(x)
            x = self.decoders[j](x, skips.pop())
        return self.head(x)

    def shape_trace(self, patch):
        """Spatial dims after each encoder stage, without running convolutions."""
        dims, out = tuple(patch), []
        for s in self.cfg.strides:
            dims = tuple(-(-n // s) for n in dims)
            out.append(dims)
        return out
