"""Spiking patch embedding with multi-scale feature fusion (SPEMSF)."""
from __future__ import annotations

import torch
import torch.nn as nn

from .spike import IMAGE, LIF, LifParams, SeqBN, SpikeConv2d, SpikeError, assign_paths, maxpool2d

PIPELINES = ("g1", "g2")


def spike_or(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise OR of two spike maps, written so gradients reach both."""
    return a + b - a * b


class SPEMSF(nn.Module):
    """Fuse a 1x1 branch and a 3x3 branch into one spike map at half resolution.

    F: conv1x1(stride 2) -> BN -> SN.
    G1: conv3x3 -> BN -> maxpool -> SN -> conv3x3 -> BN -> SN.
    G2: conv3x3 -> BN -> SN -> conv3x3 -> BN -> maxpool -> SN.

    The 2x2 max pool performs G's stride-2 reduction so both branches land on
    the same grid. Outputs are OR-fused and stay binary.
    """

    def __init__(self, c_in: int, c_out: int, lif: LifParams = LifParams(),
                 pipeline: str = "g1", entrance: bool = False):
        super().__init__()
        if pipeline not in PIPELINES:
            raise ValueError(f"unknown SPEMSF pipeline {pipeline!r}")
        self.pipeline = pipeline
        self.c_out = c_out
        self.f_conv = SpikeConv2d(c_in, c_out, 1, stride=2, padding=0, entrance=entrance)
        self.f_bn = SeqBN(c_out, IMAGE)
        self.f_lif = LIF(lif)
        self.g_conv1 = SpikeConv2d(c_in, c_out, 3, entrance=entrance)
        self.g_bn1 = SeqBN(c_out, IMAGE)
        self.g_lif1 = LIF(lif)
        self.g_conv2 = SpikeConv2d(c_out, c_out, 3)
        self.g_bn2 = SeqBN(c_out, IMAGE)
        self.g_lif2 = LIF(lif)
        assign_paths(self, "spemsf")

    def branch_f(self, x):
        return self.f_lif(self.f_bn(self.f_conv(x)))

    def branch_g(self, x):
        y = self.g_bn1(self.g_conv1(x))
        if self.pipeline == "g1":
            y = self.g_lif1(maxpool2d(y))
            return self.g_lif2(self.g_bn2(self.g_conv2(y)))
        y = self.g_lif1(y)
        return self.g_lif2(maxpool2d(self.g_bn2(self.g_conv2(y))))

    def forward(self, x):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise SpikeError(f"SPEMSF needs even spatial dims, got {tuple(x.shape[-2:])}")
        return spike_or(self.branch_f(x), self.branch_g(x))


class Stage1Embed(nn.Module):
    """Two chained SPEMSF blocks: ``C0 -> C1/2 -> C1`` at a quarter resolution."""

    def __init__(self, c_in: int, c_out: int, lif: LifParams = LifParams(),
                 pipeline: str = "g1"):
        super().__init__()
        mid = max(1, c_out // 2)
        self.embed1 = SPEMSF(c_in, mid, lif, pipeline, entrance=True)
        self.embed2 = SPEMSF(mid, c_out, lif, pipeline)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise SpikeError(f"stage-1 embedding needs H, W divisible by 4, got {h}x{w}")
        return self.embed2(self.embed1(x))
