"""Token mixers (MSSA, SSA), the spiking MLP, and the MSFormer block."""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn

from .energy import active_profiler
from .spike import (IMAGE, LIF, TOKEN, LifParams, SeqBN, SpikeConv2d, SpikeError,
                    SpikeLinear, assign_paths, image_to_tokens, tokens_to_image)

MSSA_VARIANTS = ("pq", "pp", "qq", "p", "q")


def _record(name: str, kind: str, flops: int, operand: torch.Tensor, samples: int) -> None:
    prof = active_profiler()
    if prof is not None:
        with torch.no_grad():
            spikes = float(operand.sum())
        prof.record(name, kind, flops, spikes, operand.numel(), samples,
                    sops=spikes * flops / max(1, operand[0, 0].numel()))


def column_sum(x: torch.Tensor) -> torch.Tensor:
    """Per-token spike count over the channel axis: ``(T, B, N, D) -> (T, B, N)``."""
    return x.sum(dim=-1)


def mssa_attend(branches: list[torch.Tensor], v: torch.Tensor, gate_lif: nn.Module,
                name: str = "mssa") -> torch.Tensor:
    """Gate the rows of ``v`` by a spiking neuron driven by summed column sums.

    ``branches`` are the Q/P spike maps, each ``(T, B, N, D)``. The gate neuron
    integrates ``sum_c(Q) + sum_c(P)`` over time; token ``n`` of ``v`` survives
    at step ``t`` iff the gate fires there.
    """
    t, b, n, d = v.shape
    alpha = column_sum(branches[0])
    for q in branches[1:]:
        alpha = alpha + column_sum(q)
    gate = gate_lif(alpha)
    for i, q in enumerate(branches):
        _record(f"{name}.colsum{i}", "mssa_colsum", n * d, q, b)
    _record(f"{name}.gate", "mssa_gate", n * d, v, b)
    return gate.unsqueeze(-1) * v


def ssa_attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int, scale: float,
               attn_lif: nn.Module, name: str = "ssa") -> torch.Tensor:
    """``SN((Q K^T) V * s)`` per head, heads concatenated; no softmax."""
    t, b, n, d = q.shape
    if d % heads:
        raise SpikeError(f"dim {d} not divisible by {heads} heads")
    hd = d // heads

    def split(x):
        return x.reshape(t, b, n, heads, hd).transpose(2, 3)

    qh, kh, vh = split(q), split(k), split(v)
    attn = qh @ kh.transpose(-2, -1)
    out = (attn @ vh) * scale
    _record(f"{name}.qk", "ssa_qk", n * n * d, k, b)
    _record(f"{name}.av", "ssa_av", n * n * d, v, b)
    out = out.transpose(2, 3).reshape(t, b, n, d)
    return attn_lif(out)


class ConvBranch(nn.Module):
    """``SN(BN(conv(x)))`` over the token grid, returning token form."""

    def __init__(self, dim: int, kernel: int, lif: LifParams):
        super().__init__()
        self.conv = SpikeConv2d(dim, dim, kernel, stride=1)
        self.bn = SeqBN(dim, IMAGE)
        self.lif = LIF(lif)

    def forward(self, x, hw):
        y = self.bn(self.conv(tokens_to_image(x, hw)))
        return self.lif(image_to_tokens(y))


class LinearBranch(nn.Module):
    """``SN(BN(x W))`` on token form."""

    def __init__(self, d_in: int, d_out: int, lif: LifParams, use_bn: bool = True):
        super().__init__()
        self.linear = SpikeLinear(d_in, d_out)
        self.bn = SeqBN(d_out, TOKEN) if use_bn else nn.Identity()
        self.lif = LIF(lif)

    def forward(self, x):
        return self.lif(self.bn(self.linear(x)))


class MSSA(nn.Module):
    """Multi-scale spiking attention.

    Q comes from a 1x1 conv and P from a 3x3 conv over the stage's token grid;
    their per-token channel sums drive a LIF gate that masks V. ``variant``
    selects the branch pair: ``pq`` (default), ``pp``, ``qq``, ``p`` or ``q``.
    """

    def __init__(self, dim: int, lif: LifParams = LifParams(), variant: str = "pq",
                 proj: bool = True):
        super().__init__()
        if variant not in MSSA_VARIANTS:
            raise ValueError(f"unknown MSSA variant {variant!r}")
        self.variant = variant
        kernels = {"pq": (1, 3), "pp": (3, 3), "qq": (1, 1), "p": (3,), "q": (1,)}[variant]
        self.branches = nn.ModuleList(ConvBranch(dim, k, lif) for k in kernels)
        self.v = ConvBranch(dim, 1, lif)
        self.gate_lif = LIF(lif)
        self.proj = ConvBranch(dim, 1, lif) if proj else None
        self.path = "mssa"
        assign_paths(self, "mssa")

    def forward(self, x, hw):
        qs = [br(x, hw) for br in self.branches]
        v = self.v(x, hw)
        out = mssa_attend(qs, v, self.gate_lif, name=self.path)
        if self.proj is not None:
            out = self.proj(out, hw)
        return out


class SSA(nn.Module):
    """Spiking self-attention with integer Q K^T products and a fixed scale."""

    def __init__(self, dim: int, heads: int = 8, scale: float = 0.125,
                 lif: LifParams = LifParams()):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = scale
        self.q = LinearBranch(dim, dim, lif)
        self.k = LinearBranch(dim, dim, lif)
        self.v = LinearBranch(dim, dim, lif)
        self.attn_lif = LIF(lif)
        self.proj = LinearBranch(dim, dim, lif)
        self.path = "ssa"
        assign_paths(self, "ssa")

    def forward(self, x, hw=None):
        out = ssa_attend(self.q(x), self.k(x), self.v(x), self.heads, self.scale,
                         self.attn_lif, name=self.path)
        return self.proj(out)


class SMLP(nn.Module):
    """Two ``SN(BN(Linear))`` layers, ``D -> rD -> D``."""

    def __init__(self, dim: int, ratio: int = 4, lif: LifParams = LifParams(),
                 use_bn: bool = True):
        super().__init__()
        if ratio < 1:
            raise ValueError("mlp ratio must be >= 1")
        self.fc1 = LinearBranch(dim, dim * ratio, lif, use_bn)
        self.fc2 = LinearBranch(dim * ratio, dim, lif, use_bn)
        assign_paths(self, "smlp")

    def forward(self, x):
        if x.shape[-1] != self.fc1.linear.weight.shape[1]:
            raise SpikeError(f"SMLP expects dim {self.fc1.linear.weight.shape[1]}, "
                             f"got {x.shape[-1]}")
        return self.fc2(self.fc1(x))


class MSFormerBlock(nn.Module):
    """Token mixer and channel mixer, each with an integer (SEW) residual.

    ``y' = mixer(x) + x`` and ``y = smlp(y') + y'``. Residual sums are left as
    small integers; downstream kernels accumulate them natively.
    """

    def __init__(self, dim: int, kind: str = "mssa", lif: LifParams = LifParams(),
                 mlp_ratio: int = 4, heads: int = 8, scale: float = 0.125,
                 mssa_variant: str = "pq", mssa_proj: bool = True):
        super().__init__()
        self.kind = kind
        if kind == "mssa":
            self.mixer = MSSA(dim, lif, mssa_variant, mssa_proj)
        elif kind == "ssa":
            self.mixer = SSA(dim, heads, scale, lif)
        else:
            raise ValueError(f"unknown attention kind {kind!r}")
        self.mlp = SMLP(dim, mlp_ratio, lif)
        self.probe: Optional[callable] = None

    def forward(self, x, hw):
        y = self.mixer(x, hw) + x
        if self.probe is not None:
            self.probe("residual", y)
        y = self.mlp(y) + y
        if self.probe is not None:
            self.probe("residual", y)
        return y
