"""The three-stage hierarchical spiking transformer."""
from __future__ import annotations

import hashlib
from typing import Callable, Optional

import torch
import torch.nn as nn

from .attention import MSFormerBlock
from .config import ModelConfig
from .embedding import SPEMSF, Stage1Embed
from .spike import LIF, SpikeError, assign_paths, image_to_tokens, tokens_to_image


class MSViT(nn.Module):
    """SPEMSF-1 -> stage 1 -> SPEMSF-2 -> stage 2 -> SPEMSF-3 -> stage 3 -> head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c1, c2, c3 = cfg.dims
        lif = cfg.lif
        self.embed1 = Stage1Embed(cfg.in_channels, c1, lif, cfg.embed_pipeline)
        self.embed2 = SPEMSF(c1, c2, lif, cfg.embed_pipeline)
        self.embed3 = SPEMSF(c2, c3, lif, cfg.embed_pipeline)
        self.stages = nn.ModuleList()
        for dim, depth, kind in zip(cfg.dims, cfg.depths, cfg.attention):
            self.stages.append(nn.ModuleList(
                MSFormerBlock(dim, kind, lif, cfg.mlp_ratio, cfg.heads, cfg.ssa_scale,
                              cfg.mssa_variant, cfg.mssa_proj)
                for _ in range(depth)))
        self.head = nn.Linear(c3, cfg.num_classes)
        nn.init.zeros_(self.head.bias)
        self.probe: Optional[Callable[[str, torch.Tensor], None]] = None
        assign_paths(self)

    def _emit(self, tag, x):
        if self.probe is not None:
            self.probe(tag, x)

    def prepare_input(self, x: torch.Tensor) -> torch.Tensor:
        """Static ``(B, C, H, W)`` input is repeated over T; ``(T, B, C, H, W)``
        passes through."""
        cfg = self.cfg
        if x.dim() == 4:
            x = x.unsqueeze(0).expand(cfg.timesteps, *x.shape)
        if x.dim() != 5:
            raise SpikeError(f"expected (B, C, H, W) or (T, B, C, H, W), got {tuple(x.shape)}")
        t, b, c, h, w = x.shape
        if t != cfg.timesteps or c != cfg.in_channels or (h, w) != tuple(cfg.img_size):
            raise SpikeError(
                f"input (T={t}, C={c}, {h}x{w}) does not match config "
                f"(T={cfg.timesteps}, C={cfg.in_channels}, {cfg.img_size[0]}x{cfg.img_size[1]})")
        return x.to(self.head.weight.dtype)

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        """Final-stage token spikes ``(T, B, N3, C3)``."""
        x = self.prepare_input(x)
        grids = self.cfg.token_grids()
        embeds = (self.embed1, self.embed2, self.embed3)
        tokens = None
        for i, (embed, blocks, grid) in enumerate(zip(embeds, self.stages, grids)):
            img = x if tokens is None else tokens_to_image(tokens, grids[i - 1])
            tokens = image_to_tokens(embed(img))
            self._emit(f"stage{i + 1}.embed", tokens)
            for blk in blocks:
                tokens = blk(tokens, grid)
            self._emit(f"stage{i + 1}.out", tokens)
        return tokens

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x).mean(dim=2).mean(dim=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.pooled(x))

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def lif_layers(self):
        return [m for m in self.modules() if isinstance(m, LIF)]

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> MSViT:
    """Construct a model; the same seed always yields the same weights."""
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MSViT(cfg)


def stage_shapes(cfg: ModelConfig) -> list[dict]:
    """Per-stage token grid, token count, channels, depth and attention kind."""
    return [dict(stage=i + 1, grid=grid, tokens=grid[0] * grid[1], dim=dim, depth=depth,
                 attention=kind)
            for i, (grid, dim, depth, kind) in enumerate(
                zip(cfg.token_grids(), cfg.dims, cfg.depths, cfg.attention))]


def count_parameters(cfg: ModelConfig) -> int:
    """Parameter count without allocating weights."""
    with torch.device("meta"):
        return MSViT(cfg).num_parameters()
