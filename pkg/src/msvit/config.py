"""Model configuration, named profiles and canonical text form."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from typing import Any

from .attention import MSSA_VARIANTS
from .embedding import PIPELINES
from .spike import LifParams

ATTENTION_KINDS = ("mssa", "ssa")


class ConfigError(ValueError):
    """Raised with every problem found in a configuration."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class ModelConfig:
    in_channels: int = 3
    img_size: tuple[int, int] = (32, 32)
    timesteps: int = 4
    dims: tuple[int, int, int] = (96, 192, 384)
    depths: tuple[int, int, int] = (1, 1, 2)
    attention: tuple[str, str, str] = ("mssa", "mssa", "ssa")
    mssa_variant: str = "pq"
    mssa_proj: bool = True
    embed_pipeline: str = "g1"
    mlp_ratio: int = 4
    heads: int = 8
    ssa_scale: float = 0.125
    lif: LifParams = field(default_factory=LifParams)
    num_classes: int = 10
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.in_channels < 1:
            out.append("in_channels must be >= 1")
        if len(self.img_size) != 2 or any(s < 16 or s % 16 for s in self.img_size):
            out.append(f"img_size {tuple(self.img_size)} must be two sides divisible by 16")
        if self.timesteps < 1:
            out.append("timesteps must be >= 1")
        if len(self.dims) != 3 or any(d < 2 for d in self.dims):
            out.append(f"dims {tuple(self.dims)} must be three values >= 2")
        if len(self.depths) != 3 or any(d < 0 for d in self.depths):
            out.append(f"depths {tuple(self.depths)} must be three values >= 0")
        elif not any(self.depths):
            out.append("at least one stage needs depth >= 1")
        if len(self.attention) != 3 or any(a not in ATTENTION_KINDS for a in self.attention):
            out.append(f"attention {tuple(self.attention)} must be three of {ATTENTION_KINDS}")
        if self.mssa_variant not in MSSA_VARIANTS:
            out.append(f"mssa_variant {self.mssa_variant!r} not in {MSSA_VARIANTS}")
        if self.embed_pipeline not in PIPELINES:
            out.append(f"embed_pipeline {self.embed_pipeline!r} not in {PIPELINES}")
        if self.mlp_ratio < 1:
            out.append("mlp_ratio must be >= 1")
        if self.heads < 1:
            out.append("heads must be >= 1")
        elif len(self.dims) == 3 and len(self.attention) == 3:
            for d, a in zip(self.dims, self.attention):
                if a == "ssa" and d % self.heads:
                    out.append(f"SSA stage dim {d} not divisible by {self.heads} heads")
        if self.num_classes < 1:
            out.append("num_classes must be >= 1")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("img_size", "dims", "depths", "attention"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown key {k!r}" for k in unknown])
        kw: dict[str, Any] = dict(data)
        for k in ("img_size", "dims", "depths", "attention"):
            if k in kw:
                kw[k] = tuple(kw[k])
        if "lif" in kw and isinstance(kw["lif"], dict):
            lif_known = {f.name for f in fields(LifParams)}
            bad = sorted(set(kw["lif"]) - lif_known)
            if bad:
                raise ConfigError([f"unknown key 'lif.{k}'" for k in bad])
            try:
                kw["lif"] = LifParams(**kw["lif"])
            except ValueError as e:
                raise ConfigError(str(e)) from None
        return cls(**kw)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)

    def token_grids(self) -> list[tuple[int, int]]:
        h, w = self.img_size
        return [(h // 4, w // 4), (h // 8, w // 8), (h // 16, w // 16)]


def profile_names() -> list[str]:
    root = resources.files("msvit") / "profiles"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_profile(name: str) -> ModelConfig:
    root = resources.files("msvit") / "profiles"
    path = root / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"unknown profile {name!r}; available: {', '.join(profile_names())}")
    return ModelConfig.from_dict(json.loads(path.read_text()))


def load_config_file(path) -> ModelConfig:
    with open(path) as fh:
        data = json.load(fh)
    if "model" in data and isinstance(data["model"], dict):
        data = data["model"]
    return ModelConfig.from_dict(data)
