"""Projection-on-prototypes model: global branch, optional part branch and fused head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .nets import MGF, Backbone, BackboneConfig, BNNeck, ConfigError, PartBranch, PartConfig, make_pool
from .prototypes import PrototypeBank, init_prototypes, project

FEATURE_KINDS = ("f", "f_s", "f_tilde", "f_tilde_s")


@dataclass
class ModelConfig:
    arch: str = "pronet"  # pronet | pronetpp
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pooling: str = "gem"  # gap | gmp | gem
    parts: PartConfig = field(default_factory=PartConfig)

    @property
    def fused(self) -> bool:
        return self.arch == "pronetpp"

    @property
    def fused_dim(self) -> int:
        return self.backbone.out_dim + self.parts.num_parts * self.parts.part_dim

    def validate(self) -> list[str]:
        errors = list(self.backbone.validate())
        if self.arch not in ("pronet", "pronetpp"):
            errors.append(f"unknown model {self.arch!r}")
        if self.pooling not in ("gap", "gmp", "gem"):
            errors.append(f"unknown pooling {self.pooling!r}")
        if self.fused:
            h, _ = self.backbone.output_hw()
            if not 1 <= self.parts.num_parts <= h:
                errors.append(f"num_parts={self.parts.num_parts} must lie in [1, feature-map height {h}]")
            if self.parts.part_dim < 1:
                errors.append("part_dim must be >= 1")
            if self.parts.reduction < 1:
                errors.append("MGF reduction ratio must be >= 1")
        return errors


def to_tensor(images: np.ndarray | torch.Tensor) -> torch.Tensor:
    """``B x H x W x 3`` pixels in [0, 1] -> centred ``B x 3 x H x W`` float32."""
    x = torch.as_tensor(np.ascontiguousarray(images), dtype=torch.float32)
    return x.permute(0, 3, 1, 2).contiguous() - 0.5


class ReIDModel(nn.Module):
    def __init__(self, cfg: ModelConfig, num_classes: int, seed: int = 0):
        super().__init__()
        errors = cfg.validate()
        if errors:
            raise ConfigError("; ".join(errors))
        self.cfg = cfg
        self.num_classes = num_classes
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            d = cfg.backbone.out_dim
            self.backbone = Backbone(cfg.backbone)
            self.pool = make_pool(cfg.pooling)
            self.neck = BNNeck(d)
            self.classifier = init_prototypes(num_classes, d, gen, "global")
            if cfg.fused:
                pc = cfg.parts
                self.parts = PartBranch(d, pc)
                self.part_classifiers = nn.ModuleList(
                    init_prototypes(num_classes, pc.part_dim, gen, f"part_{j}") for j in range(pc.num_parts)
                )
                self.mgf = MGF(cfg.fused_dim, pc.reduction) if pc.mgf else None
                self.fused_neck = BNNeck(cfg.fused_dim)
                self.fused_classifier = init_prototypes(num_classes, cfg.fused_dim, gen, "fused")

    def banks(self) -> list[PrototypeBank]:
        return [m for m in self.modules() if isinstance(m, PrototypeBank)]

    def forward(self, x: torch.Tensor) -> dict:
        fmap = self.backbone(x)
        f = self.neck(self.pool(fmap))
        out = {"feature_map": fmap, "f": f, "f_s": project(f, self.classifier)}
        if self.cfg.fused:
            parts = self.parts(fmap)
            out["part_logits"] = [project(p, bank) for p, bank in zip(parts, self.part_classifiers)]
            if self.mgf is not None:
                _, fused = self.mgf(f, parts)
            else:
                fused = torch.cat([f, *parts], dim=-1)
            f_tilde = self.fused_neck(fused)
            out["f_tilde"] = f_tilde
            out["f_tilde_s"] = project(f_tilde, self.fused_classifier)
        return out

    def check_kind(self, kind: str) -> None:
        if kind not in FEATURE_KINDS:
            raise ConfigError(f"unknown feature kind {kind!r}")
        if kind.startswith("f_tilde") and not self.cfg.fused:
            raise ConfigError(f"feature kind {kind!r} needs the fused (pronetpp) model")

    @torch.no_grad()
    def embed(self, images, kind: str = "f_s") -> torch.Tensor:
        self.check_kind(kind)
        return self.forward(to_tensor(images) if isinstance(images, np.ndarray) else images)[kind]
