"""Backbone, pooling, BNNeck, part stripes and the multi-granularity fusion gate.

Feature maps follow the torch layout ``B x d x h x w``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    widths: tuple = (32, 64, 128, 256)
    stage_strides: tuple = (2, 2, 2)  # strides of all stages but the last
    final_stage_stride: int = 1
    input_size: tuple = (64, 32)  # (H0, W0)

    @property
    def strides(self) -> tuple:
        return tuple(self.stage_strides) + (self.final_stage_stride,)

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def output_hw(self) -> tuple[int, int]:
        h, w = self.input_size
        for s in self.strides:
            h, w = (h - 1) // s + 1, (w - 1) // s + 1
        return h, w

    def validate(self) -> list[str]:
        errors = []
        if len(self.stage_strides) != len(self.widths) - 1:
            errors.append("stage_strides needs one entry per stage except the last")
        if self.final_stage_stride not in (1, 2):
            errors.append("final_stage_stride must be 1 or 2")
        if any(w < 1 for w in self.widths):
            errors.append("widths must be positive")
        return errors


@dataclass
class PartConfig:
    num_parts: int = 8
    part_dim: int = 256
    reduction: int = 16
    mgf: bool = True


# ---------------------------------------------------------------- pooling


def gem_pool(x: torch.Tensor, n: torch.Tensor | float, eps: float = 1e-6) -> torch.Tensor:
    """Generalized mean over the spatial axes: ``(mean(a^n))^(1/n)`` per channel."""
    return x.clamp(min=eps).pow(n).mean(dim=(-2, -1)).pow(1.0 / n)


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class GeM(nn.Module):
    """GeM pooling with a learnable exponent kept >= 1 as ``1 + softplus(raw)``."""

    def __init__(self, init: float = 3.0, eps: float = 1e-6):
        super().__init__()
        if init <= 1.0:
            raise ConfigError("GeM exponent must start above 1")
        self.raw = nn.Parameter(torch.tensor(_softplus_inverse(init - 1.0)))
        self.eps = eps

    @property
    def n(self) -> torch.Tensor:
        return 1.0 + F.softplus(self.raw)

    def forward(self, x):
        return gem_pool(x, self.n, self.eps)


class AvgPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(-2, -1))


class MaxPool(nn.Module):
    def forward(self, x):
        return x.amax(dim=(-2, -1))


def make_pool(kind: str) -> nn.Module:
    if kind == "gem":
        return GeM()
    if kind == "gap":
        return AvgPool()
    if kind == "gmp":
        return MaxPool()
    raise ConfigError(f"unknown pooling {kind!r}")


# ---------------------------------------------------------------- backbone


def _conv_bn_relu(cin, cout, stride):
    return [
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    ]


class Backbone(nn.Module):
    """Four plain conv stages; the last ReLU keeps every activation >= 0."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        errors = cfg.validate()
        if errors:
            raise ConfigError("; ".join(errors))
        self.cfg = cfg
        layers = []
        cin = 3
        for width, stride in zip(cfg.widths, cfg.strides):
            layers += _conv_bn_relu(cin, width, stride) + _conv_bn_relu(width, width, 1)
            cin = width
        self.body = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        if tuple(x.shape[-2:]) != tuple(self.cfg.input_size) or x.shape[-3] != 3:
            raise ValueError(
                f"expected images of shape 3x{self.cfg.input_size[0]}x{self.cfg.input_size[1]}, "
                f"got {tuple(x.shape[1:])}"
            )
        return self.body(x)


# ---------------------------------------------------------------- BNNeck


class BNNeck(nn.Module):
    """Batch norm with a learnable scale and a shift pinned at zero.

    Before any training step the running statistics are (0, 1), so eval mode
    is an identity up to ``1 / sqrt(1 + eps)``.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.register_buffer("bias", torch.zeros(dim))
        self.register_buffer("running_mean", torch.zeros(dim))
        self.register_buffer("running_var", torch.ones(dim))
        self.eps = eps
        self.momentum = momentum

    def forward(self, x):
        return F.batch_norm(
            x, self.running_mean, self.running_var, self.weight, self.bias,
            self.training, self.momentum, self.eps,
        )


# ---------------------------------------------------------------- parts + fusion


def stripe_heights(h: int, num_parts: int) -> list[int]:
    if not 1 <= num_parts <= h:
        raise ConfigError(f"num_parts={num_parts} must lie in [1, h={h}]")
    base, rem = divmod(h, num_parts)
    return [base + 1 if j < rem else base for j in range(num_parts)]


def partition_parts(fmap: torch.Tensor, num_parts: int) -> list[torch.Tensor]:
    """Horizontal stripes, top to bottom; taller stripes come first."""
    return list(torch.split(fmap, stripe_heights(fmap.shape[-2], num_parts), dim=-2))


def part_reduce(stripe: torch.Tensor, n, proj: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """GeM-pool a stripe, then apply a ``d x d'`` projection (a pooled 1x1 conv)."""
    return gem_pool(stripe, n, eps) @ proj


def mgf_fuse(f: torch.Tensor, parts: list[torch.Tensor], w1, b1, w2, b2):
    """Returns ``(f_bar, f_tilde)`` with ``f_tilde = sigmoid(relu(f_bar W1 + b1) W2 + b2) * f_bar``."""
    f_bar = torch.cat([f, *parts], dim=-1)
    if f_bar.shape[-1] != w1.shape[0]:
        raise ValueError(f"fused width {f_bar.shape[-1]} does not match W1 rows {w1.shape[0]}")
    gate = torch.sigmoid(torch.relu(f_bar @ w1 + b1) @ w2 + b2)
    return f_bar, gate * f_bar


def mgf_hidden(total_dim: int, reduction: int) -> int:
    return max(1, total_dim // reduction)


class PartBranch(nn.Module):
    """Per-stripe GeM (own exponent each) followed by a bias-free d -> d' projection."""

    def __init__(self, in_dim: int, cfg: PartConfig):
        super().__init__()
        self.num_parts = cfg.num_parts
        self.pools = nn.ModuleList(GeM() for _ in range(cfg.num_parts))
        self.proj = nn.ParameterList(
            nn.Parameter(torch.randn(in_dim, cfg.part_dim) * math.sqrt(2.0 / in_dim))
            for _ in range(cfg.num_parts)
        )

    def forward(self, fmap):
        stripes = partition_parts(fmap, self.num_parts)
        return [
            part_reduce(s, pool.n, w, pool.eps) for s, pool, w in zip(stripes, self.pools, self.proj)
        ]


class MGF(nn.Module):
    def __init__(self, total_dim: int, reduction: int):
        super().__init__()
        hidden = mgf_hidden(total_dim, reduction)
        self.fc1 = nn.Linear(total_dim, hidden)
        self.fc2 = nn.Linear(hidden, total_dim)

    def forward(self, f, parts):
        return mgf_fuse(f, parts, self.fc1.weight.t(), self.fc1.bias, self.fc2.weight.t(), self.fc2.bias)
