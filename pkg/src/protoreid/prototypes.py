"""The retained classifier: prototype banks, projection, subsets and inspection."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .nets import ConfigError


class PrototypeBank(nn.Module):
    """``N^p x d`` classifier weights whose rows act as class prototypes.

    The bias is a zero buffer that is never trained; it exists so checkpoints
    and training can assert it stays zero.
    """

    def __init__(self, weight: torch.Tensor, tag: str = "global"):
        super().__init__()
        if weight.ndim != 2:
            raise ValueError("prototype weight must be a matrix")
        self.weight = nn.Parameter(weight)
        self.register_buffer("bias", torch.zeros(weight.shape[0], dtype=weight.dtype))
        self.tag = tag

    @property
    def num_prototypes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def forward(self, f):
        return project(f, self)


def init_prototypes(num_classes: int, dim: int, generator: torch.Generator | None = None, tag: str = "global"):
    """Rows ~ N(0, 1/dim), so row norms concentrate near one."""
    if num_classes < 2:
        raise ConfigError("a prototype bank needs at least 2 classes")
    w = torch.randn(num_classes, dim, generator=generator) / math.sqrt(dim)
    return PrototypeBank(w, tag)


def project(f: torch.Tensor, bank: PrototypeBank | torch.Tensor) -> torch.Tensor:
    """Raw prototype similarities ``f . W^T``; no softmax."""
    w = bank.weight if isinstance(bank, PrototypeBank) else bank
    if f.shape[-1] != w.shape[1]:
        raise ValueError(f"feature dim {f.shape[-1]} does not match prototype dim {w.shape[1]}")
    return f @ w.t()


def subset(bank: PrototypeBank, fraction: float, rng: np.random.Generator) -> tuple[PrototypeBank, np.ndarray]:
    """Uniform random row subset of size ``round(fraction * N^p)``.

    Returns the new bank and the selected (sorted) row indices. The original
    bank is left untouched.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"prototype fraction must lie in (0, 1], got {fraction}")
    n = bank.num_prototypes
    size = int(round(fraction * n))
    if size < 1:
        raise ConfigError(f"fraction {fraction} of {n} prototypes leaves no rows")
    if size == n:
        idx = np.arange(n)
    else:
        idx = np.sort(rng.choice(n, size=size, replace=False))
    weight = bank.weight.detach()[torch.as_tensor(idx)].clone()
    return PrototypeBank(weight, bank.tag), idx


def top_prototypes(f_s, k: int) -> list[tuple[int, float]]:
    """Top-``k`` prototypes by softmax score (temperature 1), lower index first on ties."""
    scores = np.asarray(f_s, dtype=np.float64).ravel()
    if k > scores.size:
        raise ValueError(f"k={k} exceeds the {scores.size} available prototypes")
    p = np.exp(scores - scores.max())
    p /= p.sum()
    order = np.lexsort((np.arange(p.size), -p))[:k]
    return [(int(j), float(p[j])) for j in order]
