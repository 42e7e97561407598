"""Label-smoothed ID loss, batch-hard / batch-all triplet loss and the combined objective."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .nets import ConfigError

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


@dataclass
class TripletConfig:
    margin: float = 0.3
    metric: str = "cosine"  # euclidean | cosine
    target: str = "projected_feature"  # raw_feature | projected_feature
    variant: str = "batch_hard"  # batch_hard | batch_all
    enabled: bool = True

    def validate(self) -> list[str]:
        errors = []
        if self.margin < 0:
            errors.append("triplet margin must be >= 0")
        if self.metric not in ("euclidean", "cosine"):
            errors.append(f"unknown triplet metric {self.metric!r}")
        if self.target not in ("raw_feature", "projected_feature"):
            errors.append(f"unknown triplet target {self.target!r}")
        if self.variant not in ("batch_hard", "batch_all"):
            errors.append(f"unknown triplet variant {self.variant!r}")
        return errors


class TripletContractError(ValueError):
    pass


def smooth_targets(labels, num_classes: int, epsilon: float, dtype=torch.float64) -> torch.Tensor:
    """``1 - eps + eps/N`` on the true class, ``eps/N`` elsewhere."""
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"label smoothing epsilon must lie in [0, 1), got {epsilon}")
    labels = torch.as_tensor(labels).reshape(-1)
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label out of range")
    q = torch.full((labels.numel(), num_classes), epsilon / num_classes, dtype=dtype)
    q[torch.arange(labels.numel()), labels] += 1.0 - epsilon
    return q


def id_loss(logits: torch.Tensor, labels, epsilon: float = 0.1) -> torch.Tensor:
    """Batch mean cross-entropy between smoothed targets and ``softmax(logits)``."""
    q = smooth_targets(labels, logits.shape[-1], epsilon, dtype=logits.dtype).to(logits.device)
    return -(q * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def pairwise_distance(x: torch.Tensor, metric: str = "cosine", y: torch.Tensor | None = None) -> torch.Tensor:
    """Euclidean ``|x_i - y_j|`` or cosine ``1 - cos(x_i, y_j)``; ``y`` defaults to ``x``."""
    same = y is None
    y = x if same else y
    if metric == "cosine":
        nx = x.norm(dim=1, keepdim=True)
        ny = nx if same else y.norm(dim=1, keepdim=True)
        if bool((nx < NORM_FLOOR).any()) or bool((ny < NORM_FLOOR).any()):
            logger.warning("zero-norm feature under cosine distance; clamping norms at %g", NORM_FLOOR)
        xn = x / nx.clamp(min=NORM_FLOOR)
        yn = xn if same else y / ny.clamp(min=NORM_FLOOR)
        d = 1.0 - xn @ yn.t()
        if same:
            d = d - torch.diag_embed(torch.diagonal(d))
        return d
    if metric == "euclidean":
        diff = x[:, None, :] - y[None, :, :]
        sq = (diff * diff).sum(-1)
        # sqrt has an infinite slope at 0; keep the diagonal exactly 0 with a finite gradient
        off = sq > 0
        return torch.where(off, sq.clamp(min=1e-24).sqrt(), torch.zeros_like(sq))
    raise ConfigError(f"unknown metric {metric!r}")


def _masks(labels: torch.Tensor):
    labels = labels.reshape(-1)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(labels.numel(), dtype=torch.bool, device=labels.device)
    pos = same & ~eye
    neg = ~same
    if not bool(pos.any(1).all()) or not bool(neg.any(1).all()):
        raise TripletContractError("every anchor needs at least one positive and one negative in the batch")
    return pos, neg


def hardest_indices(dist: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Farthest positive and nearest negative per anchor, lowest index on ties."""
    pos, neg = _masks(labels)
    d = dist.detach()
    n = d.shape[0]
    ar = torch.arange(n, device=d.device).expand(n, n)
    big = torch.full_like(ar, n)
    pmax = torch.where(pos, d, torch.full_like(d, -float("inf"))).amax(1, keepdim=True)
    nmin = torch.where(neg, d, torch.full_like(d, float("inf"))).amin(1, keepdim=True)
    p_idx = torch.where(pos & (d == pmax), ar, big).amin(1)
    n_idx = torch.where(neg & (d == nmin), ar, big).amin(1)
    return p_idx, n_idx


def triplet_from_distances(dist: torch.Tensor, labels, margin: float, variant: str = "batch_hard") -> torch.Tensor:
    labels = torch.as_tensor(labels, device=dist.device)
    if variant == "batch_hard":
        if not bool(torch.isfinite(dist).all()):
            # mining is undefined; let the caller see a non-finite loss
            return dist.sum() * float("nan")
        p_idx, n_idx = hardest_indices(dist, labels)
        rows = torch.arange(dist.shape[0], device=dist.device)
        return F.relu(margin + dist[rows, p_idx] - dist[rows, n_idx]).mean()
    if variant == "batch_all":
        pos, neg = _masks(labels)
        valid = pos[:, :, None] & neg[:, None, :]
        hinge = F.relu(margin + dist[:, :, None] - dist[:, None, :])
        return hinge[valid].mean()
    raise ConfigError(f"unknown triplet variant {variant!r}")


def batch_hard_triplet(features: torch.Tensor, labels, cfg: TripletConfig) -> torch.Tensor:
    """Hinge ``[m + D(a, p) - D(a, n)]_+`` averaged over anchors (or all triplets for batch_all)."""
    return triplet_from_distances(pairwise_distance(features, cfg.metric), labels, cfg.margin, cfg.variant)


@dataclass
class LossConfig:
    epsilon: float = 0.1
    triplet: TripletConfig = field(default_factory=TripletConfig)

    def validate(self) -> list[str]:
        errors = self.triplet.validate()
        if not 0.0 <= self.epsilon < 1.0:
            errors.append("epsilon must lie in [0, 1)")
        return errors


@dataclass
class LossBundle:
    id: torch.Tensor
    tri: torch.Tensor
    part: torch.Tensor
    id_m: torch.Tensor
    tri_m: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("id", "tri", "part", "id_m", "tri_m", "total")}


def combine(l_id, l_tri, part_losses=(), l_id_m=None, l_tri_m=None) -> LossBundle:
    """``L_id + L_tri`` plus, for the fused model, the mean part loss and both fused terms."""
    zero = torch.zeros((), dtype=l_id.dtype, device=l_id.device)
    part = torch.stack(list(part_losses)).mean() if len(part_losses) else zero
    id_m = zero if l_id_m is None else l_id_m
    tri_m = zero if l_tri_m is None else l_tri_m
    return LossBundle(l_id, l_tri, part, id_m, tri_m, l_id + l_tri + part + id_m + tri_m)


def _triplet_term(raw, projected, labels, cfg: TripletConfig):
    if not cfg.enabled:
        return torch.zeros((), dtype=projected.dtype, device=projected.device)
    target = projected if cfg.target == "projected_feature" else raw
    return batch_hard_triplet(target, labels, cfg)


def total_loss(out: dict, labels, cfg: LossConfig) -> LossBundle:
    """Bundle every loss term from a model forward dict on one batch."""
    labels = torch.as_tensor(labels, device=out["f_s"].device)
    l_id = id_loss(out["f_s"], labels, cfg.epsilon)
    l_tri = _triplet_term(out["f"], out["f_s"], labels, cfg.triplet)
    if "f_tilde_s" not in out:
        return combine(l_id, l_tri)
    parts = [id_loss(logits, labels, cfg.epsilon) for logits in out["part_logits"]]
    l_id_m = id_loss(out["f_tilde_s"], labels, cfg.epsilon)
    l_tri_m = _triplet_term(out["f_tilde"], out["f_tilde_s"], labels, cfg.triplet)
    return combine(l_id, l_tri, parts, l_id_m, l_tri_m)
