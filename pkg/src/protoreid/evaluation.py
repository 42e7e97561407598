"""Feature extraction, cross-camera retrieval metrics, k-reciprocal re-ranking and the prototype-fraction sweep."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Dataset
from .model import ReIDModel, to_tensor
from .nets import ConfigError
from .prototypes import PrototypeBank, project, subset


class EvaluationError(ValueError):
    pass


@dataclass
class EvalResult:
    mAP: float
    cmc: np.ndarray
    aps: list = field(default_factory=list)
    num_valid: int = 0
    num_skipped: int = 0

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])


# ---------------------------------------------------------------- features


@torch.no_grad()
def extract_features(
    model: ReIDModel,
    dataset: Dataset,
    kind: str = "f_s",
    batch_size: int = 64,
    bank: PrototypeBank | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eval-mode, augmentation-free features for every record of ``dataset``.

    ``bank`` replaces the model's own prototypes for the projected kinds
    (``f_s`` uses the global bank, ``f_tilde_s`` the fused one).
    """
    model.check_kind(kind)
    was_training = model.training
    model.eval()
    raw_kind = "f_tilde" if kind.startswith("f_tilde") else "f"
    rows = []
    try:
        for start in range(0, len(dataset), batch_size):
            images = dataset.images(range(start, min(start + batch_size, len(dataset))))
            out = model(to_tensor(images))
            if kind.endswith("_s") and bank is not None:
                rows.append(project(out[raw_kind], bank))
            else:
                rows.append(out[kind])
    finally:
        model.train(was_training)
    feats = torch.cat(rows).numpy() if rows else np.zeros((0, 0), dtype=np.float32)
    return feats, dataset.pids(), dataset.camids()


def distance_matrix(query: np.ndarray, gallery: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """``Q x G`` distances in float64; cosine is ``1 - cos``, norms floored at 1e-12."""
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    if metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ gn.T
    if metric == "euclidean":
        sq = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * q @ g.T
        return np.sqrt(np.maximum(sq, 0.0))
    raise ConfigError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------- metrics


def evaluate(distmat, q_pids, g_pids, q_camids, g_camids, max_rank: int = 50) -> EvalResult:
    """mAP and CMC under the cross-camera protocol.

    Gallery entries sharing both pid and camera with the query, and distractor
    entries with pid -1, are dropped from that query's ranking. Ties in
    distance go to the lower gallery index. Queries left without any positive
    are skipped and counted.
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    q_pids, g_pids = np.asarray(q_pids), np.asarray(g_pids)
    q_camids, g_camids = np.asarray(q_camids), np.asarray(g_camids)
    nq, ng = distmat.shape
    if (len(q_pids), len(g_pids)) != (nq, ng) or len(q_camids) != nq or len(g_camids) != ng:
        raise ValueError("label arrays do not match the distance matrix shape")
    max_rank = max(1, min(max_rank, ng)) if ng else max_rank
    aps, cmcs, skipped = [], [], 0
    for i in range(nq):
        order = np.argsort(distmat[i], kind="stable")
        keep = ~(((g_pids[order] == q_pids[i]) & (g_camids[order] == q_camids[i])) | (g_pids[order] == -1))
        hits = (g_pids[order][keep] == q_pids[i]).astype(np.float64)
        if not hits.any():
            skipped += 1
            continue
        cum = np.cumsum(hits)
        positions = np.flatnonzero(hits)
        aps.append(float(np.mean(cum[positions] / (positions + 1.0))))
        cmc = np.minimum(cum, 1.0)
        if cmc.size < max_rank:
            cmc = np.concatenate([cmc, np.full(max_rank - cmc.size, cmc[-1])])
        cmcs.append(cmc[:max_rank])
    if not aps:
        raise EvaluationError("no query has a valid match in the gallery after cross-camera filtering")
    return EvalResult(float(np.mean(aps)), np.mean(cmcs, axis=0), aps, len(aps), skipped)


# ---------------------------------------------------------------- re-ranking


def _k_reciprocal(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, : k + 1]
    backward = initial_rank[forward, : k + 1]
    return forward[np.where(backward == i)[0]]


def rerank(
    query: np.ndarray,
    gallery: np.ndarray,
    k1: int = 20,
    k2: int = 6,
    lam: float = 0.3,
    metric: str = "cosine",
) -> np.ndarray:
    """k-reciprocal re-ranking: ``lam * d + (1 - lam) * d_jaccard`` over query+gallery.

    The original distance ``d`` is used unnormalized, so ``lam = 1`` returns
    exactly ``distance_matrix(query, gallery, metric)``.
    """
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    nq, total = q.shape[0], q.shape[0] + g.shape[0]
    if not 1 <= k1 < total:
        raise ValueError(f"k1={k1} must lie in [1, {total})")
    if not 1 <= k2 <= k1:
        raise ValueError(f"k2={k2} must lie in [1, k1={k1}]")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda={lam} must lie in [0, 1]")
    original = distance_matrix(q, g, metric)
    if lam == 1.0:
        return original
    feats = np.concatenate([q, g])
    dist = distance_matrix(feats, feats, metric)
    initial_rank = np.argsort(dist, axis=1, kind="stable")
    half = int(np.around(k1 / 2.0))
    V = np.zeros((total, total))
    for i in range(total):
        recip = _k_reciprocal(initial_rank, i, k1)
        expansion = recip
        for cand in recip:
            cand_recip = _k_reciprocal(initial_rank, cand, half)
            if len(np.intersect1d(cand_recip, recip)) > 2.0 / 3.0 * len(cand_recip):
                expansion = np.append(expansion, cand_recip)
        expansion = np.unique(expansion)
        weight = np.exp(-dist[i, expansion])
        V[i, expansion] = weight / weight.sum()
    if k2 != 1:
        V = np.stack([V[initial_rank[i, :k2]].mean(axis=0) for i in range(total)])
    jaccard = np.empty((nq, total - nq))
    for i in range(nq):
        inter = np.minimum(V[i][None, :], V[nq:]).sum(axis=1)
        jaccard[i] = 1.0 - inter / (2.0 - inter)
    return lam * original + (1.0 - lam) * jaccard


# ---------------------------------------------------------------- prototype sweep


def ablate_prototypes(
    bank: PrototypeBank,
    query_raw: np.ndarray,
    gallery_raw: np.ndarray,
    q_pids, g_pids, q_camids, g_camids,
    fractions,
    seeds,
) -> list[dict]:
    """Re-project raw features on random prototype subsets and evaluate each.

    Rows carry ``fraction, seed, mAP, rank1, num_prototypes, indices``.
    """
    rows = []
    qt = torch.as_tensor(np.asarray(query_raw, dtype=np.float32))
    gt = torch.as_tensor(np.asarray(gallery_raw, dtype=np.float32))
    for fraction in fractions:
        for seed in seeds:
            sub, idx = subset(bank, fraction, np.random.default_rng([seed, 0x5B5]))
            with torch.no_grad():
                qf, gf = project(qt, sub).numpy(), project(gt, sub).numpy()
            res = evaluate(distance_matrix(qf, gf), q_pids, g_pids, q_camids, g_camids)
            rows.append(
                {
                    "fraction": float(fraction), "seed": int(seed), "mAP": res.mAP, "rank1": res.rank(1),
                    "num_prototypes": int(len(idx)), "indices": " ".join(map(str, idx.tolist())),
                }
            )
    return rows
