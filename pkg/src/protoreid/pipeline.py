"""Glue between a RunConfig and the train / eval building blocks."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset, generate_synthetic, load_dataset_root, load_manifest
from .evaluation import distance_matrix, evaluate, extract_features, rerank
from .model import ReIDModel
from .train import Trainer, load_checkpoint, load_model_state

logger = logging.getLogger(__name__)


def load_dataset(cfg: RunConfig) -> Dataset:
    src = cfg.dataset
    size = tuple(cfg.backbone.input_size)
    if src.synthetic is not None:
        return generate_synthetic(src.synthetic)
    if src.folder is not None:
        return load_dataset_root(src.folder, size)
    return load_manifest(src.manifest, size)


def build_model(cfg: RunConfig, num_classes: int) -> ReIDModel:
    return ReIDModel(cfg.model_config(), num_classes, seed=cfg.seed)


def make_trainer(cfg: RunConfig, dataset: Dataset) -> Trainer:
    train_set = dataset.split("train")
    model = build_model(cfg, train_set.num_identities)
    return Trainer(
        model, train_set, cfg.optim_config(), cfg.batch_spec(), cfg.loss_config(), cfg.augment, cfg.to_dict()
    )


def train_run(cfg: RunConfig, dataset: Dataset | None = None, run_dir=None) -> Trainer:
    cfg.validate()
    dataset = load_dataset(cfg) if dataset is None else dataset
    trainer = make_trainer(cfg, dataset)
    if run_dir is not None:
        run_dir = Path(run_dir)
        cfg.save(run_dir / "config.json")
    trainer.fit(run_dir=run_dir, checkpoint_every=cfg.checkpoint_every)
    return trainer


def model_from_checkpoint(path) -> tuple[ReIDModel, RunConfig]:
    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_dict(ckpt.config)
    num_classes = ckpt.model_state["classifier.weight"].shape[0]
    model = build_model(cfg, num_classes)
    load_model_state(model, ckpt.model_state)
    model.eval()
    return model, cfg


def retrieval_metrics(q_feats, g_feats, q_pids, g_pids, q_cams, g_cams, max_rank=10, rerank_args=None) -> dict:
    if rerank_args is None:
        dist = distance_matrix(q_feats, g_feats, "cosine")
    else:
        dist = rerank(q_feats, g_feats, *rerank_args)
    res = evaluate(dist, q_pids, g_pids, q_cams, g_cams, max_rank=max_rank)
    return {
        "mAP": res.mAP,
        "rank1": res.rank(1),
        "rank5": res.rank(5),
        "rank10": res.rank(10),
        "num_valid_queries": res.num_valid,
        "num_skipped_queries": res.num_skipped,
    }


def evaluate_model(model: ReIDModel, dataset: Dataset, kind: str, batch_size: int = 64, rerank_args=None) -> dict:
    query, gallery = dataset.split("query"), dataset.split("gallery")
    qf, qp, qc = extract_features(model, query, kind, batch_size)
    gf, gp, gc = extract_features(model, gallery, kind, batch_size)
    return retrieval_metrics(qf, gf, qp, gp, qc, gc, rerank_args=rerank_args)


def raw_kind(cfg: RunConfig) -> str:
    """Pre-projection feature whose prototype bank defines the retrieval space."""
    return "f_tilde" if cfg.model == "pronetpp" else "f"


def bank_of(model: ReIDModel):
    return model.fused_classifier if model.cfg.fused else model.classifier


def split_features(model: ReIDModel, dataset: Dataset, kind: str, batch_size: int = 64):
    q = extract_features(model, dataset.split("query"), kind, batch_size)
    g = extract_features(model, dataset.split("gallery"), kind, batch_size)
    return q, g


def mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0
