"""Warmup + step-decay schedule, the training loop and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .container import ContainerError, load_container, save_container
from .data import AugmentConfig, BatchSpec, Dataset, epoch_batches
from .losses import LossConfig, total_loss
from .model import ReIDModel, to_tensor

logger = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "lr", "L_id", "L_tri", "L_part", "L_id_m", "L_tri_m", "L_total")


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimConfig:
    base_lr: float = 3.5e-4
    warmup_start_lr: float = 3.5e-5
    warmup_epochs: int = 10
    decay_epochs: list = field(default_factory=lambda: [30, 60])
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    total_epochs: int = 70
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    deterministic: bool = True

    def validate(self) -> list[str]:
        errors = []
        if self.warmup_start_lr > self.base_lr:
            errors.append("warmup_start_lr must not exceed base_lr")
        if not 0.0 < self.decay_factor < 1.0:
            errors.append("decay_factor must lie in (0, 1)")
        if self.warmup_epochs < 0 or self.total_epochs < 1:
            errors.append("warmup_epochs must be >= 0 and total_epochs >= 1")
        if self.weight_decay < 0:
            errors.append("weight_decay must be >= 0")
        return errors


def lr_at(epoch: int, cfg: OptimConfig) -> float:
    """Linear warmup over ``[0, warmup_epochs)``, then ``base_lr * factor^(milestones passed)``."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.warmup_start_lr + (epoch / cfg.warmup_epochs) * (cfg.base_lr - cfg.warmup_start_lr)
    passed = sum(1 for m in cfg.decay_epochs if m <= epoch)
    return cfg.base_lr * cfg.decay_factor**passed


def _no_decay(name: str) -> bool:
    # normalization parameters and GeM exponents
    return "neck" in name or ".raw" in name or name.startswith("pool.") or _is_backbone_bn(name)


def _is_backbone_bn(name: str) -> bool:
    if not name.startswith("backbone.body."):
        return False
    idx = int(name.split(".")[2])
    # backbone layers repeat as (conv, bn, relu)
    return idx % 3 == 1


def param_groups(model: ReIDModel, weight_decay: float):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.requires_grad:
            (no_decay if _no_decay(name) else decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


@dataclass
class Checkpoint:
    model_state: dict
    optim_state: dict
    optim_meta: dict
    epoch: int  # next epoch to run
    step: int
    config: dict
    rng: dict


class Trainer:
    def __init__(
        self,
        model: ReIDModel,
        train_set: Dataset,
        optim_cfg: OptimConfig,
        batch_spec: BatchSpec,
        loss_cfg: LossConfig,
        aug_cfg: AugmentConfig | None = None,
        config_snapshot: dict | None = None,
    ):
        if train_set.num_identities < batch_spec.P:
            raise TrainingError(f"train split has {train_set.num_identities} identities, P={batch_spec.P}")
        if optim_cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        self.model = model
        self.train_set = train_set
        self.optim_cfg = optim_cfg
        self.batch_spec = batch_spec
        self.loss_cfg = loss_cfg
        self.aug_cfg = aug_cfg
        self.config_snapshot = config_snapshot or {}
        self.optimizer = torch.optim.Adam(
            param_groups(model, optim_cfg.weight_decay), lr=lr_at(0, optim_cfg), betas=tuple(optim_cfg.betas)
        )
        self.epoch = 0
        self.step_count = 0
        self.log: list[dict] = []

    def set_lr(self, lr: float) -> None:
        for g in self.optimizer.param_groups:
            g["lr"] = lr

    def train_step(self, batch) -> dict:
        self.model.train()
        out = self.model(to_tensor(batch.images))
        bundle = total_loss(out, torch.as_tensor(batch.labels), self.loss_cfg)
        if not torch.isfinite(bundle.total):
            raise TrainingError(
                f"non-finite loss at epoch {self.epoch} step {self.step_count}; "
                f"batch record indices {batch.indices.tolist()}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        bundle.total.backward()
        self.optimizer.step()
        for bank in self.model.banks():
            if bool(bank.bias.any()):
                raise TrainingError(f"prototype bank {bank.tag} acquired a non-zero bias")
        self.step_count += 1
        return bundle.as_floats()

    def run_epoch(self) -> list[dict]:
        lr = lr_at(self.epoch, self.optim_cfg)
        self.set_lr(lr)
        rows = []
        for batch in epoch_batches(self.train_set, self.batch_spec, self.optim_cfg.seed, self.epoch, self.aug_cfg):
            losses = self.train_step(batch)
            rows.append(
                {
                    "step": self.step_count, "epoch": self.epoch, "lr": lr,
                    "L_id": losses["id"], "L_tri": losses["tri"], "L_part": losses["part"],
                    "L_id_m": losses["id_m"], "L_tri_m": losses["tri_m"], "L_total": losses["total"],
                }
            )
        self.log += rows
        self.epoch += 1
        return rows

    def fit(self, until: int | None = None, run_dir=None, checkpoint_every: int = 0) -> list[dict]:
        until = self.optim_cfg.total_epochs if until is None else until
        run_dir = Path(run_dir) if run_dir is not None else None
        while self.epoch < until:
            try:
                rows = self.run_epoch()
            except TrainingError as err:
                if run_dir is not None:
                    run_dir.mkdir(parents=True, exist_ok=True)
                    (run_dir / "failure.txt").write_text(str(err))
                raise
            if rows:
                logger.info("epoch %d  loss %.4f", self.epoch - 1, float(np.mean([r["L_total"] for r in rows])))
            if run_dir is not None:
                write_log(run_dir / "metrics.csv", self.log)
                if checkpoint_every and self.epoch % checkpoint_every == 0 and self.epoch < until:
                    save_checkpoint(self.checkpoint(), run_dir / f"checkpoint_epoch{self.epoch:03d}")
        if run_dir is not None:
            save_checkpoint(self.checkpoint(), run_dir / "checkpoint")
        return self.log

    # --------------------------------------------------------- checkpoints

    def checkpoint(self) -> Checkpoint:
        model_state = {k: v.detach().cpu().numpy().copy() for k, v in self.model.state_dict().items()}
        sd = self.optimizer.state_dict()
        optim_state = {}
        for idx, st in sd["state"].items():
            for key, val in st.items():
                optim_state[f"{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
        return Checkpoint(
            model_state=model_state,
            optim_state=optim_state,
            optim_meta={"param_groups": sd["param_groups"]},
            epoch=self.epoch,
            step=self.step_count,
            config=self.config_snapshot,
            rng={
                "seed": self.optim_cfg.seed,
                "epoch": self.epoch,
                "torch": torch.get_rng_state().numpy().astype(int).tolist(),
            },
        )

    def restore(self, ckpt: Checkpoint) -> None:
        load_model_state(self.model, ckpt.model_state)
        state: dict = {}
        for key, arr in ckpt.optim_state.items():
            idx, name = key.split("/", 1)
            state.setdefault(int(idx), {})[name] = torch.from_numpy(arr.copy())
        self.optimizer.load_state_dict({"state": state, "param_groups": ckpt.optim_meta["param_groups"]})
        self.epoch = ckpt.epoch
        self.step_count = ckpt.step
        if ckpt.rng.get("torch") is not None:
            torch.set_rng_state(torch.tensor(ckpt.rng["torch"], dtype=torch.uint8))


def load_model_state(model: ReIDModel, arrays: dict) -> None:
    current = model.state_dict()
    missing = [k for k in current if k not in arrays]
    if missing:
        raise ContainerError(f"checkpoint lacks array {missing[0]!r}")
    model.load_state_dict({k: torch.as_tensor(arrays[k]).to(current[k].dtype).reshape(current[k].shape) for k in current})


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    arrays = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    arrays.update({f"optim/{k}": v for k, v in ckpt.optim_state.items()})
    meta = {
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "config": ckpt.config,
        "rng": ckpt.rng,
        "optim": ckpt.optim_meta,
        "model_keys": list(ckpt.model_state),
        "optim_keys": list(ckpt.optim_state),
    }
    return save_container(path, arrays, meta, kind="checkpoint")


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = load_container(path, kind="checkpoint")
    for key in ("epoch", "step", "config", "rng", "optim", "model_keys", "optim_keys"):
        if key not in meta:
            raise ContainerError(f"checkpoint manifest lacks field {key!r}")
    model_state, optim_state = {}, {}
    for name in meta["model_keys"]:
        if f"model/{name}" not in arrays:
            raise ContainerError(f"checkpoint lacks array 'model/{name}'")
        model_state[name] = arrays[f"model/{name}"]
    for name in meta["optim_keys"]:
        if f"optim/{name}" not in arrays:
            raise ContainerError(f"checkpoint lacks array 'optim/{name}'")
        optim_state[name] = arrays[f"optim/{name}"]
    return Checkpoint(model_state, optim_state, meta["optim"], meta["epoch"], meta["step"], meta["config"], meta["rng"])


def write_log(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_FIELDS})


def uniform_baseline(num_classes: int) -> float:
    """ID loss of uniform logits, the reference a trained model must beat."""
    return math.log(num_classes)
