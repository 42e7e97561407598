"""Run configuration: one JSON document, strict keys, validated as a whole."""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import AugmentConfig, BatchSpec, SyntheticConfig
from .losses import LossConfig, TripletConfig
from .model import FEATURE_KINDS, ModelConfig
from .nets import BackboneConfig, PartConfig
from .train import OptimConfig


class ConfigValidationError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class DatasetSource:
    synthetic: SyntheticConfig | None = None
    folder: str | None = None  # root with train/ query/ gallery/
    manifest: str | None = None  # CSV path,pid,camid,split


@dataclass
class RerankConfig:
    k1: int = 20
    k2: int = 6
    lam: float = 0.3


@dataclass
class EvalConfig:
    feature_kind: str = "f_s"
    batch_size: int = 64
    max_rank: int = 10
    rerank: RerankConfig | None = None


@dataclass
class RunConfig:
    model: str = "pronet"
    dataset: DatasetSource = field(default_factory=lambda: DatasetSource(synthetic=SyntheticConfig(num_test_ids=32)))
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    batch: dict = field(default_factory=lambda: {"P": 4, "K": 4})
    parts: PartConfig = field(default_factory=PartConfig)
    pooling: str = "gem"
    triplet: TripletConfig = field(default_factory=TripletConfig)
    epsilon: float = 0.1
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    seed: int = 0
    checkpoint_every: int = 0

    # ------------------------------------------------------------ derived

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.model, self.backbone, self.pooling, self.parts)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.epsilon, self.triplet)

    def batch_spec(self) -> BatchSpec:
        return BatchSpec(int(self.batch["P"]), int(self.batch["K"]))

    def optim_config(self) -> OptimConfig:
        return dataclasses.replace(self.optim, seed=self.seed)

    # ------------------------------------------------------------ checks

    def validate(self) -> None:
        errors: list[str] = []
        errors += [f"model: {e}" for e in self.model_config().validate()]
        errors += [f"triplet: {e}" for e in self.triplet.validate()]
        if not 0.0 <= self.epsilon < 1.0:
            errors.append("epsilon: must lie in [0, 1)")
        errors += [f"optim: {e}" for e in self.optim.validate()]
        errors += [f"augment: {e}" for e in self.augment.validate()]
        if set(self.batch) != {"P", "K"}:
            errors.append("batch: needs exactly the keys P and K")
        elif int(self.batch["P"]) < 2 or int(self.batch["K"]) < 2:
            errors.append("batch: P and K must both be >= 2")
        src = self.dataset
        given = [x for x in (src.synthetic, src.folder, src.manifest) if x is not None]
        if len(given) != 1:
            errors.append("dataset: exactly one of synthetic, folder, manifest is required")
        if src.synthetic is not None:
            errors += [f"dataset.synthetic: {e}" for e in src.synthetic.validate()]
            if (src.synthetic.image_height, src.synthetic.image_width) != tuple(self.backbone.input_size):
                errors.append("dataset.synthetic: image size must equal backbone.input_size")
        if self.eval.feature_kind not in FEATURE_KINDS:
            errors.append(f"eval.feature_kind: unknown kind {self.eval.feature_kind!r}")
        elif self.eval.feature_kind.startswith("f_tilde") and self.model != "pronetpp":
            errors.append("eval.feature_kind: f_tilde kinds need model=pronetpp")
        if self.eval.batch_size < 1:
            errors.append("eval.batch_size: must be >= 1")
        if self.eval.rerank is not None:
            r = self.eval.rerank
            if not 1 <= r.k2 <= r.k1:
                errors.append("eval.rerank: need 1 <= k2 <= k1")
            if not 0.0 <= r.lam <= 1.0:
                errors.append("eval.rerank: lam must lie in [0, 1]")
        if self.checkpoint_every < 0:
            errors.append("checkpoint_every: must be >= 0")
        if errors:
            raise ConfigValidationError(errors)

    # ------------------------------------------------------------ io

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        errors: list[str] = []
        cfg = _build(cls, data, "", errors)
        if errors:
            raise ConfigValidationError(errors)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigValidationError([f"{path}: not valid JSON ({e})"]) from e
        return cls.from_dict(data)


# nested dataclass fields, including optional ones
_NESTED = {
    (RunConfig, "dataset"): DatasetSource,
    (RunConfig, "backbone"): BackboneConfig,
    (RunConfig, "parts"): PartConfig,
    (RunConfig, "triplet"): TripletConfig,
    (RunConfig, "optim"): OptimConfig,
    (RunConfig, "augment"): AugmentConfig,
    (RunConfig, "eval"): EvalConfig,
    (DatasetSource, "synthetic"): SyntheticConfig,
    (EvalConfig, "rerank"): RerankConfig,
}
_TUPLES = {"widths", "stage_strides", "input_size", "betas", "erase_area_range", "erase_aspect_range", "contrast_range"}


def _build(cls, data: Any, prefix: str, errors: list[str]):
    if not isinstance(data, dict):
        errors.append(f"{prefix or 'config'}: expected an object")
        return cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key in sorted(set(data) - names):
        errors.append(f"{prefix}{key}: unknown key")
    base = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        sub = _NESTED.get((cls, f.name))
        if sub is not None and value is not None:
            value = _build(sub, value, f"{prefix}{f.name}.", errors)
        elif f.name in _TUPLES and isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return dataclasses.replace(base, **kwargs)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def override(cfg: RunConfig, path: str, value) -> RunConfig:
    """Copy of ``cfg`` with the dotted field ``path`` set to ``value``, re-validated."""
    data = cfg.to_dict()
    node = data
    keys = path.split(".")
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigValidationError([f"{path}: not a nested config path"])
        node = node[k]
    if keys[-1] not in node:
        raise ConfigValidationError([f"{path}: unknown key"])
    node[keys[-1]] = copy.deepcopy(value)
    return RunConfig.from_dict(data)
