"""Run configuration: one structured file with records/model/train/eval sections."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .backbone import config_hash
from .model import ModelConfig
from .records import AugmentConfig, RecordConfig, SyntheticConfig
from .trainer import Ablation, LossWeights, TrainConfig

OUTPUT_ROOT_ENV = "ADAPTALIGN_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid run configuration; the message carries the offending key path."""


@dataclass
class SyntheticSection:
    n_train: int = 200
    n_val: int = 100
    n_test: int = 200
    n_classes: int = 5
    image_size: int = 32
    noise: float = 0.05
    amplitude: float = 0.45
    offset_share: float = 0.5
    prior_rate: float = 0.75
    lateral_rate: float = 0.5
    n_filler: int = 0

    def synthetic_config(self) -> SyntheticConfig:
        keep = {f.name for f in fields(SyntheticConfig)}
        return SyntheticConfig(**{k: v for k, v in asdict(self).items() if k in keep})


@dataclass
class RecordsSection:
    manifest: str | None = None
    image_root: str | None = None
    vocab: str | None = None
    train_store: str | None = None
    val_store: str | None = None
    test_store: str | None = None
    input_size: int = 224
    resize_to: int = 256
    max_tokens: int = 128
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)

    def record_config(self) -> RecordConfig:
        return RecordConfig(self.input_size, self.resize_to, self.max_tokens)


@dataclass
class TrainSection:
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_steps: int = 50
    max_epochs: int = 30
    patience: int = 10
    max_steps: int | None = None
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    ablate: list[str] = field(default_factory=list)
    augment: bool = False
    val_k: int = 5

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.batch_size, self.lr, self.weight_decay, tuple(self.betas), self.warmup_steps,
                           self.max_epochs, self.patience, seed, self.max_steps)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def ablation(self) -> Ablation:
        return Ablation.from_flags(self.ablate)

    def augment_config(self) -> AugmentConfig | None:
        return AugmentConfig() if self.augment else None


@dataclass
class EvalSection:
    checkpoint: str | None = None
    random_init: bool = False
    task: str = "T2I"
    n_queries_per_class: int = 10
    ks: list[int] = field(default_factory=lambda: [5, 10, 50])
    folds: int = 10
    binary: bool = False
    n_pairs: int = 200


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    preset: str = "toy"
    records: RecordsSection = field(default_factory=RecordsSection)
    model: dict = field(default_factory=dict)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def model_config(self) -> ModelConfig:
        if self.preset == "toy":
            return ModelConfig.toy(**self.model)
        if self.preset == "vit_b_bert_base":
            return ModelConfig.vit_b_bert_base(**self.model)
        raise ConfigError(f"preset: unknown value {self.preset!r} (toy | vit_b_bert_base)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = asdict(self.model_config())
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"{where}: unknown key")
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, where)
        elif known[key].type in ("float", "float | None") and isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot (1e-3) as strings
            try:
                kwargs[key] = float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    model_keys = {f.name for f in fields(ModelConfig)}
    for key in cfg.model:
        if key not in model_keys:
            raise ConfigError(f"model.{key}: unknown key")
    try:
        cfg.model_config()
        cfg.train.ablation()
        cfg.train.train_config(cfg.seed)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def apply_override(data: dict, assignment: str) -> None:
    """``section.key=value`` with ``value`` parsed as YAML (numbers, lists, booleans)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r}: expected key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: cannot descend into a non-mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def load(path: str | Path | None, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    for o in overrides:
        apply_override(data, o)
    return from_dict(data)


def write_run_files(out: Path, cfg: RunConfig, command: str) -> None:
    """Resolved config and its hash beside every output."""
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed}
    (out / "run.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
