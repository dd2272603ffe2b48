"""Experiment configuration: a JSON document with strict keys and explicit defaults."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import PriorConfig
from .model import ModelConfig
from .numerics import ContractError


class ConfigError(ValueError):
    pass


@dataclass
class PriorFitSection:
    lr: float = 1e-3
    weight_decay: float = 0.0
    B: int = 8
    max_steps: int = 6000
    eval_every: int = 100
    grad_clip: float | None = 1.0


@dataclass
class FinetuneSection:
    lr: float = 0.01
    weight_decay: float = 0.01
    B: int = 2
    N_qy: int = 128
    eval_every: int = 30
    patience: int = 5
    max_steps: int = 1000
    grad_clip: float | None = None


@dataclass
class TrainSection:
    prior_fit: PriorFitSection = field(default_factory=PriorFitSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)


@dataclass
class RetrievalSection:
    k_max: int = 1000
    embedding: str = "raw"


@dataclass
class CirclesSection:
    n: int = 1000
    noise_std: float = 0.01
    pairs: list = field(default_factory=lambda: [1, 2, 3, 4])
    ks: list = field(default_factory=lambda: [10, 30, 100, 300])
    seeds: int = 25


@dataclass
class EvalSection:
    folds: int = 10
    bootstrap_resamples: int = 2000
    methods: list = field(default_factory=lambda: ["icl_full", "icl_knn", "knn_baseline"])
    ensemble_members: int = 32
    chunk_size: int | None = None
    knn_baseline_k: int | None = None
    batch_size: int = 512
    circles: CirclesSection = field(default_factory=CirclesSection)


@dataclass
class IOSection:
    out_dir: str = "runs/default"
    checkpoint: str | None = None


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=lambda: dataclasses.asdict(ModelConfig()))
    prior: dict = field(default_factory=lambda: _prior_dict(PriorConfig()))
    train: TrainSection = field(default_factory=TrainSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    eval: EvalSection = field(default_factory=EvalSection)
    io: IOSection = field(default_factory=IOSection)
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def prior_config(self) -> PriorConfig:
        d = dict(self.prior)
        for key in ("dims", "depth", "width", "classes", "size"):
            d[key] = tuple(d[key])
        return PriorConfig(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _prior_dict(p: PriorConfig) -> dict:
    d = dataclasses.asdict(p)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, dict) and name in ("model", "prior"):
            extra = set(value) - set(default)
            if extra:
                raise ConfigError(f"{where}.{name}: unknown keys {sorted(extra)}")
            kwargs[name] = {**default, **value}
        else:
            kwargs[name] = value
    return cls(**kwargs)


def parse_config(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "config")
    try:
        cfg.model_config()
        cfg.prior_config()
    except (ContractError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.retrieval.embedding not in ("raw", "one_hot"):
        raise ConfigError(f"retrieval.embedding must be 'raw' or 'one_hot', got {cfg.retrieval.embedding!r}")
    if cfg.retrieval.k_max < 1 or cfg.eval.folds < 1:
        raise ConfigError("retrieval.k_max and eval.folds must be >= 1")
    return cfg


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return parse_config(data)
