"""Experiment configuration and the train -> memorize -> evaluate glue."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dataset import Dataset, FeatureBank
from .encoders import HyperParams, Params, init_params
from .evaluate import Metrics, evaluate
from .featurize import FeaturizerConfig
from .kg import FilterIndex, add_reversed, build_filter_index, strip_reversed
from .retrieval import InferenceConfig
from .stores import (
    TRAIN_ONLY,
    TRAIN_PLUS_INFERENCE,
    EntityStore,
    KnowledgeStore,
    build_entity_store,
    build_knowledge_store,
    knowledge_scope,
)
from .synthetic import SyntheticSpec
from .train import TrainConfig, TrainResult, train


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = ""
    seed: int = 0
    out_dir: str = "runs/default"
    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    hyper: HyperParams = field(default_factory=HyperParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    ks_scope: str = TRAIN_PLUS_INFERENCE
    k_grid: tuple[int, ...] = (1, 4, 8, 16, 32)
    lam_grid: tuple[float, ...] = (0.0, 0.5, 0.8, 0.9, 0.95, 1.0)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        """Content hash of everything that affects results; the output location does not."""
        data = self.to_dict()
        data.pop("out_dir")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        nested = {
            "featurizer": FeaturizerConfig,
            "hyper": HyperParams,
            "train": TrainConfig,
            "inference": InferenceConfig,
            "synthetic": SyntheticSpec,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in nested:
                kwargs[key] = nested[key](**value)
            elif key in ("k_grid", "lam_grid"):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Propagate one seed to every seeded component."""
        return dataclasses.replace(
            self,
            seed=seed,
            train=dataclasses.replace(self.train, seed=seed),
        )


def make_bank(dataset: Dataset, cfg: ExperimentConfig) -> FeatureBank:
    return FeatureBank(dataset, cfg.featurizer, pad_seed=cfg.seed)


def train_triples(dataset: Dataset):
    return add_reversed(strip_reversed(dataset.split.train), dataset.num_relations)


def full_filter(dataset: Dataset) -> FilterIndex:
    return build_filter_index(dataset.split, dataset.num_relations)


def build_stores(params: Params, dataset: Dataset, bank: FeatureBank, hp: HyperParams,
                 scope: str) -> tuple[KnowledgeStore, EntityStore]:
    triples = knowledge_scope(dataset.split, scope, dataset.num_relations)
    return build_knowledge_store(params, triples, bank), build_entity_store(params, bank, hp)


def make_validator(dataset: Dataset, bank: FeatureBank, cfg: ExperimentConfig):
    """Validation Hits@1/MRR against a train-only knowledge store."""
    valid = add_reversed(strip_reversed(dataset.split.valid), dataset.num_relations)
    index = full_filter(dataset)

    def validate(params: Params):
        ks, es = build_stores(params, dataset, bank, cfg.hyper, TRAIN_ONLY)
        metrics, _ = evaluate(ks, es, params, bank, valid, cfg.inference, index)
        return metrics.hits1, metrics.mrr

    return validate if valid else None


def run_training(dataset: Dataset, bank: FeatureBank, cfg: ExperimentConfig) -> TrainResult:
    params = init_params(cfg.hyper, bank.text_dim, bank.visual_dim, cfg.seed)
    triples = train_triples(dataset)
    return train(cfg.train, cfg.hyper, triples, FilterIndex(triples), bank, params,
                 make_validator(dataset, bank, cfg))


def eval_queries(dataset: Dataset):
    return add_reversed(strip_reversed(dataset.split.test), dataset.num_relations)


def evaluate_test(params: Params, dataset: Dataset, bank: FeatureBank, cfg: ExperimentConfig,
                  inference: InferenceConfig, mode: str, stores=None) -> Metrics:
    ks, es = stores or build_stores(params, dataset, bank, cfg.hyper, cfg.ks_scope)
    metrics, _ = evaluate(ks, es, params, bank, eval_queries(dataset), inference, full_filter(dataset), mode)
    return metrics
