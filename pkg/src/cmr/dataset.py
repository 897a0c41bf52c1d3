"""Dataset manifests and the per-entity / per-query feature bank."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .featurize import (
    DEFAULT_INVERSE_PREFIX,
    FeaturizerConfig,
    hash_bow_featurize,
    load_feature_file,
    pad_missing_visual,
    render_query_template,
)
from .kg import (
    INDUCTIVE,
    GraphSplit,
    Triple,
    Vocabulary,
    build_splits,
    ingest_descriptions,
    ingest_triples,
)


@dataclass
class Dataset:
    entities: Vocabulary
    relations: Vocabulary
    split: GraphSplit
    visual: np.ndarray | None  # |E| x Fv, rows of image-less entities are zero
    visual_dim: int

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def num_entities(self) -> int:
        return len(self.entities)


def load_dataset(manifest_path, max_desc_chars: int | None = None) -> Dataset:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    spec = json.loads(manifest_path.read_text(encoding="utf-8"))
    entities, relations = Vocabulary(), Vocabulary()
    parts = {}
    for name in ("train", "valid", "test"):
        rel = spec.get(name)
        parts[name] = ingest_triples(root / rel, entities, relations) if rel else []
    if spec.get("entity_descriptions"):
        ingest_descriptions(root / spec["entity_descriptions"], entities, max_desc_chars)
    if spec.get("relation_descriptions"):
        ingest_descriptions(root / spec["relation_descriptions"], relations, max_desc_chars)
    split = build_splits(parts["train"], parts["valid"], parts["test"], spec.get("mode", INDUCTIVE), len(entities))

    visual_dim = int(spec.get("visual_dim", 0))
    visual = None
    if spec.get("visual_features"):
        fm = load_feature_file(root / spec["visual_features"], visual_dim, entities)
        visual = np.zeros((len(entities), visual_dim))
        visual[fm.ids] = fm.values
        for i in fm.ids:
            entities.has_image[int(i)] = True
    return Dataset(entities, relations, split, visual, visual_dim)


class FeatureBank:
    """Input features for entities and (head, relation) queries."""

    def __init__(
        self,
        dataset: Dataset,
        cfg: FeaturizerConfig,
        pad_seed: int = 0,
        inverse_prefix: str = DEFAULT_INVERSE_PREFIX,
    ):
        self.dataset = dataset
        self.cfg = cfg
        self.inverse_prefix = inverse_prefix
        ents = dataset.entities
        self.entity_text = np.stack(
            [hash_bow_featurize(self.entity_text_input(i), cfg) for i in range(len(ents))]
        ) if len(ents) else np.zeros((0, cfg.hash_dim))
        dim = dataset.visual_dim
        vis = np.zeros((len(ents), dim))
        for i in range(len(ents)):
            if ents.has_image[i] and dataset.visual is not None:
                vis[i] = dataset.visual[i]
            else:
                vis[i] = pad_missing_visual(i, dim, pad_seed)
        self.visual = vis
        self._query_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def text_dim(self) -> int:
        return self.cfg.hash_dim

    @property
    def visual_dim(self) -> int:
        return self.dataset.visual_dim

    def entity_text_input(self, entity: int) -> str:
        ents = self.dataset.entities
        return f"{ents.names[entity]} {ents.descriptions[entity]}".strip()

    def relation_text(self, relation: int) -> tuple[str, bool]:
        rels = self.dataset.relations
        n = len(rels)
        base = relation - n if relation >= n else relation
        return rels.descriptions[base] or rels.names[base], relation >= n

    def query_text(self, head: int, relation: int) -> str:
        ents = self.dataset.entities
        rdesc, rev = self.relation_text(relation)
        return render_query_template(
            ents.names[head], ents.descriptions[head], rdesc, reversed=rev, inverse_prefix=self.inverse_prefix
        )

    def query(self, head: int, relation: int) -> np.ndarray:
        key = (head, relation)
        vec = self._query_cache.get(key)
        if vec is None:
            vec = hash_bow_featurize(self.query_text(head, relation), self.cfg)
            self._query_cache[key] = vec
        return vec

    def queries(self, triples: list[Triple]) -> np.ndarray:
        if not triples:
            return np.zeros((0, self.text_dim))
        return np.stack([self.query(t.head, t.relation) for t in triples])
