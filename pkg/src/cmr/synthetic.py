"""Seeded generator for small typed inductive multimodal KGs.

Entities belong to a latent type and, inside it, to a group. Each relation maps
a source type to a different target type and links every member of a source
group to every member of one target group (a per-relation permutation of group
indices). Group membership shows up in both the description words and the
visual prototype, so it transfers to unseen entities.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .featurize import save_feature_file


@dataclass(frozen=True)
class SyntheticSpec:
    num_types: int = 4
    entities_per_type: int = 25
    groups_per_type: int = 5
    num_relations: int = 6
    triples_per_relation: int | None = None  # None: every linked group pair
    noise_std: float = 0.3
    unseen_fraction: float = 0.2
    visual_dim: int = 32
    image_fraction: float = 0.9
    type_words: int = 2
    group_words: int = 3
    noise_words: int = 3

    def __post_init__(self):
        if not 0.0 < self.unseen_fraction < 1.0:
            raise ValueError("unseen_fraction must lie in (0, 1)")
        if self.num_types < 2:
            raise ValueError("need at least two types so relations cross types")
        if not 1 <= self.groups_per_type <= self.entities_per_type:
            raise ValueError("groups_per_type must lie in [1, entities_per_type]")
        if self.num_relations < 1:
            raise ValueError("num_relations must be positive")


@dataclass
class SyntheticKG:
    names: list[str]
    descriptions: list[str]
    entity_type: np.ndarray
    entity_group: np.ndarray
    has_image: np.ndarray
    visual: np.ndarray
    relation_names: list[str]
    relation_descriptions: list[str]
    relation_types: list[tuple[int, int]]
    train: list[tuple[int, int, int]]
    valid: list[tuple[int, int, int]]
    test: list[tuple[int, int, int]]
    unseen: set[int]


def _relation_types(spec: SyntheticSpec) -> list[tuple[int, int]]:
    out = []
    for r in range(spec.num_relations):
        src = r % spec.num_types
        step = 1 + (r // spec.num_types) % (spec.num_types - 1)
        out.append((src, (src + step) % spec.num_types))
    return out


def generate(spec: SyntheticSpec, seed: int) -> SyntheticKG:
    rng = np.random.default_rng(seed)
    T, n, G = spec.num_types, spec.entities_per_type, spec.groups_per_type
    total = T * n
    ent_type = np.repeat(np.arange(T), n)
    # groups as even as possible within each type, then shuffled
    ent_group = np.concatenate([rng.permutation(np.arange(n) % G) for _ in range(T)])

    type_vocab = [[f"t{t}w{j}" for j in range(spec.type_words)] for t in range(T)]
    group_vocab = [[[f"t{t}g{g}w{j}" for j in range(spec.group_words)] for g in range(G)] for t in range(T)]
    noise_vocab = [f"misc{j}" for j in range(40)]

    names, descs = [], []
    for e in range(total):
        t, g = int(ent_type[e]), int(ent_group[e])
        words = [
            *type_vocab[t],
            *group_vocab[t][g],
            *rng.choice(noise_vocab, spec.noise_words, replace=False),
        ]
        rng.shuffle(words)
        names.append(f"e{e:04d}")
        descs.append(" ".join(words))

    type_proto = rng.standard_normal((T, spec.visual_dim))
    group_proto = rng.standard_normal((T, G, spec.visual_dim))
    visual = type_proto[ent_type] + group_proto[ent_type, ent_group]
    visual += spec.noise_std * rng.standard_normal((total, spec.visual_dim))
    has_image = rng.random(total) < spec.image_fraction

    rel_types = _relation_types(spec)
    rel_names = [f"r{r}" for r in range(spec.num_relations)]
    rel_descs = [f"link{r} from kind{s} to kind{d}" for r, (s, d) in enumerate(rel_types)]
    triples = []
    for r, (src, dst) in enumerate(rel_types):
        target_group = rng.permutation(G)
        pairs = [
            (int(h), int(t))
            for h in np.flatnonzero(ent_type == src)
            for t in np.flatnonzero((ent_type == dst) & (ent_group == target_group[ent_group[h]]))
        ]
        if spec.triples_per_relation is not None and spec.triples_per_relation < len(pairs):
            keep = np.sort(rng.choice(len(pairs), spec.triples_per_relation, replace=False))
            pairs = [pairs[i] for i in keep]
        triples.extend((h, r, t) for h, t in pairs)

    per_type = int(round(spec.unseen_fraction * n))
    unseen = np.concatenate([rng.choice(np.flatnonzero(ent_type == t), per_type, replace=False) for t in range(T)])
    unseen = rng.permutation(unseen)
    valid_pool = set(int(e) for e in unseen[: len(unseen) // 2])
    test_pool = set(int(e) for e in unseen[len(unseen) // 2 :])

    train, valid, test = [], [], []
    for tr in triples:
        ends = {tr[0], tr[2]}
        if ends & test_pool:
            test.append(tr)
        elif ends & valid_pool:
            valid.append(tr)
        else:
            train.append(tr)
    if not test:
        raise ValueError("synthetic spec produced no test triples")
    return SyntheticKG(names, descs, ent_type, ent_group, has_image, visual, rel_names, rel_descs,
                       rel_types, train, valid, test, valid_pool | test_pool)


def write_dataset(kg: SyntheticKG, out_dir, spec: SyntheticSpec | None = None, seed: int | None = None) -> Path:
    """Write triples, descriptions, visual features and a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def dump(name, rows):
        (out / name).write_text("".join("\t".join(r) + "\n" for r in rows), encoding="utf-8")

    for split in ("train", "valid", "test"):
        dump(f"{split}.tsv", [(kg.names[h], kg.relation_names[r], kg.names[t]) for h, r, t in getattr(kg, split)])
    dump("entity_desc.tsv", list(zip(kg.names, kg.descriptions)))
    dump("relation_desc.tsv", list(zip(kg.relation_names, kg.relation_descriptions)))
    with_image = np.flatnonzero(kg.has_image)
    save_feature_file(out / "visual.cmrf", [kg.names[i] for i in with_image], kg.visual[with_image])
    manifest = {
        "mode": "inductive",
        "train": "train.tsv",
        "valid": "valid.tsv",
        "test": "test.tsv",
        "entity_descriptions": "entity_desc.tsv",
        "relation_descriptions": "relation_desc.tsv",
        "visual_features": "visual.cmrf",
        "visual_dim": int(kg.visual.shape[1]),
    }
    if spec is not None:
        manifest["synthetic"] = asdict(spec)
    if seed is not None:
        manifest["seed"] = seed
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
