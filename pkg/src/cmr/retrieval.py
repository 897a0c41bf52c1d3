"""Exact semantic-neighbor search and the interpolated output distribution."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .stores import EntityStore, KnowledgeStore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InferenceConfig:
    k: int = 32
    lam: float = 0.95
    temperature: float = 1.0
    squared_distance: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


class NeighborHit(NamedTuple):
    distance: float
    target: int
    source_key: tuple[int, int]
    row: int


def _distances(keys: np.ndarray, q: np.ndarray, squared: bool) -> np.ndarray:
    diff = keys.astype(np.float64) - np.asarray(q, dtype=np.float64)
    d2 = np.einsum("ij,ij->i", diff, diff)
    return d2 if squared else np.sqrt(d2)


def knn_search(ks: KnowledgeStore, q: np.ndarray, k: int, exclude_key=None, squared: bool = False) -> list[NeighborHit]:
    """Exact k nearest records, ordered by (distance, target id, row).

    Records whose ``(head, relation)`` equals ``exclude_key`` are skipped.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ks) == 0:
        return []
    dist = _distances(ks.keys, q, squared)
    rows = np.arange(len(ks))
    if exclude_key is not None:
        h, r = exclude_key
        keep = ~((ks.heads == h) & (ks.relations == r))
        rows = rows[keep]
    if rows.size == 0:
        return []
    order = np.lexsort((rows, ks.values[rows], dist[rows]))[:k]
    return [
        NeighborHit(float(dist[j]), int(ks.values[j]), (int(ks.heads[j]), int(ks.relations[j])), int(j))
        for j in rows[order]
    ]


def dedupe_per_target(hits: list[NeighborHit]) -> list[NeighborHit]:
    """Keep only the nearest hit for each target, preserving order."""
    seen = set()
    out = []
    for hit in hits:
        if hit.target not in seen:
            seen.add(hit.target)
            out.append(hit)
    return out


def p_ks(hits: list[NeighborHit], num_entities: int) -> np.ndarray:
    """Softmax over negative distances of deduplicated hits; zeros elsewhere.

    An empty hit list yields an all-zero vector.
    """
    out = np.zeros(num_entities)
    if not hits:
        return out
    d = np.array([h.distance for h in hits])
    w = np.exp(-(d - d.min()))
    w /= w.sum()
    for hit, p in zip(hits, w):
        out[hit.target] += p
    return out


def p_es(es: EntityStore, q: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    logits = es.keys.astype(np.float64) @ np.asarray(q, dtype=np.float64) / temperature
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def interpolate(pks: np.ndarray, pes: np.ndarray, lam: float) -> np.ndarray:
    if pks.shape != pes.shape:
        raise ValueError(f"distribution sizes differ: {pks.shape} vs {pes.shape}")
    if lam > 0 and not pks.any():
        logger.info("no semantic neighbors retrieved; falling back to entity-store probabilities")
        lam = 0.0
    if lam == 0.0:
        return pes.copy()
    if lam == 1.0:
        return pks.copy()
    return lam * pks + (1.0 - lam) * pes


FULL = "full"
ES_ONLY = "es_only"
KS_ONLY = "ks_only"
MODES = (FULL, ES_ONLY, KS_ONLY)


def predict(ks: KnowledgeStore, es: EntityStore, q: np.ndarray, cfg: InferenceConfig,
            exclude_key=None, mode: str = FULL, hits: list[NeighborHit] | None = None) -> np.ndarray:
    """Output distribution over all entities for one query embedding.

    ``hits`` may carry a precomputed, already sorted neighbor list of at least
    ``cfg.k`` entries (used by sweeps); it is truncated to ``cfg.k``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    n = len(es)
    if mode == ES_ONLY:
        return p_es(es, q, cfg.temperature)
    if hits is None:
        hits = knn_search(ks, q, cfg.k, exclude_key, cfg.squared_distance)
    pks = p_ks(dedupe_per_target(hits[: cfg.k]), n)
    if mode == KS_ONLY:
        # same degradation as lam=1 so the two stay interchangeable
        return interpolate(pks, p_es(es, q, cfg.temperature) if not pks.any() else np.zeros(n), 1.0)
    return interpolate(pks, p_es(es, q, cfg.temperature), cfg.lam)
