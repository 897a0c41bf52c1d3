"""Filtered ranking metrics and validation sweeps over (k, lambda)."""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import numpy as np

from .encoders import Params, encode_query
from .kg import FilterIndex, Triple
from .retrieval import FULL, InferenceConfig, knn_search, predict
from .stores import EntityStore, KnowledgeStore

TIE_MODES = ("mean", "optimistic", "pessimistic")


class RankResult(NamedTuple):
    query: tuple[int, int]
    target: int
    rank: float
    filtered: bool


@dataclass(frozen=True)
class Metrics:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    count: int
    mr: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, label: str = "") -> str:
        head = f"{'':<12}{'MRR':>8}{'Hits@1':>8}{'Hits@3':>8}{'Hits@10':>8}"
        row = f"{label:<12}{self.mrr:>8.3f}{self.hits1:>8.3f}{self.hits3:>8.3f}{self.hits10:>8.3f}"
        return f"{head}\n{row}"


def filtered_rank(dist: np.ndarray, head: int, relation: int, target: int,
                  filter_index: FilterIndex | None, tie: str = "mean") -> RankResult:
    """Rank of ``target`` among entities that are not other known answers.

    Ties count half by default; ``tie`` selects optimistic or pessimistic handling.
    """
    p = np.asarray(dist, dtype=np.float64)
    score = p[target]
    if not np.isfinite(score):
        raise ValueError(f"non-finite probability for target {target}")
    competitors = np.ones(len(p), dtype=bool)
    competitors[target] = False
    if filter_index is not None:
        known = [t for t in filter_index.lookup(head, relation) if t != target]
        competitors[known] = False
    higher = int(np.count_nonzero(p[competitors] > score))
    equal = int(np.count_nonzero(p[competitors] == score))
    if tie == "mean":
        rank = 1.0 + higher + equal / 2.0
    elif tie == "optimistic":
        rank = 1.0 + higher
    elif tie == "pessimistic":
        rank = 1.0 + higher + equal
    else:
        raise ValueError(f"unknown tie mode {tie!r}")
    return RankResult((head, relation), target, rank, filter_index is not None)


def metrics_from_ranks(ranks) -> Metrics:
    r = np.array([x.rank if isinstance(x, RankResult) else x for x in ranks], dtype=np.float64)
    if r.size == 0:
        return Metrics(0.0, 0.0, 0.0, 0.0, 0, 0.0)
    n = r.size
    # fsum is correctly rounded, so the result does not depend on summation order
    return Metrics(
        mrr=math.fsum(1.0 / r) / n,
        hits1=int(np.count_nonzero(r <= 1)) / n,
        hits3=int(np.count_nonzero(r <= 3)) / n,
        hits10=int(np.count_nonzero(r <= 10)) / n,
        count=int(n),
        mr=math.fsum(r) / n,
    )


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def rank_triples(ks: KnowledgeStore, es: EntityStore, queries: np.ndarray, triples: list[Triple],
                 cfg: InferenceConfig, filter_index: FilterIndex, mode: str = FULL,
                 tie: str = "mean", hits=None, workers: int = 1) -> list[RankResult]:
    """Rank every triple's tail given precomputed query embeddings."""

    def one(i):
        t = triples[i]
        dist = predict(ks, es, queries[i], cfg, exclude_key=(t.head, t.relation), mode=mode,
                       hits=None if hits is None else hits[i])
        return filtered_rank(dist, t.head, t.relation, t.tail, filter_index, tie)

    return _map(one, range(len(triples)), workers)


def evaluate(ks: KnowledgeStore, es: EntityStore, params: Params, bank, triples: list[Triple],
             cfg: InferenceConfig, filter_index: FilterIndex, mode: str = FULL,
             tie: str = "mean", workers: int = 1) -> tuple[Metrics, list[RankResult]]:
    """Filtered metrics over ``triples``; pass reversed forms to cover head prediction."""
    triples = list(triples)
    if not triples:
        return metrics_from_ranks([]), []
    queries = encode_query(params, bank.queries(triples))
    ranks = rank_triples(ks, es, queries, triples, cfg, filter_index, mode, tie, workers=workers)
    return metrics_from_ranks(ranks), ranks


@dataclass(frozen=True)
class SweepRow:
    k: int
    lam: float
    metrics: Metrics


def sweep(ks: KnowledgeStore, es: EntityStore, params: Params, bank, triples: list[Triple],
          k_grid, lam_grid, filter_index: FilterIndex, base: InferenceConfig = InferenceConfig(),
          workers: int = 1) -> tuple[tuple[int, float], list[SweepRow]]:
    """Evaluate every (k, lambda); best by MRR, then Hits@1, then smaller k."""
    k_grid, lam_grid = list(k_grid), list(lam_grid)
    if not k_grid or not lam_grid:
        raise ValueError("sweep grids must be nonempty")
    triples = list(triples)
    queries = encode_query(params, bank.queries(triples)) if triples else np.zeros((0, ks.dim))
    k_max = max(k_grid)
    hits = _map(lambda i: knn_search(ks, queries[i], k_max, (triples[i].head, triples[i].relation),
                                     base.squared_distance), range(len(triples)), workers)
    rows = []
    for k, lam in itertools.product(k_grid, lam_grid):
        cfg = replace(base, k=k, lam=lam)
        ranks = rank_triples(ks, es, queries, triples, cfg, filter_index, FULL, hits=hits, workers=workers)
        rows.append(SweepRow(k, lam, metrics_from_ranks(ranks)))
    best = max(rows, key=lambda r: (r.metrics.mrr, r.metrics.hits1, -r.k))
    return (best.k, best.lam), rows


def sweep_csv(rows: list[SweepRow]) -> str:
    lines = ["k,lambda,MRR,Hits@1,Hits@3,Hits@10"]
    for r in rows:
        m = r.metrics
        lines.append(f"{r.k},{r.lam!r},{m.mrr!r},{m.hits1!r},{m.hits3!r},{m.hits10!r}")
    return "\n".join(lines) + "\n"


def query_pair_cosines(params: Params | None, bank, triples: list[Triple]) -> tuple[float, float]:
    """Mean cosine between distinct queries that share a target vs. those that do not.

    Queries are deduplicated on (h, r); two queries share a target when their
    answer sets intersect. With ``params=None`` the raw query features are compared.
    """
    answers: dict[tuple[int, int], set[int]] = {}
    for t in triples:
        answers.setdefault((t.head, t.relation), set()).add(t.tail)
    keys = sorted(answers)
    if len(keys) < 2:
        raise ValueError("need at least two distinct queries")
    reps = [Triple(h, r, next(iter(answers[(h, r)]))) for h, r in keys]
    x = bank.queries(reps)
    if params is None:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        q = x / np.where(norms == 0, 1.0, norms)
    else:
        q = encode_query(params, x)
    cos = q @ q.T
    tails = sorted({t for s in answers.values() for t in s})
    col = {t: i for i, t in enumerate(tails)}
    member = np.zeros((len(keys), len(tails)))
    for i, k in enumerate(keys):
        member[i, [col[t] for t in answers[k]]] = 1.0
    shared = (member @ member.T) > 0
    off = ~np.eye(len(keys), dtype=bool)
    same, cross = shared & off, ~shared & off
    if not same.any() or not cross.any():
        raise ValueError("need both shared-target and cross-target query pairs")
    return float(cos[same].mean()), float(cos[cross].mean())
