"""Triples, vocabularies, inductive splits and the filtered-ranking index."""

from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

logger = logging.getLogger(__name__)

TRANSDUCTIVE = "transductive"
INDUCTIVE = "inductive"


class TripleParseError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class SplitError(ValueError):
    pass


class SplitWarning(UserWarning):
    pass


class Vocabulary:
    """Dense name -> id mapping, ids assigned in first-appearance order."""

    def __init__(self, names: Iterable[str] = ()):
        self.names: list[str] = []
        self.descriptions: list[str] = []
        self.has_image: list[bool] = []
        self._index: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        idx = self._index.get(name)
        if idx is None:
            idx = len(self.names)
            self._index[name] = idx
            self.names.append(name)
            self.descriptions.append("")
            self.has_image.append(False)
        return idx

    def id(self, name: str) -> int:
        return self._index[name]

    def get(self, name: str, default=None):
        return self._index.get(name, default)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.names)

    def describe(self, idx: int) -> str:
        return self.descriptions[idx]


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int
    reversed: bool = False


def ingest_triples(path, entities: Vocabulary, relations: Vocabulary) -> list[Triple]:
    """Read a ``head<TAB>relation<TAB>tail`` file, extending both vocabularies."""
    path = Path(path)
    triples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TripleParseError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = parts
            # head before tail keeps first-appearance order left to right
            hid = entities.add(h)
            rid = relations.add(r)
            tid = entities.add(t)
            triples.append(Triple(hid, rid, tid))
    return triples


def ingest_descriptions(path, vocab: Vocabulary, max_chars: int | None = None) -> None:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            name, sep, text = line.partition("\t")
            if not sep:
                raise TripleParseError(path, lineno, "expected name<TAB>description")
            if max_chars is not None:
                text = text[:max_chars]
            vocab.descriptions[vocab.add(name)] = text


def add_reversed(triples: Iterable[Triple], num_relations: int) -> list[Triple]:
    """Return the forward triples followed by their ``(t, r + |R|, h)`` reversals."""
    triples = list(triples)
    for tr in triples:
        if tr.relation >= num_relations or tr.reversed:
            raise SplitError(f"relation id {tr.relation} is not a forward relation (|R|={num_relations})")
    return triples + [Triple(t.tail, t.relation + num_relations, t.head, True) for t in triples]


def strip_reversed(triples: Iterable[Triple]) -> list[Triple]:
    return [t for t in triples if not t.reversed]


def entities_of(triples: Iterable[Triple]) -> set[int]:
    out = set()
    for t in triples:
        out.add(t.head)
        out.add(t.tail)
    return out


@dataclass(frozen=True)
class GraphSplit:
    train: tuple[Triple, ...]
    valid: tuple[Triple, ...]
    test: tuple[Triple, ...]
    seen_entities: frozenset[int]
    unseen_entities: frozenset[int]
    mode: str = INDUCTIVE
    warnings: tuple[str, ...] = field(default=())

    def all_triples(self) -> list[Triple]:
        return [*self.train, *self.valid, *self.test]


def build_splits(train, valid, test, mode: str, num_entities: int) -> GraphSplit:
    if mode not in (TRANSDUCTIVE, INDUCTIVE):
        raise ValueError(f"unknown split mode {mode!r}")
    train, valid, test = tuple(train), tuple(valid), tuple(test)
    seen = frozenset(entities_of(train))
    unseen = frozenset(range(num_entities)) - seen
    notes = []
    if mode == TRANSDUCTIVE:
        for name, part in (("valid", valid), ("test", test)):
            for t in part:
                missing = {t.head, t.tail} - seen
                if missing:
                    raise SplitError(f"transductive {name} triple {tuple(t[:3])} uses entities {sorted(missing)} absent from train")
    else:
        for t in test:
            if t.head in seen and t.tail in seen:
                msg = f"inductive test triple {tuple(t[:3])} has no unseen entity"
                notes.append(msg)
                warnings.warn(msg, SplitWarning, stacklevel=2)
    return GraphSplit(train, valid, test, seen, unseen, mode, tuple(notes))


class FilterIndex:
    """``(head, relation) -> {tails}`` over every triple it was built from."""

    def __init__(self, triples: Iterable[Triple] = ()):
        tails: dict[tuple[int, int], set[int]] = defaultdict(set)
        for t in triples:
            tails[(t.head, t.relation)].add(t.tail)
        self._tails = {k: frozenset(v) for k, v in tails.items()}

    def lookup(self, head: int, relation: int) -> frozenset[int]:
        return self._tails.get((head, relation), frozenset())

    def contains(self, head: int, relation: int, tail: int) -> bool:
        return tail in self.lookup(head, relation)

    def keys(self):
        return self._tails.keys()

    def __len__(self) -> int:
        return len(self._tails)


def build_filter_index(split: GraphSplit, num_relations: int) -> FilterIndex:
    """Index over train, valid and test including the reversed forms."""
    forward = strip_reversed(split.all_triples())
    return FilterIndex(add_reversed(forward, num_relations))
