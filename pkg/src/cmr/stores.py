"""Knowledge Store (query embedding -> target) and Entity Store, built with frozen encoders."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import HyperParams, Params, encode_query, entity_forward
from .kg import GraphSplit, Triple, add_reversed, strip_reversed

STORE_MAGIC = b"CMRS"
STORE_VERSION = 1
KIND_KS = 1
KIND_ES = 2
_HEADER = struct.Struct("<4sIBQI")

TRAIN_ONLY = "train_only"
TRAIN_PLUS_INFERENCE = "train_plus_inference_graph"


class StoreFormatError(ValueError):
    pass


class StoreIntegrityError(StoreFormatError):
    pass


@dataclass(frozen=True)
class KnowledgeStore:
    keys: np.ndarray  # N x d float32, unit rows
    values: np.ndarray  # N target entity ids
    heads: np.ndarray
    relations: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]


@dataclass(frozen=True)
class EntityStore:
    keys: np.ndarray  # |E| x d float32, unit rows
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _unit_f32(x: np.ndarray) -> np.ndarray:
    # renormalize after the cast so rows stay unit-norm in float32
    x32 = x.astype(np.float32)
    norms = np.linalg.norm(x32.astype(np.float64), axis=1, keepdims=True)
    return (x32.astype(np.float64) / np.where(norms == 0, 1.0, norms)).astype(np.float32)


def build_knowledge_store(params: Params, triples: list[Triple], bank) -> KnowledgeStore:
    """One record per triple: key = query embedding of (h, r), value = tail."""
    n = len(triples)
    dim = params["q.b2"].shape[0]
    known = len(bank.visual)
    for t in triples:
        for e in (t.head, t.tail):
            if not 0 <= e < known:
                raise KeyError(f"no features for entity {e}")
    if n:
        keys = _unit_f32(encode_query(params, bank.queries(triples)))
    else:
        keys = np.zeros((0, dim), dtype=np.float32)
    return KnowledgeStore(
        _freeze(keys),
        _freeze(np.array([t.tail for t in triples], dtype=np.uint32)),
        _freeze(np.array([t.head for t in triples], dtype=np.uint32)),
        _freeze(np.array([t.relation for t in triples], dtype=np.uint32)),
    )


def build_entity_store(params: Params, bank, hp: HyperParams) -> EntityStore:
    """Fused embedding for every vocabulary entity, image-less ones padded."""
    e_f, *_ = entity_forward(params, bank.visual, bank.entity_text, hp)
    return EntityStore(_freeze(_unit_f32(e_f)), _freeze(np.arange(len(e_f), dtype=np.uint32)))


def knowledge_scope(split: GraphSplit, scope: str, num_relations: int) -> list[Triple]:
    """Triples (with reversals) memorized for a given scope."""
    if scope == TRAIN_ONLY:
        forward = list(split.train)
    elif scope == TRAIN_PLUS_INFERENCE:
        forward = split.all_triples()
    else:
        raise ValueError(f"unknown knowledge store scope {scope!r}")
    return add_reversed(strip_reversed(forward), num_relations)


# -- persistence -----------------------------------------------------------


def save_store(path, store) -> None:
    kind = KIND_KS if isinstance(store, KnowledgeStore) else KIND_ES
    keys = np.ascontiguousarray(store.keys, dtype="<f4")
    buf = bytearray(_HEADER.pack(STORE_MAGIC, STORE_VERSION, kind, keys.shape[0], keys.shape[1]))
    buf += keys.tobytes()
    buf += np.ascontiguousarray(store.values, dtype="<u4").tobytes()
    if kind == KIND_KS:
        buf += np.ascontiguousarray(store.heads, dtype="<u4").tobytes()
        buf += np.ascontiguousarray(store.relations, dtype="<u4").tobytes()
    buf += hashlib.sha256(buf).digest()
    Path(path).write_bytes(bytes(buf))


def load_store(path, expected_dim: int | None = None):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 32:
        raise StoreFormatError(f"{path}: truncated store file")
    magic, version, kind, count, dim = _HEADER.unpack_from(data)
    if magic != STORE_MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r}")
    if version != STORE_VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    if kind not in (KIND_KS, KIND_ES):
        raise StoreFormatError(f"{path}: unknown store kind {kind}")
    if expected_dim is not None and dim != expected_dim:
        raise StoreFormatError(f"{path}: dimension {dim} != expected {expected_dim}")
    n_id_arrays = 3 if kind == KIND_KS else 1
    expected = _HEADER.size + count * dim * 4 + n_id_arrays * count * 4 + 32
    if len(data) != expected:
        raise StoreFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    body, trailer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise StoreIntegrityError(f"{path}: content hash mismatch")
    off = _HEADER.size
    keys = np.frombuffer(body, dtype="<f4", count=count * dim, offset=off).reshape(count, dim).astype(np.float32)
    off += count * dim * 4
    ids = []
    for _ in range(n_id_arrays):
        ids.append(np.frombuffer(body, dtype="<u4", count=count, offset=off).astype(np.uint32))
        off += count * 4
    ids = [_freeze(a) for a in ids]
    if kind == KIND_KS:
        return KnowledgeStore(_freeze(keys), *ids)
    return EntityStore(_freeze(keys), ids[0])
