"""Deterministic text featurization, visual feature files and image-less padding."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"CMRF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIQI")

DEFAULT_INVERSE_PREFIX = "inverse of "


class FeatureFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FeaturizerConfig:
    hash_dim: int = 256
    seed: int = 0
    lowercase: bool = True
    max_chars: int | None = None

    def __post_init__(self):
        if self.hash_dim < 8:
            raise ValueError(f"hash_dim must be >= 8, got {self.hash_dim}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


def render_query_template(
    head_name: str,
    head_desc: str,
    relation_desc: str,
    reversed: bool = False,
    inverse_prefix: str = DEFAULT_INVERSE_PREFIX,
) -> str:
    if not head_name:
        raise ValueError("head_name must be nonempty")
    if reversed:
        relation_desc = f"{inverse_prefix}{relation_desc}"
    return f"[CLS] A photo of {head_name}'s {relation_desc}? [SEP] {head_desc}"


def _bucket(token: str, cfg: FeaturizerConfig) -> tuple[int, float]:
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, key=cfg.seed.to_bytes(8, "little")
    ).digest()
    h = int.from_bytes(digest, "little")
    sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
    return h % cfg.hash_dim, sign


def hash_bow_featurize(text: str, cfg: FeaturizerConfig) -> np.ndarray:
    """Signed feature hashing of whitespace tokens, L2-normalized unless empty."""
    if cfg.max_chars is not None:
        text = text[: cfg.max_chars]
    if cfg.lowercase:
        text = text.lower()
    vec = np.zeros(cfg.hash_dim, dtype=np.float64)
    for tok in text.split():
        idx, sign = _bucket(tok, cfg)
        vec[idx] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def pad_missing_visual(entity_id: int, dim: int, seed: int) -> np.ndarray:
    """Unit vector that depends only on ``(seed, entity_id)``."""
    rng = np.random.default_rng([seed, entity_id])
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def names_path(path) -> Path:
    return Path(path).with_suffix(".names")


def save_feature_file(path, names: list[str], matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(names):
        raise ValueError("matrix must be 2-D with one row per name")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes())
    names_path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def read_feature_file(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, rows, dim = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + rows * dim * 4
    if len(data) != expected:
        raise FeatureFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    matrix = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(rows, dim).copy()
    names = names_path(path).read_text(encoding="utf-8").splitlines()
    if len(names) != rows:
        raise FeatureFormatError(f"{path}: {rows} rows but {len(names)} names in sidecar")
    return names, matrix


@dataclass
class FeatureMatrix:
    ids: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.ids)

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(i): row for i, row in zip(self.ids, self.values)}


def load_feature_file(path, expected_dim: int, vocab) -> FeatureMatrix:
    names, matrix = read_feature_file(path)
    if matrix.shape[1] != expected_dim:
        raise FeatureFormatError(f"{path}: dimension {matrix.shape[1]} != expected {expected_dim}")
    ids = []
    for name in names:
        idx = vocab.get(name)
        if idx is None:
            raise KeyError(f"{path}: unknown entity {name!r}")
        ids.append(idx)
    if not np.all(np.isfinite(matrix)):
        raise FeatureFormatError(f"{path}: non-finite feature values")
    return FeatureMatrix(np.asarray(ids, dtype=np.int64), matrix)
