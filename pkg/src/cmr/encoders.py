"""Query encoder, visual mapping network and fusion entity encoder.

Parameters live in a flat ``dict[str, np.ndarray]`` so that gradients, optimizer
state and checkpoints share one naming scheme:

    q.w1, q.b1, q.w2, q.b2          query encoder   F  -> H -> d
    vmn.w1, vmn.b1, vmn.w2, vmn.b2  visual mapping  Fv -> H -> l*d
    desc.w, desc.b                  description     F  -> m*d

Every ``*_forward`` returns its output plus a cache consumed by the matching
``*_backward``.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

Params = dict[str, np.ndarray]

CHECKPOINT_MAGIC = b"CMRP"
CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    embed_dim: int = 64
    prefix_len: int = 4
    desc_tokens: int = 4
    temperature: float = 0.05
    hidden: int = 128
    text_init_gain: float = 0.01  # shrinks first-layer weights on hashed text inputs

    def __post_init__(self):
        if self.embed_dim < 2 or self.prefix_len < 1 or self.desc_tokens < 1 or self.hidden < 1:
            raise ValueError(f"invalid dimensions in {self}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.text_init_gain > 0:
            raise ValueError("text_init_gain must be positive")

    @property
    def seq_len(self) -> int:
        return self.prefix_len + self.desc_tokens


def init_params(hp: HyperParams, text_dim: int, visual_dim: int, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    d, H, l, m = hp.embed_dim, hp.hidden, hp.prefix_len, hp.desc_tokens

    def dense(n_out, n_in, gain=2.0):
        return rng.normal(0.0, np.sqrt(gain / n_in), size=(n_out, n_in))

    return {
        "q.w1": hp.text_init_gain * dense(H, text_dim),
        "q.b1": np.zeros(H),
        "q.w2": dense(d, H),
        "q.b2": np.zeros(d),
        "vmn.w1": dense(H, visual_dim),
        "vmn.b1": np.zeros(H),
        "vmn.w2": dense(l * d, H, gain=1.0 / d),
        "vmn.b2": np.zeros(l * d),
        "desc.w": hp.text_init_gain * dense(m * d, text_dim),
        "desc.b": np.zeros(m * d),
    }


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


def _check_params(params: Params, prefix: str) -> None:
    for k, v in params.items():
        if k.startswith(prefix):
            check_finite(k, v)


def l2_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize; zero rows fall back to the first basis vector."""
    x = np.atleast_2d(x)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    safe = np.where(norms == 0, 1.0, norms)
    out = x / safe
    if zero.any():
        logger.warning("normalizing %d zero vector(s); using basis vector e1", int(zero.sum()))
        out[zero] = 0.0
        out[zero, 0] = 1.0
    return out, norms[:, 0]


def _normalize_backward(y: np.ndarray, norms: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # d(x/|x|) = (g - y (y.g)) / |x|; the e1 fallback has no gradient
    safe = np.where(norms == 0, np.inf, norms)[:, None]
    return (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / safe


def _mlp_forward(w1, b1, w2, b2, x):
    a = x @ w1.T + b1
    h = np.maximum(a, 0.0)
    return h @ w2.T + b2, (x, a, h)


def _mlp_backward(w2, cache, dout):
    x, a, h = cache
    dw2 = dout.T @ h
    db2 = dout.sum(axis=0)
    da = (dout @ w2) * (a > 0)
    return da.T @ x, da.sum(axis=0), dw2, db2


# -- query encoder ---------------------------------------------------------


def query_forward(params: Params, x: np.ndarray):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    check_finite("query features", x)
    _check_params(params, "q.")
    raw, mlp = _mlp_forward(params["q.w1"], params["q.b1"], params["q.w2"], params["q.b2"], x)
    q, norms = l2_normalize(raw)
    return q, (mlp, q, norms)


def query_backward(params: Params, cache, dq: np.ndarray) -> Params:
    mlp, q, norms = cache
    draw = _normalize_backward(q, norms, dq)
    dw1, db1, dw2, db2 = _mlp_backward(params["q.w2"], mlp, draw)
    return {"q.w1": dw1, "q.b1": db1, "q.w2": dw2, "q.b2": db2}


def encode_query(params: Params, x: np.ndarray) -> np.ndarray:
    """Unit-norm query embedding(s) for one feature vector or a batch."""
    q, _ = query_forward(params, x)
    return q[0] if np.ndim(x) == 1 else q


# -- entity encoder --------------------------------------------------------


@dataclass
class EntityEncoding:
    e_f: np.ndarray
    e_v: np.ndarray
    e_d: np.ndarray
    v_bar: np.ndarray


def vmn_project(params: Params, v: np.ndarray, hp: HyperParams) -> np.ndarray:
    """Visual feature(s) -> ``(..., l, d)`` prefix vectors."""
    v2 = np.atleast_2d(np.asarray(v, dtype=np.float64))
    check_finite("visual features", v2)
    _check_params(params, "vmn.")
    out, _ = _mlp_forward(params["vmn.w1"], params["vmn.b1"], params["vmn.w2"], params["vmn.b2"], v2)
    out = out.reshape(len(v2), hp.prefix_len, hp.embed_dim)
    return out[0] if np.ndim(v) == 1 else out


def entity_forward(params: Params, v: np.ndarray, t: np.ndarray, hp: HyperParams):
    """Batched entity encoding.

    Returns ``(e_f, v_bar, e_v, e_d, cache)`` where ``e_f`` is unit-norm and the
    other three are the raw mean-pooled components.
    """
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    check_finite("visual features", v)
    check_finite("text features", t)
    _check_params(params, "vmn.")
    _check_params(params, "desc.")
    n, l, m, d = len(v), hp.prefix_len, hp.desc_tokens, hp.embed_dim
    L = hp.seq_len
    pre, vmn_cache = _mlp_forward(params["vmn.w1"], params["vmn.b1"], params["vmn.w2"], params["vmn.b2"], v)
    prefixes = pre.reshape(n, l, d)
    tokens = (t @ params["desc.w"].T + params["desc.b"]).reshape(n, m, d)
    e_v = prefixes.sum(axis=1) / L
    e_d = tokens.sum(axis=1) / L
    v_bar = prefixes.mean(axis=1)
    e_f, norms = l2_normalize(e_v + e_d)
    return e_f, v_bar, e_v, e_d, (vmn_cache, t, e_f, norms)


def entity_backward(params: Params, cache, de_f: np.ndarray, dv_bar: np.ndarray, hp: HyperParams) -> Params:
    vmn_cache, t, e_f, norms = cache
    l, m, L = hp.prefix_len, hp.desc_tokens, hp.seq_len
    draw = _normalize_backward(e_f, norms, de_f)
    # every prefix contributes 1/L to e_v and 1/l to v_bar
    dprefix = draw / L + dv_bar / l
    dpre = np.tile(dprefix, (1, l))
    dw1, db1, dw2, db2 = _mlp_backward(params["vmn.w2"], vmn_cache, dpre)
    dtok = np.tile(draw / L, (1, m))
    return {
        "vmn.w1": dw1,
        "vmn.b1": db1,
        "vmn.w2": dw2,
        "vmn.b2": db2,
        "desc.w": dtok.T @ t,
        "desc.b": dtok.sum(axis=0),
    }


def encode_entity(params: Params, v: np.ndarray, t: np.ndarray, hp: HyperParams) -> EntityEncoding:
    e_f, v_bar, e_v, e_d, _ = entity_forward(params, v, t, hp)
    if np.ndim(v) == 1:
        return EntityEncoding(e_f[0], e_v[0], e_d[0], v_bar[0])
    return EntityEncoding(e_f, e_v, e_d, v_bar)


def similarity(q: np.ndarray, e: np.ndarray, tau: float) -> float:
    if not tau > 0:
        raise ValueError("tau must be positive")
    return float(np.exp(np.dot(q, e) / tau))


# -- checkpoints -----------------------------------------------------------


def params_digest(params: Params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        h.update(name.encode())
        h.update(struct.pack("<I", arr.ndim))
        h.update(struct.pack(f"<{arr.ndim}I", *arr.shape))
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path, params: Params) -> None:
    """Write float32 tensors followed by a SHA-256 trailer over the payload."""
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += hashlib.sha256(buf).digest()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Params:
    data = Path(path).read_bytes()
    if len(data) < 12 + 32 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    body, trailer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError(f"{path}: content hash mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    params = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", body, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            size = int(np.prod(shape)) * 4
            if off + size > len(body):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            params[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=off).reshape(shape).astype(np.float64)
            off += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensors")
    return params
