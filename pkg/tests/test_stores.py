import numpy as np
import pytest

from cmr.encoders import encode_query
from cmr.kg import Triple
from cmr.pipeline import train_triples
from cmr.stores import (
    TRAIN_ONLY,
    TRAIN_PLUS_INFERENCE,
    EntityStore,
    KnowledgeStore,
    StoreFormatError,
    StoreIntegrityError,
    build_entity_store,
    build_knowledge_store,
    knowledge_scope,
    load_store,
    save_store,
)


def test_record_count_equals_triples(tiny_dataset, tiny_bank, tiny_params):
    triples = train_triples(tiny_dataset)[:10]
    ks = build_knowledge_store(tiny_params, triples, tiny_bank)
    assert len(ks) == 10
    assert list(ks.values) == [t.tail for t in triples]
    assert [(int(h), int(r)) for h, r in zip(ks.heads, ks.relations)] == [(t.head, t.relation) for t in triples]


def test_keys_equal_post_hoc_reencoding(tiny_dataset, tiny_bank, tiny_params):
    triples = train_triples(tiny_dataset)
    ks = build_knowledge_store(tiny_params, triples, tiny_bank)
    again = build_knowledge_store(tiny_params, list(triples), tiny_bank)
    assert ks.keys.tobytes() == again.keys.tobytes()
    q = encode_query(tiny_params, tiny_bank.queries(triples))
    np.testing.assert_allclose(ks.keys, q, atol=1e-6)


def test_missing_entity_named(tiny_bank, tiny_params):
    with pytest.raises(KeyError, match="entity 999"):
        build_knowledge_store(tiny_params, [Triple(0, 0, 999)], tiny_bank)


def test_scope_counts(tiny_dataset):
    split = tiny_dataset.split
    n = tiny_dataset.num_relations
    assert len(knowledge_scope(split, TRAIN_ONLY, n)) == 2 * len(split.train)
    assert len(knowledge_scope(split, TRAIN_PLUS_INFERENCE, n)) == 2 * len(split.all_triples())
    with pytest.raises(ValueError):
        knowledge_scope(split, "everything", n)


def test_entity_store_rows_and_norms(tiny_dataset, tiny_bank, tiny_params, tiny_hp):
    es = build_entity_store(tiny_params, tiny_bank, tiny_hp)
    assert len(es) == tiny_dataset.num_entities
    assert es.keys.dtype == np.float32
    np.testing.assert_allclose(np.linalg.norm(es.keys.astype(np.float64), axis=1), 1, atol=1e-6)


def test_image_less_entities_are_padded(tiny_dataset, tiny_bank):
    from cmr.featurize import pad_missing_visual

    missing = [i for i, has in enumerate(tiny_dataset.entities.has_image) if not has]
    assert missing, "fixture should contain image-less entities"
    for i in missing:
        np.testing.assert_array_equal(tiny_bank.visual[i], pad_missing_visual(i, tiny_bank.visual_dim, 0))


def test_stores_are_read_only(tiny_dataset, tiny_bank, tiny_params):
    ks = build_knowledge_store(tiny_params, train_triples(tiny_dataset), tiny_bank)
    with pytest.raises(ValueError):
        ks.keys[0, 0] = 1.0


def _random_ks(rng, n=20, d=6):
    keys = rng.standard_normal((n, d)).astype(np.float32)
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    ids = lambda hi: rng.integers(0, hi, n).astype(np.uint32)
    return KnowledgeStore(keys, ids(50), ids(50), ids(8))


@pytest.mark.parametrize("kind", ["ks", "es"])
def test_roundtrip_bitwise(tmp_path, kind):
    rng = np.random.default_rng(0)
    store = _random_ks(rng)
    if kind == "es":
        store = EntityStore(store.keys, np.arange(len(store), dtype=np.uint32))
    save_store(tmp_path / "s", store)
    loaded = load_store(tmp_path / "s", expected_dim=6)
    assert type(loaded) is type(store)
    for field in ("keys", "values", "heads", "relations"):
        if hasattr(store, field):
            assert getattr(loaded, field).tobytes() == getattr(store, field).tobytes()
    save_store(tmp_path / "t", loaded)
    assert (tmp_path / "t").read_bytes() == (tmp_path / "s").read_bytes()


def test_corrupt_key_byte_detected(tmp_path):
    save_store(tmp_path / "s", _random_ks(np.random.default_rng(1)))
    raw = bytearray((tmp_path / "s").read_bytes())
    raw[40] ^= 0x10  # inside the key matrix
    (tmp_path / "s").write_bytes(bytes(raw))
    with pytest.raises(StoreIntegrityError):
        load_store(tmp_path / "s")


def test_truncated_store_rejected(tmp_path):
    save_store(tmp_path / "s", _random_ks(np.random.default_rng(2)))
    raw = (tmp_path / "s").read_bytes()
    (tmp_path / "s").write_bytes(raw[:-5])
    with pytest.raises(StoreFormatError):
        load_store(tmp_path / "s")


def test_wrong_dim_rejected(tmp_path):
    save_store(tmp_path / "s", _random_ks(np.random.default_rng(3)))
    with pytest.raises(StoreFormatError, match="dimension"):
        load_store(tmp_path / "s", expected_dim=7)
