"""Attention store: keyed capture, completeness, and offline dumps."""

import numpy as np
import pytest

from attnfuse.errors import ContractViolation, MissingRecordError
from attnfuse.model import (KIND_CROSS, KIND_SELF, AttentionRecord,
                            config_hash)
from attnfuse.store import (AttentionKey, AttentionStore, StoreMeta,
                            load_store_dump)


def _uniform_record(t, layer, kind, keys=4):
    attn = np.full((2, 1, 3, keys), 1.0 / keys)
    return AttentionRecord(t=t, layer=layer, kind=kind, attn=attn)


def test_record_query_round_trip():
    store = AttentionStore(StoreMeta(T=2, blocks=1, config_hash=7))
    rec = _uniform_record(0, 0, KIND_SELF)
    store.record(rec)
    got = store.query(0, 0, KIND_SELF)
    assert got is rec
    assert np.array_equal(got.attn, rec.attn)
    assert not got.attn.flags.writeable


def test_duplicate_record_rejected():
    store = AttentionStore(StoreMeta(T=2, blocks=1, config_hash=7))
    store.record(_uniform_record(1, 0, KIND_CROSS))
    with pytest.raises(ContractViolation):
        store.record(_uniform_record(1, 0, KIND_CROSS))


def test_missing_query_names_key():
    store = AttentionStore(StoreMeta(T=4, blocks=2, config_hash=7))
    with pytest.raises(MissingRecordError) as exc:
        store.query(3, 1, KIND_SELF)
    msg = str(exc.value)
    assert "3" in msg and "1" in msg and "self" in msg


def test_bad_row_sums_rejected_at_record_time():
    store = AttentionStore(StoreMeta(T=1, blocks=1, config_hash=7))
    attn = np.full((1, 1, 2, 4), 0.3)
    with pytest.raises(ContractViolation):
        store.record(AttentionRecord(t=0, layer=0, kind=KIND_SELF, attn=attn))


def test_verify_complete_lists_missing():
    store = AttentionStore(StoreMeta(T=2, blocks=1, config_hash=7))
    store.record(_uniform_record(0, 0, KIND_SELF))
    store.record(_uniform_record(0, 0, KIND_CROSS))
    store.record(_uniform_record(1, 0, KIND_SELF))
    missing = store.verify_complete()
    assert missing == [AttentionKey(1, 0, KIND_CROSS)]
    store.record(_uniform_record(1, 0, KIND_CROSS))
    assert store.verify_complete() == []


def test_inversion_fills_store(tiny_cfg, tiny_inversion):
    sched, _, _, _, store = tiny_inversion
    assert len(store) == 2 * sched.T * tiny_cfg.blocks
    assert store.verify_complete() == []
    hw = tiny_cfg.h * tiny_cfg.w
    first = store.query(0, 0, KIND_SELF)
    assert first.attn.shape == (tiny_cfg.n, tiny_cfg.heads, hw, 2 * hw)
    last = store.query(sched.T - 1, tiny_cfg.blocks - 1, KIND_CROSS)
    assert last.attn.shape[:3] == (tiny_cfg.n, tiny_cfg.heads, hw)
    with pytest.raises(MissingRecordError):
        store.query(sched.T, 0, KIND_SELF)


def test_stored_maps_are_immutable(tiny_inversion):
    *_, store = tiny_inversion
    rec = store.query(0, 0, KIND_SELF)
    with pytest.raises(ValueError):
        rec.attn[0, 0, 0, 0] = 0.5


def test_dump_and_load_round_trip(tmp_path, tiny_cfg, tiny_inversion):
    sched, _, _, _, store = tiny_inversion
    d = tmp_path / "store"
    store.dump(d)
    assert (d / "index.json").exists()
    files = sorted(p.name for p in d.glob("*.bin"))
    assert len(files) == len(store)
    assert f"self_t0000_l00.bin" in files
    loaded = load_store_dump(d)
    assert loaded.meta == store.meta
    assert loaded.meta.config_hash == config_hash(tiny_cfg)
    assert len(loaded) == len(store)
    for key in store.keys():
        a = store.query(*key).attn
        b = loaded.query(*key).attn
        assert np.array_equal(a, b)


def test_store_meta_validation():
    with pytest.raises(ContractViolation):
        AttentionStore(StoreMeta(T=0, blocks=1, config_hash=0))
    with pytest.raises(ContractViolation):
        AttentionStore(StoreMeta(T=1, blocks=0, config_hash=0))
