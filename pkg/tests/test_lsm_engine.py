import threading

import numpy as np
import pytest

from src.core import faults
from src.core.exceptions import DuplicateKeyError, SimulatedCrash, VBStoreError
from src.services import lsm_engine
from src.services.component import ENTRY_TOMBSTONE, ComponentId
from src.services.vb_record import decode
from src.utils.keys import decode_key, encode_key

from tests.conftest import ID_ONLY
from tests.oracles import reinfer, replay

FIRST_BATCH = [{"id": 0, "name": "Ann", "age": 26}, {"id": 1, "name": "Bob", "age": 27}]
SECOND_BATCH = [{"id": 2, "name": "Alex"}, {"id": 3, "name": "Bill", "age": "old"}]


@pytest.fixture(params=[None, "zlib"], ids=["plain", "zlib"])
def codec(request):
    return request.param


def live_docs(engine):
    return {decode_key(item.key): decode(item.record, item.schema, ID_ONLY) for item in engine.scan()}


def load(engine, docs):
    for doc in docs:
        engine.insert(doc)
    return engine.flush()


def test_second_flush_schema_extends_first(engine_factory, codec):
    engine = engine_factory(codec=codec)
    c0 = load(engine, FIRST_BATCH)
    c1 = load(engine, SECOND_BATCH)
    schemas = engine.schema_snapshot()
    first, second = schemas[c0].structure(), schemas[c1].structure()
    assert first["fields"]["age"] == {"kind": "int64", "count": 2}
    assert second["fields"]["age"]["kind"] == "union"
    assert second["fields"]["age"]["count"] == 3
    assert second["fields"]["name"]["count"] == 4
    assert set(first["fields"]) <= set(second["fields"])
    assert live_docs(engine) == {doc["id"]: doc for doc in FIRST_BATCH + SECOND_BATCH}


def test_flush_of_empty_memtable_is_noop(engine_factory):
    engine = engine_factory()
    assert engine.flush() is None
    assert engine.components == []


def test_delete_writes_tombstone_then_merge_drops_it(engine_factory, codec):
    engine = engine_factory(codec=codec)
    c0 = load(engine, FIRST_BATCH)
    engine.delete(0)
    c1 = engine.flush()
    newest = engine.components[-1]
    assert newest.get(encode_key(0)) == (ENTRY_TOMBSTONE, None)
    assert newest.schema.structure()["fields"] == {
        "name": {"kind": "string", "count": 1},
        "age": {"kind": "int64", "count": 1},
    }
    assert engine.point_lookup(0) is None

    merged = engine.merge([c0, c1])
    assert [c.cid for c in engine.components] == [merged]
    assert engine.components[0].keys() == [encode_key(1)]
    assert engine.components[0].schema == newest.schema
    assert live_docs(engine) == {1: FIRST_BATCH[1]}


def test_merge_without_oldest_keeps_tombstones(engine_factory):
    engine = engine_factory()
    load(engine, FIRST_BATCH)
    engine.delete(1)
    c1 = engine.flush()
    c2 = load(engine, [{"id": 9, "name": "Zed"}])
    engine.merge([c1, c2])
    assert engine.components[-1].get(encode_key(1)) == (ENTRY_TOMBSTONE, None)
    assert sorted(live_docs(engine)) == [0, 9]


def test_merge_rejects_non_adjacent_inputs(engine_factory):
    engine = engine_factory()
    c0 = load(engine, FIRST_BATCH[:1])
    load(engine, FIRST_BATCH[1:])
    c2 = load(engine, SECOND_BATCH)
    with pytest.raises(ValueError):
        engine.merge([c0, c2])
    with pytest.raises(ValueError):
        engine.merge([c0])


def test_merge_keeps_newest_schema(engine_factory, codec):
    engine = engine_factory(codec=codec)
    c0 = load(engine, FIRST_BATCH)
    c1 = load(engine, SECOND_BATCH)
    expected = engine.components[-1].schema
    engine.merge([c0, c1])
    assert engine.components[0].schema == expected
    assert engine.schema == expected


def test_upsert_of_new_key_skips_primary_lookup(engine_factory):
    engine = engine_factory()
    load(engine, FIRST_BATCH)
    engine.counters.primary_lookups = 0
    engine.upsert({"id": 42, "name": "New"})
    assert engine.counters.primary_lookups == 0
    assert engine.counters.pk_probes >= 1
    engine.upsert({"id": 0, "name": "Ann", "age": 27})
    assert engine.counters.primary_lookups == 1


def test_upsert_changes_field_type(engine_factory, codec):
    engine = engine_factory(codec=codec)
    load(engine, FIRST_BATCH)
    engine.upsert({"id": 0, "name": "Ann", "age": "twenty-six"})
    engine.flush()
    age = engine.schema.structure()["fields"]["age"]
    assert age["kind"] == "union"
    assert age["branches"]["int64"]["count"] == 1
    assert age["branches"]["string"]["count"] == 1
    assert engine.point_lookup(0)["age"] == "twenty-six"


def test_upsert_replacing_only_version_drops_old_type(engine_factory):
    engine = engine_factory()
    load(engine, [{"id": 0, "age": 26}])
    engine.upsert({"id": 0, "age": "old"})
    engine.flush()
    assert engine.schema.structure()["fields"]["age"] == {"kind": "string", "count": 1}


def test_strict_insert_rejects_live_key(engine_factory):
    engine = engine_factory()
    load(engine, FIRST_BATCH)
    with pytest.raises(DuplicateKeyError):
        engine.insert({"id": 1, "name": "Again"})
    engine.delete(1)
    engine.insert({"id": 1, "name": "Again"})
    assert engine.point_lookup(1) == {"id": 1, "name": "Again"}


def test_point_lookup_sees_newest_version(engine_factory, codec):
    engine = engine_factory(codec=codec)
    load(engine, FIRST_BATCH)
    engine.upsert({"id": 0, "name": "Ann", "age": 30})
    assert engine.point_lookup(0)["age"] == 30
    engine.flush()
    assert engine.point_lookup(0)["age"] == 30
    engine.delete(0)
    assert engine.point_lookup(0) is None
    engine.flush()
    assert engine.point_lookup(0) is None
    assert engine.point_lookup(12345) is None


def test_delete_of_absent_key(engine_factory):
    engine = engine_factory()
    load(engine, FIRST_BATCH)
    engine.delete(77)
    engine.flush()
    assert engine.live_count() == 2
    assert engine.schema.structure()["count"] == 2


def test_scan_bounds(engine_factory):
    engine = engine_factory()
    load(engine, [{"id": i} for i in range(10)])
    engine.insert({"id": 10})
    keys = [decode_key(item.key) for item in engine.scan(encode_key(3), encode_key(11))]
    assert keys == list(range(3, 11))
    sources = {decode_key(item.key): item.source for item in engine.scan()}
    assert sources[10] is None
    assert sources[0] == engine.components[0].cid


def test_memtable_budget_triggers_flush(engine_factory):
    engine = engine_factory(memtable_bytes=512)
    for i in range(40):
        engine.insert({"id": i, "text": "x" * 20})
    assert engine.counters.flushes >= 2
    assert engine.live_count() == 40
    assert sorted(live_docs(engine)) == list(range(40))


def test_auto_merge_after_flush(engine_factory):
    engine = engine_factory(auto_merge=True, merge_tolerable_count=3)
    for batch in range(3):
        load(engine, [{"id": batch * 10 + i, "v": i} for i in range(5)])
    assert engine.counters.merges == 1
    assert len(engine.components) == 1
    assert engine.components[0].cid.lo == 1
    assert engine.components[0].cid.hi == 3


def test_bulk_load_builds_one_component(engine_factory, codec):
    engine = engine_factory(codec=codec)
    docs = [{"id": 2, "age": "old"}, {"id": 1, "age": 27}, {"id": 0, "age": 26}]
    cid = engine.bulk_load(docs)
    assert [c.cid for c in engine.components] == [cid]
    age = engine.schema_snapshot()[cid].structure()["fields"]["age"]
    assert age["kind"] == "union"
    assert age["count"] == 3
    assert live_docs(engine) == {doc["id"]: doc for doc in docs}
    assert engine.live_count() == 3


def test_bulk_load_rejects_duplicates_and_non_empty(engine_factory):
    engine = engine_factory()
    with pytest.raises(DuplicateKeyError):
        engine.bulk_load([{"id": 1}, {"id": 1}])
    assert engine.bulk_load([]) is None
    engine.insert({"id": 3})
    with pytest.raises(VBStoreError):
        engine.bulk_load([{"id": 4}])


def test_compactor_off_stores_uncompacted_records(engine_factory):
    engine = engine_factory(compactor=False)
    cid = load(engine, FIRST_BATCH)
    assert engine.schema_snapshot()[cid] is None
    item = next(engine.scan())
    assert not item.record.compacted
    assert live_docs(engine) == {doc["id"]: doc for doc in FIRST_BATCH}


# ---------------------------------------------------------------------------
# writers during flush and merge
# ---------------------------------------------------------------------------


class GatedWrites:
    """Holds component writes of one stage until ``release`` is set."""

    def __init__(self, monkeypatch, stage):
        self.entered = threading.Event()
        self.release = threading.Event()
        real = lsm_engine.write_component

        def gated(*args, **kwargs):
            if kwargs.get("stage") == stage:
                self.entered.set()
                self.release.wait(10)
            return real(*args, **kwargs)

        monkeypatch.setattr(lsm_engine, "write_component", gated)


def in_background(fn, *args):
    outcome = {}

    def run():
        try:
            outcome["value"] = fn(*args)
        except BaseException as e:
            outcome["error"] = e

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    return thread, outcome


def finishes(fn, *args):
    """Run ``fn`` on another thread and require it to return within five seconds."""
    thread, outcome = in_background(fn, *args)
    thread.join(5)
    assert not thread.is_alive(), "blocked behind a component write"
    assert "error" not in outcome, outcome.get("error")
    return outcome.get("value")


def test_writes_and_lookups_proceed_during_flush(engine_factory, monkeypatch):
    engine = engine_factory()
    for doc in FIRST_BATCH:
        engine.insert(doc)
    gate = GatedWrites(monkeypatch, "flush")
    flusher, flushed = in_background(engine.flush)
    assert gate.entered.wait(5)

    assert finishes(engine.point_lookup, 0) == FIRST_BATCH[0]
    finishes(engine.upsert, {"id": 1, "name": "Bob", "age": "old"})
    finishes(engine.insert, {"id": 7, "name": "Gil"})
    expected = {0: FIRST_BATCH[0], 1: {"id": 1, "name": "Bob", "age": "old"}, 7: {"id": 7, "name": "Gil"}}
    assert finishes(live_docs, engine) == expected

    gate.release.set()
    flusher.join(5)
    assert flushed == {"value": ComponentId(1, 1)}
    assert engine.components[0].load_meta().entry_count == 2
    assert live_docs(engine) == expected
    engine.close()

    reopened = engine_factory()
    assert reopened.recovery.replayed == 2
    assert live_docs(reopened) == expected
    reopened.flush()
    assert reopened.schema.structure() == reinfer(expected.values(), ID_ONLY)


def test_writes_and_lookups_proceed_during_merge(engine_factory, monkeypatch):
    engine = engine_factory()
    c0 = load(engine, FIRST_BATCH)
    c1 = load(engine, SECOND_BATCH)
    gate = GatedWrites(monkeypatch, "merge")
    merger, merged = in_background(engine.merge, [c0, c1])
    assert gate.entered.wait(5)

    finishes(engine.delete, 0)
    assert finishes(engine.point_lookup, 3) == SECOND_BATCH[1]
    assert finishes(engine.point_lookup, 0) is None

    gate.release.set()
    merger.join(5)
    assert merged == {"value": ComponentId(1, 2)}
    assert [str(c.cid) for c in engine.components] == ["[1,2]"]
    expected = {doc["id"]: doc for doc in FIRST_BATCH[1:] + SECOND_BATCH}
    assert live_docs(engine) == expected
    engine.flush()
    assert engine.schema.structure() == reinfer(expected.values(), ID_ONLY)


def test_failed_flush_is_retried(engine_factory, monkeypatch):
    engine = engine_factory()
    for doc in FIRST_BATCH:
        engine.insert(doc)
    real = lsm_engine.write_component

    def disk_full(*args, **kwargs):
        raise OSError("no space left on device")

    monkeypatch.setattr(lsm_engine, "write_component", disk_full)
    with pytest.raises(OSError):
        engine.flush()
    assert engine.components == []
    assert engine.point_lookup(1) == FIRST_BATCH[1]
    engine.insert(SECOND_BATCH[0])

    monkeypatch.setattr(lsm_engine, "write_component", real)
    engine.flush()
    assert [str(c.cid) for c in engine.components] == ["[1,1]", "[2,2]"]
    expected = {doc["id"]: doc for doc in FIRST_BATCH + SECOND_BATCH[:1]}
    assert live_docs(engine) == expected
    assert engine.schema.structure() == reinfer(expected.values(), ID_ONLY)


def check_random_workload(engine, seed, steps=300, keys=30):
    rng = np.random.default_rng(seed)
    shapes = [
        lambda i: {"id": i, "v": int(rng.integers(0, 100))},
        lambda i: {"id": i, "v": "s" + str(i), "tags": ["a", "b"]},
        lambda i: {"id": i, "nested": {"x": float(i), "ok": bool(i % 2)}},
        lambda i: {"id": i, "v": None, "list": [[1, 2], "z"]},
    ]
    ops = []
    for _ in range(steps):
        key = int(rng.integers(0, keys))
        roll = rng.random()
        if roll < 0.6:
            doc = shapes[int(rng.integers(0, len(shapes)))](key)
            engine.upsert(doc)
            ops.append(("put", key, doc))
        elif roll < 0.85:
            engine.delete(key)
            ops.append(("delete", key))
        elif roll < 0.95:
            engine.flush()
        elif len(engine.components) >= 2:
            start = int(rng.integers(0, len(engine.components) - 1))
            engine.merge([c.cid for c in engine.components[start:start + 2]])
    expected = replay(ops)
    assert live_docs(engine) == expected
    assert engine.live_count() == len(expected)
    for key in range(keys):
        assert engine.point_lookup(key) == expected.get(key)
    engine.flush()
    assert engine.schema.structure() == reinfer(expected.values(), ID_ONLY)


@pytest.mark.parametrize("seed", range(6))
def test_random_workload_matches_replay(engine_factory, codec, seed):
    check_random_workload(engine_factory(codec=codec), seed)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(6, 100))
def test_random_workload_matches_replay_at_scale(engine_factory, codec, seed):
    check_random_workload(engine_factory(codec=codec), seed, steps=2000, keys=200)


# ---------------------------------------------------------------------------
# recovery
# ---------------------------------------------------------------------------


def test_recover_empty_directory(engine_factory):
    engine = engine_factory()
    assert engine.components == []
    assert engine.live_count() == 0
    assert engine.recovery.replayed == 0


def test_recover_replays_unflushed_writes(engine_factory, codec):
    engine = engine_factory(codec=codec)
    load(engine, FIRST_BATCH)
    engine.upsert({"id": 0, "name": "Ann", "age": 40})
    engine.delete(1)
    engine.insert({"id": 5, "name": "Eve"})
    engine.close()

    reopened = engine_factory(codec=codec)
    assert reopened.recovery.replayed == 3
    assert live_docs(reopened) == {0: {"id": 0, "name": "Ann", "age": 40}, 5: {"id": 5, "name": "Eve"}}
    reopened.flush()
    assert reopened.schema.structure() == reinfer(live_docs(reopened).values(), ID_ONLY)


def test_recover_skips_flushed_wal_records(engine_factory):
    engine = engine_factory()
    load(engine, FIRST_BATCH)
    engine.close()
    reopened = engine_factory()
    assert reopened.recovery.replayed == 0
    assert reopened.insert({"id": 8}) > 2


@pytest.mark.parametrize("point", ["flush.after_data", "flush.before_validity"])
def test_recover_removes_incomplete_component(engine_factory, codec, point):
    engine = engine_factory(codec=codec)
    load(engine, FIRST_BATCH)
    for doc in SECOND_BATCH:
        engine.insert(doc)
    faults.arm(point, mode="raise")
    with pytest.raises(SimulatedCrash):
        engine.flush()
    faults.disarm()

    reopened = engine_factory(codec=codec)
    assert reopened.recovery.removed_invalid == ["c_00000002_00000002.dat"]
    assert len(reopened.components) == 1
    assert reopened.recovery.replayed == 2
    assert live_docs(reopened) == {doc["id"]: doc for doc in FIRST_BATCH + SECOND_BATCH}


def test_recover_removes_merged_inputs(engine_factory):
    engine = engine_factory()
    c0 = load(engine, FIRST_BATCH)
    c1 = load(engine, SECOND_BATCH)
    faults.arm("merge.after_validity", mode="raise")
    with pytest.raises(SimulatedCrash):
        engine.merge([c0, c1])
    faults.disarm()
    # inputs are still on disk because the crash came before their removal
    assert (engine.directory / c0.file_name).exists()

    reopened = engine_factory()
    assert sorted(reopened.recovery.removed_covered) == [c0.file_name, c1.file_name]
    assert [str(c.cid) for c in reopened.components] == ["[1,2]"]
    assert len(live_docs(reopened)) == 4


def test_recover_discards_torn_wal_tail(engine_factory):
    engine = engine_factory()
    engine.insert({"id": 1})
    engine.insert({"id": 2})
    engine.close()
    wal = engine.directory / "wal.log"
    wal.write_bytes(wal.read_bytes()[:-3])
    reopened = engine_factory()
    assert reopened.recovery.replayed == 1
    assert sorted(live_docs(reopened)) == [1]
