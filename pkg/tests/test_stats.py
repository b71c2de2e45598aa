import json
from collections import Counter

import pytest

from src.services.datagen import gen_sensors, gen_tweets
from src.services.schema_store import deserialize_schema, serialize_schema
from src.services.stats_service import build_stats_report, encode_partition, live_documents, render_table
from src.services.vb_record import decode


def multiset(docs):
    return Counter(json.dumps(doc, sort_keys=True) for doc in docs)


def test_empty_dataset(dataset_factory):
    dataset = dataset_factory(partitions=2)
    report = build_stats_report(dataset, page_size=4096)
    assert report.live_records == 0
    assert report.components == []
    assert report.total_component_bytes == 0
    for name in ("open", "inferred"):
        assert report.encoding(name).uncompressed_bytes == 0
        assert report.encoding(name).compressed_bytes == 0
    assert report.dictionary_entries == 0
    assert "0 live records" in render_table(report)


def test_sensor_records_shrink_when_compacted(dataset_factory):
    dataset = dataset_factory(partitions=2)
    dataset.bulk_load(gen_sensors(300, seed=11, readings=20))
    report = build_stats_report(dataset, page_size=4096)
    open_size = report.encoding("open")
    inferred = report.encoding("inferred")
    assert report.live_records == 300
    assert inferred.uncompressed_bytes < open_size.uncompressed_bytes
    assert 0 < inferred.compressed_bytes < inferred.uncompressed_bytes
    assert len(report.components) == 2
    assert all(c.record_count == c.entry_count for c in report.components)
    assert report.dictionary_entries >= 2 * 8
    assert "inferred/open ratio" in render_table(report)


def test_report_counts_only_live_records(dataset_factory):
    dataset = dataset_factory(partitions=1)
    for doc in gen_tweets(50, seed=2):
        dataset.insert(doc)
    dataset.flush()
    for key in range(10):
        dataset.delete(key)
    report = build_stats_report(dataset, codec="bz2", page_size=4096)
    assert report.live_records == 40
    assert report.codec == "bz2"
    # the tombstones are still buffered
    assert sum(c.entry_count for c in report.components) == 50


def test_both_encodings_hold_the_same_documents(dataset_factory):
    dataset = dataset_factory(partitions=2)
    live = {doc["id"]: doc for doc in gen_tweets(120, seed=5)}
    dataset.bulk_load(live.values())
    for doc in gen_sensors(40, seed=6, readings=4):
        live[1000 + doc["id"]] = dict(doc, id=1000 + doc["id"])
        dataset.insert(live[1000 + doc["id"]])
    dataset.flush()
    for key in (3, 17, 1005):
        dataset.delete(key)
        del live[key]
    live[4] = {"id": 4, "text": None, "extra": [1, "two"]}
    dataset.upsert(live[4])
    for doc in gen_tweets(5, seed=9):
        live[2000 + doc["id"]] = dict(doc, id=2000 + doc["id"])
        dataset.insert(live[2000 + doc["id"]])

    declared = dataset.config.declared
    partitions = live_documents(dataset)
    expected = multiset(live.values())
    assert sum(expected.values()) == 120 + 40 - 3 + 5

    open_docs, inferred_docs = [], []
    for docs in partitions:
        part = encode_partition(docs, declared)
        schema = deserialize_schema(serialize_schema(part.schema))
        assert [key for key, _ in part.open_records] == [key for key, _ in part.inferred_records]
        assert not any(rec.compacted for _, rec in part.open_records)
        assert all(rec.compacted for _, rec in part.inferred_records)
        open_docs += [decode(rec, None, declared) for _, rec in part.open_records]
        inferred_docs += [decode(rec, schema, declared) for _, rec in part.inferred_records]
    assert multiset(open_docs) == multiset(inferred_docs) == expected


@pytest.mark.slow
def test_sensor_corpus_at_scale(dataset_factory):
    dataset = dataset_factory(partitions=4)
    dataset.bulk_load(gen_sensors(100_000, seed=1))
    report = build_stats_report(dataset)
    ratio = report.encoding("inferred").uncompressed_bytes / report.encoding("open").uncompressed_bytes
    assert ratio <= 0.5
