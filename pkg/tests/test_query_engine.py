import pytest
from pydantic import ValidationError

from src.core.exceptions import PlanError, SchemaRegistryError
from src.core.types import MISSING
from src.schemas.query import QuerySpec
from src.services.component import ComponentId
from src.services.datagen import gen_publications, gen_sensors, gen_tweets
from src.services.query_engine import (
    ExchangeKind,
    SchemaRegistry,
    _Accumulator,
    _compare,
    execute,
    plan,
    run_query,
)
from src.services.schema_store import SchemaStore

from tests.oracles import canonical, evaluate

TWEETS = list(gen_tweets(240, seed=5))
PUBLICATIONS = list(gen_publications(150, seed=6))
SENSORS = list(gen_sensors(60, seed=7, readings=12))


def q(**fields) -> QuerySpec:
    return QuerySpec.model_validate(dict(dataset="ds", **fields))


def loaded(dataset_factory, docs, partitions=1, flush=True, **config):
    dataset = dataset_factory(partitions=partitions, **config)
    for doc in docs:
        dataset.insert(doc)
    if flush:
        dataset.flush()
    return dataset


COUNT_ALL = dict(group_by={"aggregates": [{"fn": "COUNT", "as": "n"}]})

TWEET_QUERIES = {
    "count": COUNT_ALL,
    "by_lang": dict(group_by={
        "keys": [{"ref": "lang", "as": "lang"}],
        "aggregates": [
            {"fn": "COUNT", "as": "n"},
            {"fn": "SUM", "ref": "retweet_count", "as": "retweets"},
            {"fn": "MAX", "ref": "user.followers_count", "as": "top"},
            {"fn": "AVG", "ref": "retweet_count", "as": "avg"},
        ],
    }),
    "by_country": dict(group_by={
        "keys": [{"ref": "place.country", "as": "country"}],
        "aggregates": [{"fn": "COUNT", "ref": "place", "as": "placed"}, {"fn": "MIN", "ref": "id", "as": "first"}],
    }),
    "popular": dict(
        where=[{"ref": "retweet_count", "op": ">=", "value": 400}, {"ref": "user.verified", "op": "=", "value": False}],
        select=[{"ref": "id", "as": "id"}, {"ref": "lang", "as": "lang"}, {"ref": "place.country", "as": "c"}],
        order_by=[{"field": "id", "desc": True}],
        limit=7,
    ),
    "hashtags": dict(
        unnest={"path": "entities.hashtags[*].text", "as": "tag"},
        where=[{"ref": "$tag", "op": "!=", "value": "db"}],
        group_by={"keys": [{"ref": "$tag", "as": "tag"}], "aggregates": [{"fn": "COUNT", "as": "n"}]},
        order_by=[{"field": "n", "desc": True}, {"field": "tag"}],
    ),
}


# ---------------------------------------------------------------------------
# exchanges and broadcasts
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("partitions", [1, 4])
def test_count_star_is_local(dataset_factory, partitions):
    dataset = loaded(dataset_factory, TWEETS, partitions)
    result = run_query(q(**COUNT_ALL), dataset)
    assert result.rows == [{"n": len(TWEETS)}]
    assert result.stats.broadcasts == 0
    assert result.stats.vector_scans == 0
    assert result.stats.records_scanned == len(TWEETS)
    assert not result.plan.non_local


@pytest.mark.parametrize("partitions", [1, 3, 4])
def test_keyed_group_by_broadcasts_once_per_partition(dataset_factory, partitions):
    dataset = loaded(dataset_factory, TWEETS, partitions)
    result = run_query(q(**TWEET_QUERIES["by_lang"]), dataset)
    assert result.stats.broadcasts == partitions
    assert [e.kind for e in result.plan.exchanges] == [ExchangeKind.HASH_PARTITION]
    assert any("hash-partition" in line for line in result.plan.explain())


def test_select_needs_no_broadcast(dataset_factory):
    dataset = loaded(dataset_factory, TWEETS, 2)
    result = run_query(q(**TWEET_QUERIES["popular"]), dataset)
    assert result.stats.broadcasts == 0


# ---------------------------------------------------------------------------
# field access pushdown
# ---------------------------------------------------------------------------

THREE_FIELDS = dict(select=[
    {"ref": "id", "as": "id"},
    {"ref": "user.name", "as": "user"},
    {"ref": "retweet_count", "as": "rt"},
])


@pytest.mark.parametrize("pushdown, scans_per_record", [(True, 1), (False, 3)])
def test_pushdown_consolidates_accesses(dataset_factory, pushdown, scans_per_record):
    dataset = loaded(dataset_factory, TWEETS, 2)
    result = run_query(q(**THREE_FIELDS), dataset, pushdown=pushdown)
    assert result.stats.vector_scans == scans_per_record * len(TWEETS)
    assert len(result.plan.scan.pushed_paths) == (3 if pushdown else 0)


@pytest.mark.parametrize("pushdown, scans_per_record", [(True, 1), (False, 3)])
def test_every_predicate_is_evaluated(dataset_factory, pushdown, scans_per_record):
    dataset = loaded(dataset_factory, TWEETS, 2)
    spec = q(
        where=[{"ref": "retweet_count", "op": ">", "value": -1}, {"ref": "lang", "op": "exists"}],
        select=[{"ref": "id", "as": "id"}],
    )
    result = run_query(spec, dataset, pushdown=pushdown)
    assert len(result.rows) == len(TWEETS)
    assert result.stats.vector_scans == scans_per_record * len(TWEETS)


def test_query_document_overrides_pushdown(dataset_factory):
    dataset = loaded(dataset_factory, TWEETS)
    result = run_query(q(pushdown=False, **THREE_FIELDS), dataset, pushdown=True)
    assert not result.plan.pushdown
    assert result.stats.vector_scans == 3 * len(TWEETS)


@pytest.mark.slow
def test_pushdown_is_faster_on_sensor_reports(dataset_factory):
    dataset = dataset_factory(partitions=4)
    dataset.bulk_load(gen_sensors(100_000, seed=1))
    spec = q(
        where=[
            {"ref": "status.battery_level", "op": ">", "value": 10.0},
            {"ref": "status.signal_strength", "op": ">", "value": -80},
        ],
        group_by={
            "keys": [{"ref": "status.firmware_version", "as": "fw"}],
            "aggregates": [{"fn": "MAX", "ref": "report_time", "as": "latest"}, {"fn": "COUNT", "as": "n"}],
        },
    )
    runs = {True: [], False: []}
    for _ in range(3):
        for pushdown in runs:
            runs[pushdown].append(run_query(spec, dataset, pushdown=pushdown))
    on, off = runs[True][0], runs[False][0]
    assert canonical(on.rows) == canonical(off.rows)
    assert on.stats.records_scanned == off.stats.records_scanned == 100_000
    assert on.stats.vector_scans == 100_000
    assert off.stats.vector_scans > 2 * on.stats.vector_scans
    assert min(r.stats.elapsed_seconds for r in runs[True]) < min(r.stats.elapsed_seconds for r in runs[False])


def test_pushdown_does_not_change_results(dataset_factory):
    dataset = loaded(dataset_factory, TWEETS, 3)
    for name, fields in TWEET_QUERIES.items():
        on = run_query(q(**fields), dataset, pushdown=True).rows
        off = run_query(q(**fields), dataset, pushdown=False).rows
        assert canonical(on) == canonical(off), name


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("partitions", [1, 2, 4, 8])
@pytest.mark.parametrize("name", sorted(TWEET_QUERIES))
def test_results_match_reference_for_any_partitioning(dataset_factory, partitions, name):
    dataset = loaded(dataset_factory, TWEETS, partitions)
    spec = q(**TWEET_QUERIES[name])
    rows = run_query(spec, dataset).rows
    expected = evaluate(spec, TWEETS)
    if spec.order_by and spec.limit is not None:
        assert rows == expected
    else:
        assert canonical(rows) == canonical(expected)


@pytest.mark.parametrize("partitions", [1, 3])
def test_results_over_memtable_and_disk(dataset_factory, partitions):
    dataset = loaded(dataset_factory, TWEETS[:150], partitions)
    for doc in TWEETS[150:]:
        dataset.insert(doc)
    spec = q(**TWEET_QUERIES["by_lang"])
    assert canonical(run_query(spec, dataset).rows) == canonical(evaluate(spec, TWEETS))


def test_sensor_min_max_per_sensor(dataset_factory):
    dataset = loaded(dataset_factory, SENSORS, 4)
    spec = q(
        unnest={"path": "readings[*].reading_value", "as": "r"},
        group_by={
            "keys": [{"ref": "sensor_id", "as": "sensor"}],
            "aggregates": [{"fn": "MIN", "ref": "$r", "as": "lo"}, {"fn": "MAX", "ref": "$r", "as": "hi"},
                           {"fn": "COUNT", "as": "n"}],
        },
    )
    for pushdown in (True, False):
        rows = run_query(spec, dataset, pushdown=pushdown).rows
        assert canonical(rows) == canonical(evaluate(spec, SENSORS))
    assert sum(row["n"] for row in rows) == 12 * len(SENSORS)
    for row in rows:
        assert row["lo"] <= row["hi"]


def test_unnest_over_object_or_array(dataset_factory):
    dataset = loaded(dataset_factory, PUBLICATIONS, 2)
    spec = q(
        unnest={"path": "authors[*].affiliation", "as": "aff"},
        group_by={"keys": [{"ref": "$aff", "as": "aff"}], "aggregates": [{"fn": "COUNT", "as": "n"}]},
    )
    rows = run_query(spec, dataset).rows
    assert canonical(rows) == canonical(evaluate(spec, PUBLICATIONS))
    multi = sum(len(p["authors"]) for p in PUBLICATIONS if isinstance(p["authors"], list))
    assert sum(row["n"] for row in rows) == multi


def test_partitions_with_different_schemas(dataset_factory):
    # field ids differ between partitions, so values crossing the exchange must be
    # decoded with the schema of the partition and component that stored them
    docs = []
    for i in range(80):
        if i % 2:
            docs.append({"id": i, "extra": {"flag": True}, "score": i, "team": f"t{i % 4}"})
        else:
            docs.append({"id": i, "team": f"t{i % 4}", "tags": ["a"], "score": i * 10})
    dataset = loaded(dataset_factory, docs[:40], 2)
    for doc in docs[40:]:
        dataset.insert(doc)
    dataset.flush()
    spec = q(group_by={
        "keys": [{"ref": "team", "as": "team"}],
        "aggregates": [{"fn": "MAX", "ref": "score", "as": "best"}, {"fn": "SUM", "ref": "score", "as": "total"},
                       {"fn": "COUNT", "ref": "extra.flag", "as": "flagged"}],
    })
    for pushdown in (True, False):
        result = run_query(spec, dataset, pushdown=pushdown)
        assert result.stats.broadcasts == 2
        assert canonical(result.rows) == canonical(evaluate(spec, docs))


def test_missing_group_key_is_omitted(dataset_factory):
    docs = [{"id": 1, "k": "a"}, {"id": 2}, {"id": 3, "k": "a"}]
    dataset = loaded(dataset_factory, docs, 2)
    spec = q(group_by={"keys": [{"ref": "k", "as": "k"}], "aggregates": [{"fn": "COUNT", "as": "n"}]})
    assert canonical(run_query(spec, dataset).rows) == canonical([{"k": "a", "n": 2}, {"n": 1}])


UNION_AGES = [
    {"id": 0, "age": 26, "team": "a"},
    {"id": 1, "age": 27, "team": "a"},
    {"id": 2, "team": "a"},
    {"id": 3, "age": "old", "team": "a"},
]


@pytest.mark.parametrize("partitions", [1, 2, 4, 8])
@pytest.mark.parametrize("keys", [[], [{"ref": "team", "as": "team"}]])
def test_min_max_over_union_field_ignores_partitioning(dataset_factory, partitions, keys):
    dataset = loaded(dataset_factory, UNION_AGES, partitions)
    spec = q(group_by={"keys": keys, "aggregates": [
        {"fn": "MIN", "ref": "age", "as": "lo"},
        {"fn": "MAX", "ref": "age", "as": "hi"},
    ]})
    rows = run_query(spec, dataset).rows
    assert [{k: v for k, v in row.items() if k != "team"} for row in rows] == [{"lo": 26, "hi": "old"}]
    assert canonical(rows) == canonical(evaluate(spec, UNION_AGES))


def test_aggregates_over_empty_input(dataset_factory):
    dataset = loaded(dataset_factory, TWEETS[:10], 2)
    spec = q(
        where=[{"ref": "retweet_count", "op": "<", "value": -1}],
        group_by={"aggregates": [
            {"fn": "COUNT", "as": "n"},
            {"fn": "SUM", "ref": "retweet_count", "as": "s"},
            {"fn": "MIN", "ref": "id", "as": "lo"},
        ]},
    )
    assert run_query(spec, dataset).rows == [{"n": 0, "s": None, "lo": None}]


def test_small_exchange_queues(dataset_factory):
    dataset = loaded(dataset_factory, TWEETS, 4)
    spec = q(**TWEET_QUERIES["by_lang"])
    result = execute(plan(spec, dataset), dataset, queue_size=1)
    assert canonical(result.rows) == canonical(evaluate(spec, TWEETS))


# ---------------------------------------------------------------------------
# planning errors
# ---------------------------------------------------------------------------


def test_sum_over_strings_rejected(dataset_factory):
    dataset = loaded(dataset_factory, TWEETS, 2)
    spec = q(group_by={"aggregates": [{"fn": "SUM", "ref": "lang", "as": "s"}]})
    with pytest.raises(PlanError, match="string"):
        run_query(spec, dataset)


def test_unknown_variable_rejected(dataset_factory):
    dataset = loaded(dataset_factory, TWEETS[:5])
    with pytest.raises(PlanError):
        plan(q(select=[{"ref": "$x", "as": "x"}]), dataset)
    spec = q(unnest={"path": "entities.hashtags[*]", "as": "h"}, select=[{"ref": "$other", "as": "x"}])
    with pytest.raises(PlanError):
        plan(spec, dataset)


@pytest.mark.parametrize("path", ["entities.hashtags", "a[*].b[*]", "[*].x"])
def test_bad_unnest_path(dataset_factory, path):
    dataset = loaded(dataset_factory, TWEETS[:5])
    with pytest.raises(PlanError):
        plan(q(unnest={"path": path, "as": "v"}, select=[{"ref": "$v", "as": "v"}]), dataset)


def test_query_names_other_dataset(dataset_factory):
    dataset = loaded(dataset_factory, TWEETS[:5])
    with pytest.raises(PlanError):
        plan(QuerySpec.model_validate(dict(dataset="other", **COUNT_ALL)), dataset)


@pytest.mark.parametrize("fields", [
    dict(),
    dict(select=[{"ref": "id", "as": "id"}], **COUNT_ALL),
    dict(group_by={"aggregates": [{"fn": "SUM", "as": "s"}]}),
    dict(select=[{"ref": "id", "as": "id"}], limit=-1),
])
def test_malformed_query_documents(fields):
    with pytest.raises(ValidationError):
        q(**fields)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def test_registry_lookup():
    registry = SchemaRegistry()
    schema = SchemaStore()
    cid = ComponentId(1, 1)
    with pytest.raises(SchemaRegistryError):
        registry.lookup(0, cid)
    registry.register(0, {cid: schema})
    assert registry.lookup(0, cid) is schema
    assert registry.lookup(0, None) is None
    with pytest.raises(SchemaRegistryError):
        registry.lookup(0, ComponentId(2, 2))
    assert registry.broadcasts == 1


@pytest.mark.parametrize("op, left, right, expected", [
    ("=", 1, 1, True),
    ("!=", "a", "b", True),
    ("<", 1, 2.5, True),
    (">=", 3, 3, True),
    ("<", None, 1, False),
    (">", 1, None, False),
    ("<", "a", 1, False),
    ("=", MISSING, None, False),
    ("!=", MISSING, 1, False),
    ("exists", MISSING, None, False),
    ("exists", None, None, True),
])
def test_compare(op, left, right, expected):
    assert _compare(op, left, right) is expected


def test_accumulators_combine():
    left, right = _Accumulator("AVG"), _Accumulator("AVG")
    for value in (1, 2, "x", True, None):
        left.add(value, counts_rows=False)
    right.add(6, counts_rows=False)
    left.combine(right)
    assert left.result() == 3

    lo = _Accumulator("MIN")
    lo.add(MISSING, counts_rows=False)
    assert lo.result() is None
    lo.add(4, counts_rows=False)
    other = _Accumulator("MIN")
    other.add(2, counts_rows=False)
    lo.combine(other)
    assert lo.result() == 2

    values = [26, "old", 1.0, True, 1, {"a": 1}]
    for fn, expected in (("MIN", True), ("MAX", {"a": 1})):
        forward, backward = _Accumulator(fn), _Accumulator(fn)
        for value in values:
            forward.add(value, counts_rows=False)
        for value in reversed(values):
            backward.add(value, counts_rows=False)
        assert forward.result() == backward.result() == expected
    ints_first, floats_first = _Accumulator("MIN"), _Accumulator("MIN")
    ints_first.add(1, counts_rows=False)
    ints_first.add(1.0, counts_rows=False)
    floats_first.add(1.0, counts_rows=False)
    floats_first.add(1, counts_rows=False)
    assert type(ints_first.result()) is type(floats_first.result()) is float

    count = _Accumulator("COUNT")
    for value in (1, None, MISSING, "x"):
        count.add(value, counts_rows=False)
    assert count.result() == 2
