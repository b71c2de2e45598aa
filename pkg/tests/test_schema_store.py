import pytest
from hypothesis import given, settings as hyp_settings, strategies as st

from src.core.exceptions import SchemaCorruptError, SchemaError
from src.core.types import TypeTag
from src.services.schema_store import (
    NodeKind,
    SchemaStore,
    apply_anti_schema,
    deserialize_schema,
    extract_anti_schema,
    infer_schema,
    leaf_kinds,
    lookup_name,
    resolve_path,
    schema_summary,
    serialize_schema,
)
from src.services.vb_record import compact, encode
from src.utils.paths import parse_path

from tests.conftest import EMPLOYEE_DOC, ID_ONLY, json_docs
from tests.oracles import reinfer

FIRST_BATCH = [{"id": 0, "name": "Ann", "age": 26}, {"id": 1, "name": "Bob", "age": 27}]
SECOND_BATCH = [{"id": 2, "name": "Alex"}, {"id": 3, "name": "Bill", "age": "old"}]


def inferred(docs, schema=None):
    schema = schema if schema is not None else SchemaStore()
    for doc in docs:
        infer_schema(encode(doc, ID_ONLY), schema)
    return schema


def employees():
    return [EMPLOYEE_DOC] + [{"id": i, "name": f"e{i}"} for i in range(2, 7)]


def test_first_flush_schema():
    s = inferred(FIRST_BATCH)
    assert s.structure() == {
        "kind": "object",
        "count": 2,
        "fields": {
            "name": {"kind": "string", "count": 2},
            "age": {"kind": "int64", "count": 2},
        },
    }


def test_second_flush_turns_age_into_union():
    s = inferred(SECOND_BATCH, inferred(FIRST_BATCH))
    age = s.structure()["fields"]["age"]
    assert age == {
        "kind": "union",
        "count": 3,
        "branches": {
            "string": {"kind": "string", "count": 1},
            "int64": {"kind": "int64", "count": 2},
        },
    }
    assert s.structure()["fields"]["name"]["count"] == 4


def test_declared_primary_key_not_in_schema():
    s = inferred(FIRST_BATCH)
    assert lookup_name(s, "id") is None
    assert "id" not in s.structure()["fields"]


def test_counters_count_instances():
    s = inferred(employees())
    fields = s.structure()["fields"]
    assert fields["name"]["count"] == 6
    for name in ("dependents", "employment_date", "branch_location", "working_shifts"):
        assert fields[name]["count"] == 1
    item = fields["dependents"]["item"]
    assert item["count"] == 2
    assert item["fields"]["name"]["count"] == 2
    assert item["fields"]["age"]["count"] == 2
    shifts = fields["working_shifts"]["item"]
    assert shifts["kind"] == "union"
    assert shifts["branches"]["array"]["count"] == 3
    assert shifts["branches"]["array"]["item"]["count"] == 6
    assert shifts["branches"]["string"]["count"] == 1


def test_dictionary_ids_follow_first_appearance():
    s = inferred(employees())
    assert lookup_name(s, "name") == 0
    assert lookup_name(s, "dependents") == 1
    assert lookup_name(s, "missing") is None


def test_anti_schema_counts():
    s = inferred(employees())
    anti = extract_anti_schema(encode(EMPLOYEE_DOC, ID_ONLY), s)
    rendered = SchemaStore(anti, s.dictionary).structure()
    assert rendered["count"] == 1
    assert rendered["fields"]["name"]["count"] == 1
    assert rendered["fields"]["dependents"]["item"]["count"] == 2
    assert rendered["fields"]["dependents"]["item"]["fields"]["age"]["count"] == 2


def test_anti_schema_of_empty_record():
    s = inferred(employees())
    anti = extract_anti_schema(encode({}, ID_ONLY), s)
    assert anti.fields == {}
    assert anti.counter == 1


def test_delete_prunes_fields():
    s = inferred(employees())
    apply_anti_schema(extract_anti_schema(encode(EMPLOYEE_DOC, ID_ONLY), s), s)
    assert s.structure() == {
        "kind": "object",
        "count": 5,
        "fields": {"name": {"kind": "string", "count": 5}},
    }


def test_anti_schema_of_compacted_record():
    s = inferred(employees())
    small = compact(encode(EMPLOYEE_DOC, ID_ONLY), s)
    apply_anti_schema(extract_anti_schema(small, s), s)
    assert s.structure()["fields"] == {"name": {"kind": "string", "count": 5}}


def test_full_annihilation_keeps_root():
    s = inferred([FIRST_BATCH[0]])
    apply_anti_schema(extract_anti_schema(encode(FIRST_BATCH[0], ID_ONLY), s), s)
    assert s.structure() == {"kind": "object", "count": 0, "fields": {}}
    assert lookup_name(s, "age") is not None


def test_union_collapses_after_delete():
    s = inferred(SECOND_BATCH, inferred(FIRST_BATCH))
    apply_anti_schema(extract_anti_schema(encode(SECOND_BATCH[1], ID_ONLY), s), s)
    assert s.structure()["fields"]["age"] == {"kind": "int64", "count": 2}


def test_anti_schema_rejects_unknown_names():
    s = inferred(FIRST_BATCH)
    with pytest.raises(SchemaError):
        extract_anti_schema(encode({"id": 9, "zzz": 1}, ID_ONLY), s)


def test_over_subtraction_rejected():
    s = inferred(FIRST_BATCH)
    anti = extract_anti_schema(encode(FIRST_BATCH[0], ID_ONLY), s)
    apply_anti_schema(anti, s)
    apply_anti_schema(anti, s)
    with pytest.raises(SchemaError):
        apply_anti_schema(anti, s)


def check_incremental_schema(docs, data):
    s = SchemaStore()
    live = {}
    for i, doc in enumerate(docs):
        op = data.draw(st.sampled_from(["insert", "upsert", "delete"])) if live else "insert"
        if op == "delete":
            victim = data.draw(st.sampled_from(sorted(live)))
            apply_anti_schema(extract_anti_schema(encode(live.pop(victim), ID_ONLY), s), s)
            continue
        key = data.draw(st.sampled_from(sorted(live))) if op == "upsert" else i
        if key in live:
            apply_anti_schema(extract_anti_schema(encode(live[key], ID_ONLY), s), s)
        live[key] = dict(doc, id=key)
        infer_schema(encode(live[key], ID_ONLY), s)
    assert s.structure() == reinfer(live.values(), ID_ONLY)


@hyp_settings(max_examples=60, deadline=None)
@given(st.lists(json_docs, min_size=1, max_size=12), st.data())
def test_incremental_schema_matches_reinference(docs, data):
    check_incremental_schema(docs, data)


@pytest.mark.slow
@hyp_settings(max_examples=1000, deadline=None)
@given(st.lists(json_docs, min_size=1, max_size=80), st.data())
def test_incremental_schema_matches_reinference_at_scale(docs, data):
    check_incremental_schema(docs, data)


@hyp_settings(max_examples=100, deadline=None)
@given(json_docs)
def test_infer_then_retract_restores_prior_state(doc):
    s = inferred(FIRST_BATCH)
    before = s.structure()
    rec = encode(doc, ID_ONLY)
    infer_schema(rec, s)
    apply_anti_schema(extract_anti_schema(rec, s), s)
    assert s.structure() == before


def test_resolve_path_through_union():
    s = inferred(SECOND_BATCH, inferred(FIRST_BATCH))
    [age] = resolve_path(s, parse_path("age"))
    assert age.kind == NodeKind.UNION
    assert sorted(leaf_kinds([age])) == [TypeTag.STRING, TypeTag.INT64]
    assert resolve_path(s, parse_path("nope")) == []


def test_resolve_path_into_arrays():
    s = inferred(employees())
    nodes = resolve_path(s, parse_path("dependents[*].age"))
    assert leaf_kinds(nodes) == [TypeTag.INT64]
    assert leaf_kinds(resolve_path(s, parse_path("working_shifts[0][1]"))) == [TypeTag.INT64]


def test_serialize_roundtrip():
    s = inferred(SECOND_BATCH, inferred(FIRST_BATCH))
    back = deserialize_schema(serialize_schema(s))
    assert back == s
    assert back.structure()["fields"]["age"]["kind"] == "union"


def test_serialize_empty_store():
    s = SchemaStore()
    assert deserialize_schema(serialize_schema(s)) == s


def test_dictionary_bindings_survive_reload():
    s = inferred(employees())
    back = deserialize_schema(serialize_schema(s))
    inferred([{"id": 99, "fresh": 1}], back)
    for name in s.dictionary.names:
        assert lookup_name(back, name) == lookup_name(s, name)
    assert lookup_name(back, "fresh") == len(s.dictionary)


@hyp_settings(max_examples=100, deadline=None)
@given(st.lists(json_docs, max_size=6))
def test_serialize_random_stores(docs):
    s = inferred(docs)
    assert deserialize_schema(serialize_schema(s)) == s


@pytest.mark.parametrize("blob", [b"", b"XXXX" + b"\x00" * 20])
def test_corrupt_blob_rejected(blob):
    with pytest.raises(SchemaCorruptError):
        deserialize_schema(blob)


def test_truncated_blob_rejected():
    blob = serialize_schema(inferred(employees()))
    with pytest.raises(SchemaCorruptError):
        deserialize_schema(blob[:-3])


def test_summary():
    summary = schema_summary(inferred(FIRST_BATCH))
    assert summary.node_count == 3
    assert summary.dictionary_entries == 2
    assert summary.dictionary_bytes > 0
