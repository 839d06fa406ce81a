import json

import pytest
from hypothesis import given, settings, strategies as st

from dlisc.cache import CacheKey, CachePool
from dlisc.model import Segment, Visibility, prefill
from dlisc.schemas import (
    CROSSNER_AI_LABELS,
    Schema,
    SchemaError,
    SchemaKind,
    SchemaRegistry,
    SlotError,
    SlotLayout,
    canonical_order,
    crossner_ai_library,
    entity_list_to_records,
    finance_event_library,
    load_registry,
    render_schema,
)
from dlisc.tokenizer import tokenize


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def rec(sid, name=None, fields=()):
    return {"schema_id": sid, "kind": "ENTITY", "name": name or sid, "description": "d", "fields": list(fields)}


def test_load_three_schemas(tmp_path):
    p = tmp_path / "s.jsonl"
    write_jsonl(p, [rec("a"), rec("b"), rec("c", fields=[["x", "y"]])])
    reg = load_registry(p)
    assert len(reg) == 3 and reg.ids == ["a", "b", "c"]
    assert reg["c"].fields == (("x", "y"),)


def test_duplicate_id_named_in_error(tmp_path):
    p = tmp_path / "s.jsonl"
    write_jsonl(p, [rec("a"), rec("dup"), rec("dup")])
    with pytest.raises(SchemaError, match="dup"):
        load_registry(p)


def test_empty_and_unparseable_files(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text("\n")
    with pytest.raises(SchemaError, match="empty"):
        load_registry(p)
    p.write_text('{"schema_id": "a"\n')
    with pytest.raises(SchemaError):
        load_registry(p)


def test_entity_list_library_loads_as_entity(tmp_path):
    recs = entity_list_to_records(list(CROSSNER_AI_LABELS), CROSSNER_AI_LABELS)
    assert len(recs) == 14
    p = tmp_path / "ner.jsonl"
    write_jsonl(p, recs)
    reg = load_registry(p)
    assert len(reg) == 14 and all(s.kind is SchemaKind.ENTITY for s in reg)


@pytest.mark.parametrize(
    "bad", [dict(name=""), dict(fields=[["x", ""], ["x", ""]]), dict(kind="THING")]
)
def test_invalid_schema_rejected(bad):
    with pytest.raises(SchemaError):
        Schema.from_record({**rec("a"), **bad})


def test_render_without_fields_is_header_and_description():
    s = Schema("a", "EVENT", "merger", "Two firms combine.")
    assert render_schema(s) == "EVENT: merger (id: a)\ndescription: Two firms combine.\n"


def test_render_is_deterministic_and_versioned():
    s = Schema("a", "ENTITY", "person", "p", (("name", "n"),))
    assert render_schema(s) == render_schema(Schema.from_record(s.to_record()))
    assert render_schema(s).endswith("- name: n\n")
    with pytest.raises(SchemaError):
        render_schema(s, "v9")


@given(
    st.lists(st.text(alphabet="abcxyz", min_size=1, max_size=4), max_size=4, unique=True),
    st.lists(st.text(alphabet="abcxyz", min_size=1, max_size=4), max_size=4, unique=True),
)
def test_different_field_lists_render_differently(f1, f2):
    a = Schema("s", "ENTITY", "n", "d", tuple((f, "") for f in f1))
    b = Schema("s", "ENTITY", "n", "d", tuple((f, "") for f in f2))
    assert (render_schema(a) == render_schema(b)) == (f1 == f2)


def test_canonical_order(small_registry):
    assert canonical_order({"person", "award"}, small_registry) == ["award", "person"]
    assert canonical_order(["award"], small_registry) == ["award"]
    with pytest.raises(SchemaError, match="nope"):
        canonical_order({"nope"}, small_registry)


@given(st.permutations(["person", "award", "organization"]))
def test_canonical_order_ignores_input_order(perm):
    reg = SchemaRegistry([Schema(s, "ENTITY", s, "") for s in perm])
    assert canonical_order(perm, reg) == ["award", "organization", "person"]
    assert reg.ids == ["award", "organization", "person"]


def test_registry_stats_rebuilt_on_mutation(small_registry):
    n = small_registry.stats.n_docs
    small_registry.add(Schema("extra", "ENTITY", "extra", "brand new words"))
    assert small_registry.stats.n_docs == n + 1 and small_registry.stats.df["brand"] == 1
    small_registry.remove("extra")
    assert small_registry.stats.df["brand"] == 0
    with pytest.raises(SchemaError):
        small_registry.add(Schema("person", "ENTITY", "x", ""))


def test_registry_save_round_trip(tmp_path, small_registry):
    small_registry.save(tmp_path / "r.jsonl")
    back = load_registry(tmp_path / "r.jsonl")
    assert [back.rendered(i) for i in back.ids] == [small_registry.rendered(i) for i in small_registry.ids]


def test_builtin_libraries_fit_default_layout():
    for reg in (crossner_ai_library(), finance_event_library()):
        layout = SlotLayout()
        for sid in reg.ids:
            n = len(tokenize(reg.rendered(sid)))
            a, b = layout.allocate(sid, n)
            assert b - a == n
        assert max(b for _, b in layout.slots.values()) <= layout.query_base


# -- slot layout --------------------------------------------------------------

def test_first_fit_after_meta_slot():
    layout = SlotLayout(capacity=100, meta_width=20)
    assert layout.meta_slot == (0, 20)
    assert layout.allocate("s", 30) == (20, 50)
    assert layout.allocate("s", 30) == (20, 50)
    assert layout.allocate("t", 10) == (50, 60)
    assert layout.query_base == 100


def test_capacity_error_when_full():
    layout = SlotLayout(capacity=50, meta_width=20)
    layout.allocate("s", 30)
    with pytest.raises(SlotError, match="capacity"):
        layout.allocate("t", 1)


def test_length_change_for_existing_slot_rejected():
    layout = SlotLayout(capacity=100, meta_width=20)
    layout.allocate("s", 30)
    with pytest.raises(SlotError):
        layout.allocate("s", 31)


def _kv_for(base, start, n):
    state, _ = prefill(base, [Segment([1] * n, start, Visibility.SCHEMA)], require_query=False)
    return state.segments[0]


def test_free_refused_while_cached_then_recycled(tiny_base):
    layout = SlotLayout(capacity=60, meta_width=10)
    layout.allocate("a", 20)
    layout.allocate("b", 20)
    pool = CachePool()
    key = CacheKey("a", tiny_base.fingerprint, "", "v1", 10)
    pool.insert(key, _kv_for(tiny_base, 10, 20))
    with pytest.raises(SlotError, match="live cache entry"):
        layout.free("a", pool)
    pool = CachePool()
    layout.free("a", pool)
    assert layout.allocate("c", 15) == (10, 25)
    assert layout.slots["b"] == (30, 50)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcdefgh"), st.integers(1, 40), st.booleans()), max_size=40))
def test_slots_stay_disjoint_and_never_move(ops):
    layout = SlotLayout(capacity=200, meta_width=16)
    lengths = {}
    for sid, n, release in ops:
        before = dict(layout.slots)
        if release and sid in layout.slots:
            layout.free(sid, None)
            del lengths[sid]
        else:
            n = lengths.get(sid, n)
            try:
                layout.allocate(sid, n)
                lengths[sid] = n
            except SlotError:
                pass
        for k, v in before.items():
            if k in layout.slots:
                assert layout.slots[k] == v
        spans = sorted(layout.slots.values())
        assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
        assert all(a >= 16 and b <= 200 for a, b in spans)


def test_dump_lists_slots():
    layout = SlotLayout(capacity=100, meta_width=20)
    layout.allocate("s", 30)
    text = layout.dump()
    assert "meta=[0,20)" in text and "slot s [20,50) width=30" in text
