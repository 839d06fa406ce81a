import numpy as np
import pytest

from dlisc.cache import META_KEY_ID, CachePool
from dlisc.extract import ExtractionError, ExtractionMode, extract, format_records, parse_structured_output
from dlisc.generation import ScriptedGenerator
from dlisc.identify import DEFAULT_EXTRACT_PROMPT, MatchedSchemaSet, Query
from dlisc.schemas import SlotLayout, crossner_ai_library
from dlisc.tokenizer import tokenize

V, L, C = ExtractionMode.VANILLA, ExtractionMode.LAYOUT_NOCACHE, ExtractionMode.CACHED


@pytest.fixture(scope="module")
def registry():
    return crossner_ai_library()


def run(model, registry, ids, text, mode, layout=None, pool=None, backend=None, qid="q", max_new=6):
    q = Query(qid, text)
    return extract(model, DEFAULT_EXTRACT_PROMPT, MatchedSchemaSet(ids, "MODEL"), q, registry,
                   layout, pool, mode, backend, max_new)


# -- parsing ------------------------------------------------------------------

def test_parse_single_triple():
    assert parse_structured_output("person | name | Ada") == ([("person", "name", "Ada")], True)


def test_parse_empty_output():
    assert parse_structured_output("") == ([], True)
    assert parse_structured_output("\n  \n") == ([], True)


def test_parse_garbage_fails_whole_output():
    assert parse_structured_output("garbage line") == ([], False)
    assert parse_structured_output("a | b | c\nbad") == ([], False)


def test_parse_value_may_contain_separator():
    assert parse_structured_output(" a|b |x | y \n") == ([("a", "b", "x | y")], True)


def test_format_then_parse_round_trip():
    recs = [("person", "name", "Ada"), ("org", "name", "ACME Corp")]
    assert parse_structured_output(format_records(recs)) == (recs, True)


# -- extraction modes ---------------------------------------------------------

def test_second_cached_call_computes_only_the_query(tiny_models, registry):
    m_e = tiny_models[1]
    layout, pool = SlotLayout(), CachePool()
    ids = ("person", "algorithm")
    text = b"Ada Lovelace wrote the first algorithm."
    first = run(m_e, registry, ids, text, C, layout, pool)
    assert first.stats.cache_hits == 0 and first.stats.cache_misses == 3
    second = run(m_e, registry, ids, text, C, layout, pool)
    assert second.stats.computed_tokens == len(tokenize(text))
    assert second.stats.cache_hits == len(ids) + 1 and second.stats.cache_misses == 0
    assert second.tokens == first.tokens
    assert np.array_equal(second.final_logits, first.final_logits)


def test_cached_matches_layout_nocache(tiny_models, registry):
    m_e = tiny_models[1]
    lay_l, lay_c, pool = SlotLayout(), SlotLayout(), CachePool()
    texts = [b"GPT-3 was trained by OpenAI.", b"Yann LeCun spoke at NeurIPS in Canada.", b"Python and C++"]
    sets = [("product", "organisation"), ("researcher", "conference", "country"), ("programlang",)]
    for _ in range(2):
        for t, s in zip(texts, sets):
            a = run(m_e, registry, s, t, L, lay_l)
            b = run(m_e, registry, s, t, C, lay_c, pool)
            assert a.tokens == b.tokens
            assert np.max(np.abs(a.final_logits - b.final_logits)) <= 1e-5
    assert pool.hits > 0


def test_vanilla_never_touches_pool(tiny_models, registry):
    pool = CachePool()
    r = run(tiny_models[1], registry, ("person",), b"Ada", V, SlotLayout(), pool)
    assert pool.lookups == 0 and len(pool) == 0
    assert r.stats.cache_hits == r.stats.cache_misses == 0
    assert r.stats.computed_tokens == r.stats.prompt_tokens


def test_empty_matched_set_uses_meta_and_query_only(tiny_models, registry):
    for mode in (V, L, C):
        r = run(tiny_models[1], registry, (), b"Nothing here.", mode, SlotLayout(), CachePool())
        assert r.stats.computed_schema_tokens == 0
        meta = 64 if mode is not V else len(tokenize(DEFAULT_EXTRACT_PROMPT.text))
        assert r.stats.prompt_tokens == meta + len(b"Nothing here.")
        assert r.records == []


def test_meta_entry_cached_once(tiny_models, registry):
    layout, pool = SlotLayout(), CachePool()
    for ids in (("person",), ("task",), ("person", "task")):
        run(tiny_models[1], registry, ids, b"q", C, layout, pool)
    assert pool.miss_counts[META_KEY_ID] == 1
    assert pool.miss_counts["person"] == 1 and pool.miss_counts["task"] == 1


def test_scripted_records_filtered_to_matched_set(tiny_models, registry):
    out = format_records([("person", "mention", "Ada"), ("country", "mention", "UK")])
    gen = ScriptedGenerator({"q": tokenize(out)})
    r = run(tiny_models[1], registry, ("person",), b"Ada from the UK", C, SlotLayout(), CachePool(), gen)
    assert r.parse_ok and r.records == [("person", "mention", "Ada")]
    assert r.stats.dropped_records == 1


def test_unparseable_output_gives_no_records(tiny_models, registry):
    gen = ScriptedGenerator({"q": tokenize("not a record")})
    r = run(tiny_models[1], registry, ("person",), b"x", L, SlotLayout(), None, gen)
    assert not r.parse_ok and r.records == []


def test_miss_is_inserted_even_when_parse_fails(tiny_models, registry):
    gen = ScriptedGenerator({"q": tokenize("garbage")})
    pool = CachePool()
    r = run(tiny_models[1], registry, ("person",), b"x", C, SlotLayout(), pool, gen)
    assert not r.parse_ok and len(pool) == 2


def test_role_and_argument_checks(tiny_models, registry):
    with pytest.raises(ExtractionError, match="EXTRACT"):
        run(tiny_models[0], registry, ("person",), b"x", V)
    with pytest.raises(ExtractionError, match="layout"):
        run(tiny_models[1], registry, ("person",), b"x", L)
    with pytest.raises(ExtractionError, match="pool"):
        run(tiny_models[1], registry, ("person",), b"x", C, SlotLayout())


def test_slot_exhaustion_is_reported(tiny_models, registry):
    layout = SlotLayout(capacity=200, meta_width=64)
    with pytest.raises(ExtractionError, match="capacity"):
        run(tiny_models[1], registry, ("person", "task"), b"x", L, layout)


def test_stale_adapter_never_hits(tiny_base, tiny_models, registry):
    from dlisc.lora import Role, merge_adapter, random_adapter

    layout, pool = SlotLayout(), CachePool()
    run(tiny_models[1], registry, ("person",), b"x", C, layout, pool)
    other = merge_adapter(tiny_base, random_adapter(tiny_base.config, "e2", 99), Role.EXTRACT)
    r = run(other, registry, ("person",), b"x", C, layout, pool)
    assert r.stats.cache_hits == 0 and r.stats.cache_misses == 2
