import json

import pytest

from dlisc.bench import BenchError, run_benchmark, run_stream
from dlisc.config import RunConfig
from dlisc.runtime import build_runtime

SMALL = dict(n_queries=4, schema_pool_size=4, max_new_extract=4, max_new_identify=4)


def test_single_query_single_schema_is_all_cold():
    rep = run_benchmark(RunConfig(n_queries=1, schema_pool_size=1, modes=["CACHED"], max_new_extract=4))
    assert rep.modes["CACHED"].hit_rate == 0.0
    assert rep.modes["CACHED"].pool["misses"] == 2


def test_non_timing_fields_are_reproducible():
    cfg = RunConfig(modes=["VANILLA", "LAYOUT_NOCACHE", "CACHED"], **SMALL)
    a = run_benchmark(cfg).to_dict(timings=False)
    b = run_benchmark(cfg).to_dict(timings=False)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert "latency_mean_s" not in a["modes"]["CACHED"]


def test_rates_bounded_and_no_violations():
    rep = run_benchmark(RunConfig(modes=["VANILLA", "LAYOUT_NOCACHE", "CACHED"], **SMALL))
    assert rep.violations == []
    for m in rep.modes.values():
        for v in (m.precision, m.recall, m.f1, m.parse_ok_rate, m.hit_rate):
            assert 0.0 <= v <= 1.0
    assert 0.0 <= rep.divergence_rate <= 1.0


def test_repeated_schema_missed_once():
    rep = run_benchmark(RunConfig(n_queries=6, schema_pool_size=1, modes=["CACHED"], max_new_extract=2))
    (sid,) = rep.segment_lengths
    assert rep.modes["CACHED"].miss_counts[sid] == 1
    assert rep.modes["CACHED"].computed_schema_tokens == rep.segment_lengths[sid]


def test_bm25_identification_source():
    rep = run_benchmark(RunConfig(identification="BM25", k=2, modes=["CACHED"], **SMALL))
    assert rep.identification["source"] == "BM25"


def test_report_files_and_table(tmp_path):
    rep = run_benchmark(RunConfig(**SMALL))
    js, txt = rep.write(tmp_path)
    data = json.loads(js.read_text())
    assert set(data["modes"]) == {"VANILLA", "CACHED"}
    table = txt.read_text()
    assert "median_s" in table and "CACHED/VANILLA mean latency ratio" in table


def test_failure_names_query_and_stage():
    rt = build_runtime(RunConfig(modes=["LAYOUT_NOCACHE"], slot_capacity=200, **SMALL))
    with pytest.raises(BenchError, match=r"q0000.*extract\[LAYOUT_NOCACHE\]"):
        run_stream(rt)
