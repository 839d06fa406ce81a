import json
import subprocess
import sys

import pytest

from dlisc.cache import CachePool
from dlisc.cli import main
from dlisc.identify import Query, save_queries
from dlisc.config import RunConfig
from dlisc.runtime import build_models

FAST = ["--max-new-extract", "4", "--max-new-identify", "4"]


@pytest.fixture
def one_query(tmp_path):
    path = tmp_path / "q.jsonl"
    save_queries([Query("only", b"Ada Lovelace studied algorithms.", frozenset({"person"}),
                        (("person", "mention", "Ada Lovelace"),))], path)
    return path


def test_pipeline_smoke_bm25_vanilla(tmp_path, one_query, capsys):
    out = tmp_path / "out"
    rc = main(["pipeline", "--dataset", str(one_query), "--identification", "BM25", "--modes", "VANILLA",
               "--output-dir", str(out), *FAST])
    assert rc == 0
    lines = (out / "results.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["query_id"] == "only"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_queries"] == 1 and list(summary["modes"]) == ["VANILLA"]
    assert "VANILLA" in capsys.readouterr().out


def test_unknown_flag_is_usage_error(capsys):
    assert main_exit(["pipeline", "--no-such-flag"]) != 0
    assert "unrecognized arguments" in capsys.readouterr().err


def main_exit(argv):
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


def test_pipeline_outputs_are_deterministic(tmp_path):
    args = ["pipeline", "--n-queries", "5", "--extract-backend", "scripted", "--modes",
            "VANILLA,LAYOUT_NOCACHE,CACHED", *FAST]
    out = tmp_path / "a"
    assert main([*args, "--output-dir", str(out)]) == 0
    first = {n: (out / n).read_bytes() for n in ("results.jsonl", "summary.json")}
    assert main([*args, "--output-dir", str(out)]) == 0
    for name, data in first.items():
        assert (out / name).read_bytes() == data
    summary = json.loads(first["summary.json"])
    assert all(m["f1"] == 1.0 for m in summary["modes"].values())


def test_bench_zero_queries_is_validation_error(tmp_path, capsys):
    assert main(["bench", "--n-queries", "0", "--output-dir", str(tmp_path)]) == 1
    assert "n_queries" in capsys.readouterr().err
    assert not (tmp_path / "report.json").exists()


def test_missing_files_all_listed(tmp_path, capsys):
    rc = main(["bench", "--weights", "nope.dlisc", "--dataset", "nope.jsonl", "--output-dir", str(tmp_path)])
    err = capsys.readouterr().err
    assert rc == 1 and "weights" in err and "dataset" in err


def test_bench_single_mode(tmp_path):
    assert main(["bench", "--n-queries", "3", "--modes", "CACHED", "--output-dir", str(tmp_path), *FAST]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert list(report["modes"]) == ["CACHED"]
    assert (tmp_path / "report.txt").exists()


def test_stage_commands(tmp_path, one_query):
    out = tmp_path / "o"
    base = ["--dataset", str(one_query), "--output-dir", str(out), *FAST]
    assert main(["identify", "--identification", "BM25", "--k", "2", *base]) == 0
    ident = json.loads((out / "identify.jsonl").read_text())
    assert len(ident["ids"]) == 2 and ident["provenance"] == "BM25"
    assert main(["extract", "--matched", str(out / "identify.jsonl"), "--modes", "CACHED", *base]) == 0
    rec = json.loads((out / "extract.jsonl").read_text())
    assert rec["mode"] == "CACHED" and rec["stats"]["cache_misses"] == 3


def test_schemas_build(tmp_path):
    labels = tmp_path / "labels.txt"
    labels.write_text("person\norganisation\n\n")
    assert main(["schemas-build", "--entity-list", str(labels), "--output-dir", str(tmp_path / "s")]) == 0
    recs = [json.loads(x) for x in (tmp_path / "s" / "schemas.jsonl").read_text().splitlines()]
    assert [r["schema_id"] for r in recs] == ["organisation", "person"]
    assert "slot organisation" in (tmp_path / "s" / "layout.txt").read_text()
    assert main(["schemas-build", "--output-dir", str(tmp_path)]) == 1


def test_init_model_files_feed_a_run(tmp_path):
    m = tmp_path / "m"
    assert main(["init-model", "--output-dir", str(m)]) == 0
    cfg = {"weights": "m/weights.dlisc", "adapter_identify": "m/adapter_identify.dlisc",
           "adapter_extract": "m/adapter_extract.dlisc", "n_queries": 2, "output_dir": "run",
           "max_new_extract": 2}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["bench", "--config", str(tmp_path / "c.json")]) == 0
    assert (tmp_path / "run" / "report.json").exists()


# -- cache-stats ----------------------------------------------------------------

def _pool_file(tmp_path, n_queries):
    out = tmp_path / "p"
    pool_path = out / "pool.dlisc"
    if n_queries == 0:
        out.mkdir()
        _, _, m_e = build_models(RunConfig())
        CachePool().save(pool_path, m_e.fingerprint, m_e.adapter_fingerprint)
        return pool_path
    args = ["pipeline", "--n-queries", str(n_queries), "--schema-pool-size", "1", "--modes", "CACHED",
            "--save-pool", "--output-dir", str(out), *FAST]
    assert main(args) == 0
    return pool_path


def test_cache_stats_empty_pool(tmp_path, capsys):
    path = _pool_file(tmp_path, 0)
    capsys.readouterr()
    assert main(["cache-stats", "--pool", str(path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("hits=0 misses=0 lookups=0") and len(lines) == 1


def test_cache_stats_two_entries(tmp_path, capsys):
    path = _pool_file(tmp_path, 2)
    capsys.readouterr()
    assert main(["cache-stats", "--pool", str(path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    entries = [ln for ln in lines if ln.startswith("entry ")]
    assert len(entries) == 2
    used = [int(ln.split("last_used=")[1].split()[0]) for ln in entries]
    assert used == sorted(used)


def test_cache_stats_refuses_stale_adapter(tmp_path, capsys):
    path = _pool_file(tmp_path, 2)
    capsys.readouterr()
    assert main(["cache-stats", "--pool", str(path), "--init-seed", "43"]) == 1
    assert "fingerprint" in capsys.readouterr().err
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"adapter_seed_extract": 5}))
    assert main(["cache-stats", "--pool", str(path), "--config", str(cfg)]) == 1
    assert "fingerprint" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dlisc", "bench", "--n-queries", "0", "--output-dir",
                           str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 1 and "n_queries" in proc.stderr


def test_invariant_violation_exits_3(tmp_path, monkeypatch, capsys):
    import dlisc.cli as cli

    real = cli.run_stream

    def broken(rt):
        run = real(rt)
        run.report.violations.append("CACHED: hits + misses != lookups")
        return run

    monkeypatch.setattr(cli, "run_stream", broken)
    assert main(["bench", "--n-queries", "1", "--output-dir", str(tmp_path), *FAST]) == 3
    assert "invariant violation" in capsys.readouterr().err
    assert (tmp_path / "report.json").exists()
