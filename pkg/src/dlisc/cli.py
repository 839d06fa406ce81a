"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 invariant
violation. Every file a subcommand writes goes under ``--output-dir``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import container
from .bench import run_stream
from .cache import CachePool, FingerprintMismatch
from .config import ConfigError, RunConfig, load_config
from .extract import ExtractionMode, extract
from .identify import MatchedSchemaSet, Provenance
from .lora import AdapterError, Role, random_adapter
from .model import ModelConfig, ModelWeights
from .runtime import build_models, build_runtime
from .schemas import (
    BUILTIN_LIBRARIES,
    Schema,
    SchemaError,
    SchemaRegistry,
    SlotError,
    SlotLayout,
    entity_list_to_records,
    load_registry,
)
from .tokenizer import tokenize

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_INVARIANT = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


class InvariantViolation(RuntimeError):
    pass


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags below override it")
    p.add_argument("--output-dir")
    p.add_argument("--weights")
    p.add_argument("--adapter-identify")
    p.add_argument("--adapter-extract")
    p.add_argument("--registry", help="schema file or builtin:NAME")
    p.add_argument("--meta-identify")
    p.add_argument("--meta-extract")
    p.add_argument("--dataset", help="line-delimited query records")
    p.add_argument("--n-queries", type=int)
    p.add_argument("--schema-pool-size", type=int)
    p.add_argument("--skew", type=float)
    p.add_argument("--workload-seed", type=int)
    p.add_argument("--init-seed", type=int)
    p.add_argument("--identification", choices=["MODEL", "BM25"])
    p.add_argument("--identify-backend", choices=["greedy", "scripted"])
    p.add_argument("--extract-backend", choices=["greedy", "scripted"])
    p.add_argument("--modes", help="comma-separated extraction modes")
    p.add_argument("--k", type=int)
    p.add_argument("--cache-capacity-bytes", type=int)
    p.add_argument("--max-new-identify", type=int)
    p.add_argument("--max-new-extract", type=int)
    p.add_argument("--save-pool", action="store_true", default=None)


_RUN_KEYS = (
    "output_dir weights adapter_identify adapter_extract registry meta_identify meta_extract dataset "
    "n_queries schema_pool_size skew workload_seed init_seed identification identify_backend "
    "extract_backend modes k cache_capacity_bytes max_new_identify max_new_extract save_pool"
).split()


def _config(args, *, need_output: bool = True) -> RunConfig:
    overrides = {k: getattr(args, k) for k in _RUN_KEYS}
    if overrides["modes"] is not None:
        overrides["modes"] = [m.strip() for m in overrides["modes"].split(",") if m.strip()]
    return load_config(args.config, overrides).validate(need_output=need_output)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n")


# -- subcommands --------------------------------------------------------------

def cmd_init_model(args) -> int:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = ModelWeights.initialize(ModelConfig(init_seed=args.init_seed))
    base.save(out / "weights.dlisc")
    for role, seed in ((Role.IDENTIFY, args.adapter_seed_identify), (Role.EXTRACT, args.adapter_seed_extract)):
        name = role.value.lower()
        ad = random_adapter(base.config, name, seed, args.rank, args.alpha, role=role)
        ad.save(out / f"adapter_{name}.dlisc")
    print(f"wrote weights and adapters to {out} (base fingerprint {base.fingerprint[:12]})")
    return EXIT_OK


def cmd_schemas_build(args) -> int:
    sources = [x for x in (args.library, args.entity_list, args.input) if x]
    if len(sources) != 1:
        raise ConfigError(["give exactly one of --library, --entity-list, --input"])
    if args.library:
        if args.library not in BUILTIN_LIBRARIES:
            raise ConfigError([f"unknown library {args.library!r} (have {sorted(BUILTIN_LIBRARIES)})"])
        reg = BUILTIN_LIBRARIES[args.library]()
    elif args.entity_list:
        labels = Path(args.entity_list).read_text(encoding="utf-8").splitlines()
        recs = entity_list_to_records(labels, prefix=args.prefix)
        if not recs:
            raise ConfigError([f"{args.entity_list}: no labels"])
        reg = SchemaRegistry(Schema.from_record(r) for r in recs)
    else:
        reg = load_registry(args.input)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    reg.save(out / "schemas.jsonl")
    layout = SlotLayout(args.slot_capacity, args.meta_width, reg.template_version)
    unplaced = []
    for sid in reg.ids:
        try:
            layout.allocate(sid, len(tokenize(reg.rendered(sid))))
        except SlotError:
            unplaced.append(sid)
    text = layout.dump()
    if unplaced:
        text += f"unplaced {' '.join(unplaced)}\n"
    (out / "layout.txt").write_text(text)
    print(f"wrote {len(reg)} schemas to {out / 'schemas.jsonl'}")
    return EXIT_OK


def cmd_identify(args) -> int:
    cfg = _config(args)
    rt = build_runtime(cfg)
    rows = []
    for q in rt.queries:
        matched, _ = rt.identify(q)
        rows.append(
            {"query_id": q.query_id, "ids": list(matched.ids), "provenance": matched.provenance.value,
             "dropped": matched.dropped}
        )
    _write_jsonl(_out(cfg) / "identify.jsonl", rows)
    print(f"identified {len(rows)} queries")
    return EXIT_OK


def _load_matched(path) -> dict[str, MatchedSchemaSet]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["query_id"]] = MatchedSchemaSet(tuple(rec["ids"]), rec.get("provenance", "MODEL"),
                                                        rec.get("dropped", 0))
    return out


def cmd_extract(args) -> int:
    cfg = _config(args)
    rt = build_runtime(cfg)
    if args.matched:
        matched = _load_matched(args.matched)
    else:
        missing = [q.query_id for q in rt.queries if q.gold_ids is None]
        if missing:
            raise ConfigError([f"queries without gold ids need --matched: {missing[:5]}"])
        matched = {q.query_id: MatchedSchemaSet(tuple(q.gold_ids), Provenance.MODEL) for q in rt.queries}
    rows = []
    for mode in cfg.modes:
        mode = ExtractionMode(mode)
        layout = rt.new_layout() if mode is not ExtractionMode.VANILLA else None
        pool = rt.new_pool() if mode is ExtractionMode.CACHED else None
        for q in rt.queries:
            if q.query_id not in matched:
                raise ConfigError([f"no matched schemas for query {q.query_id!r}"])
            res = extract(rt.model_e, rt.m_e, matched[q.query_id], q, rt.registry, layout, pool, mode,
                          rt.extract_backend, cfg.max_new_extract)
            rows.append(res.to_record())
        if pool is not None and cfg.save_pool:
            pool.save(_out(cfg) / "pool.dlisc", rt.model_e.fingerprint, rt.model_e.adapter_fingerprint)
    _write_jsonl(_out(cfg) / "extract.jsonl", rows)
    print(f"extracted {len(rows)} results")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    rt = build_runtime(cfg)
    run = run_stream(rt)
    out = _out(cfg)
    rows = []
    for i, q in enumerate(rt.queries):
        for mode, results in run.results.items():
            rec = results[i].to_record()
            rec["matched"] = list(run.matched[i].ids)
            rows.append(rec)
    _write_jsonl(out / "results.jsonl", rows)
    summary = run.report.to_dict(timings=False)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if cfg.save_pool:
        pool = run.pools[ExtractionMode.CACHED]
        pool.save(out / "pool.dlisc", rt.model_e.fingerprint, rt.model_e.adapter_fingerprint)
    sys.stdout.write(run.report.table())
    if run.report.violations:
        raise InvariantViolation("; ".join(run.report.violations))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    rt = build_runtime(cfg)
    run = run_stream(rt)
    js, txt = run.report.write(_out(cfg))
    if cfg.save_pool:
        run.pools[ExtractionMode.CACHED].save(
            _out(cfg) / "pool.dlisc", rt.model_e.fingerprint, rt.model_e.adapter_fingerprint
        )
    sys.stdout.write(run.report.table())
    print(f"wrote {js} and {txt}")
    if run.report.violations:
        raise InvariantViolation("; ".join(run.report.violations))
    return EXIT_OK


def cmd_cache_stats(args) -> int:
    cfg = _config(args, need_output=False)
    _, _, model_e = build_models(cfg)
    pool = CachePool.load(args.pool, model_e.fingerprint, model_e.adapter_fingerprint)
    sys.stdout.write(pool.report())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dlisc", description="On-device two-stage extraction with schema KV caching")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init-model", help="write seeded base weights and two synthetic adapters")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--init-seed", type=int, default=42)
    p.add_argument("--adapter-seed-identify", type=int, default=1)
    p.add_argument("--adapter-seed-extract", type=int, default=2)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--alpha", type=float, default=16.0)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("schemas-build", help="write a schema library file and its slot layout")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--library", help=f"builtin library: {', '.join(sorted(BUILTIN_LIBRARIES))}")
    p.add_argument("--entity-list", help="text file with one entity label per line")
    p.add_argument("--input", help="existing schema file to validate and normalize")
    p.add_argument("--prefix", default="", help="schema_id prefix for --entity-list")
    p.add_argument("--slot-capacity", type=int, default=2048)
    p.add_argument("--meta-width", type=int, default=64)
    p.set_defaults(func=cmd_schemas_build)

    for name, func, help_ in (
        ("identify", cmd_identify, "stage one only"),
        ("extract", cmd_extract, "stage two only, from gold ids or --matched"),
        ("pipeline", cmd_pipeline, "both stages for every query and mode"),
        ("bench", cmd_bench, "both stages with latency report"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_run_flags(p)
        if name == "extract":
            p.add_argument("--matched", help="identify.jsonl giving matched schemas per query")
        p.set_defaults(func=func)

    p = sub.add_parser("cache-stats", help="print counters and entries of a saved pool")
    _add_run_flags(p)
    p.add_argument("--pool", required=True)
    p.set_defaults(func=cmd_cache_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SchemaError, AdapterError, container.ContainerError, FingerprintMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except Exception as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
