"""Cached-versus-uncached extraction benchmark over a query stream."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .cache import CachePool
from .config import RunConfig
from .extract import ExtractionMode, ExtractionResult, extract
from .identify import MatchedSchemaSet
from .metrics import extraction_f1, identification_precision
from .runtime import Runtime, build_runtime
from .tokenizer import tokenize


class BenchError(RuntimeError):
    pass


@dataclass
class ModeReport:
    mode: str
    latency_mean_s: float
    latency_median_s: float
    precision: float
    recall: float
    f1: float
    parse_ok_rate: float
    hit_rate: float
    computed_tokens: int
    computed_meta_tokens: int
    computed_schema_tokens: int
    pool: dict = field(default_factory=dict)
    miss_counts: dict = field(default_factory=dict)
    latencies_s: list[float] = field(default_factory=list, repr=False)

    def to_dict(self, timings: bool = True) -> dict:
        d = dict(vars(self))
        if not timings:
            for k in ("latency_mean_s", "latency_median_s", "latencies_s"):
                d.pop(k)
        return d


@dataclass
class BenchReport:
    n_queries: int
    identification: dict
    modes: dict[str, ModeReport]
    divergence_rate: float | None
    segment_lengths: dict[str, int]
    meta_length: int
    config: dict
    violations: list[str] = field(default_factory=list)

    def to_dict(self, timings: bool = True) -> dict:
        ident = dict(self.identification)
        if not timings:
            ident = {k: v for k, v in ident.items() if not k.startswith("latency")}
        return {
            "n_queries": self.n_queries,
            "identification": ident,
            "modes": {m: r.to_dict(timings) for m, r in self.modes.items()},
            "divergence_rate": self.divergence_rate,
            "segment_lengths": self.segment_lengths,
            "meta_length": self.meta_length,
            "config": self.config,
            "violations": self.violations,
        }

    def table(self) -> str:
        cols = ["mode", "mean_s", "median_s", "P", "R", "F1", "parse_ok", "hit_rate", "computed_tok"]
        rows = [
            [
                m,
                f"{r.latency_mean_s:.4f}",
                f"{r.latency_median_s:.4f}",
                f"{r.precision:.4f}",
                f"{r.recall:.4f}",
                f"{r.f1:.4f}",
                f"{r.parse_ok_rate:.3f}",
                f"{r.hit_rate:.3f}",
                str(r.computed_tokens),
            ]
            for m, r in self.modes.items()
        ]
        widths = [max(len(c), *(len(row[i]) for row in rows)) for i, c in enumerate(cols)]
        fmt = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
        lines = [fmt.format(*cols), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*row) for row in rows]
        ident = self.identification
        lines.append("")
        lines.append(
            f"identification source={ident['source']} precision={ident['precision']:.4f} "
            f"dropped_names={ident['dropped_names']} flagged={ident['flagged']} "
            f"mean_s={ident['latency_mean_s']:.4f}"
        )
        if "VANILLA" in self.modes and "CACHED" in self.modes:
            v, c = self.modes["VANILLA"], self.modes["CACHED"]
            ratio = c.latency_mean_s / v.latency_mean_s if v.latency_mean_s else float("nan")
            lines.append(f"CACHED/VANILLA mean latency ratio = {ratio:.3f}")
        if self.divergence_rate is not None:
            lines.append(f"VANILLA vs CACHED output divergence rate = {self.divergence_rate:.3f}")
        lines.append(f"queries={self.n_queries} violations={len(self.violations)}")
        for v in self.violations:
            lines.append(f"  VIOLATION: {v}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        js, txt = out / "report.json", out / "report.txt"
        js.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        txt.write_text(self.table())
        return js, txt


def run_benchmark(config: RunConfig | Runtime) -> BenchReport:
    """Run identification once per query, then extraction in every mode.

    Each mode gets its own cold pool and layout. Extraction latency is the
    wall time of the extract call; identification latency is reported
    separately.
    """
    rt = config if isinstance(config, Runtime) else build_runtime(config)
    return run_stream(rt).report


@dataclass
class StreamRun:
    matched: list[MatchedSchemaSet]
    results: dict[ExtractionMode, list[ExtractionResult]]
    pools: dict[ExtractionMode, CachePool]
    report: BenchReport


def run_stream(rt: Runtime) -> StreamRun:
    """Full two-stage pass over ``rt.queries``, keeping per-query results."""
    cfg = rt.config
    modes = [ExtractionMode(m) for m in cfg.modes]
    layouts = {m: rt.new_layout() for m in modes if m is not ExtractionMode.VANILLA}
    pools = {m: rt.new_pool() for m in modes if m is ExtractionMode.CACHED}
    results: dict[ExtractionMode, list[ExtractionResult]] = {m: [] for m in modes}
    matched_sets, ident_times = [], []

    for q in rt.queries:
        try:
            matched, dt = rt.identify(q)
        except Exception as exc:
            raise BenchError(f"query {q.query_id}: stage identify: {exc}") from exc
        matched_sets.append(matched)
        ident_times.append(dt)
        for m in modes:
            try:
                res = extract(
                    rt.model_e, rt.m_e, matched, q, rt.registry, layouts.get(m), pools.get(m), m,
                    rt.extract_backend, cfg.max_new_extract,
                )
            except Exception as exc:
                raise BenchError(f"query {q.query_id}: stage extract[{m.value}]: {exc}") from exc
            results[m].append(res)

    violations: list[str] = []
    gold_ids = [sorted(q.gold_ids or ()) for q in rt.queries]
    gold_records = [list(q.gold_records or ()) for q in rt.queries]
    reports = {}
    for m in modes:
        rs = results[m]
        lat = [r.stats.wall_time for r in rs]
        p, r_, f1 = extraction_f1([x.records for x in rs], gold_records)
        pool = pools.get(m)
        counters = pool.counters() if pool else {}
        rep = ModeReport(
            mode=m.value,
            latency_mean_s=statistics.fmean(lat),
            latency_median_s=statistics.median(lat),
            precision=p,
            recall=r_,
            f1=f1,
            parse_ok_rate=sum(x.parse_ok for x in rs) / len(rs),
            hit_rate=pool.hit_rate if pool else 0.0,
            computed_tokens=sum(x.stats.computed_tokens for x in rs),
            computed_meta_tokens=sum(x.stats.computed_meta_tokens for x in rs),
            computed_schema_tokens=sum(x.stats.computed_schema_tokens for x in rs),
            pool=counters,
            miss_counts=dict(sorted(pool.miss_counts.items())) if pool else {},
            latencies_s=lat,
        )
        reports[m.value] = rep
        violations += _check_mode(rep, rs, pool)

    divergence = None
    if ExtractionMode.VANILLA in results and ExtractionMode.CACHED in results:
        pairs = zip(results[ExtractionMode.VANILLA], results[ExtractionMode.CACHED])
        divergence = sum(a.tokens != b.tokens for a, b in pairs) / len(rt.queries)
    if ExtractionMode.LAYOUT_NOCACHE in results and ExtractionMode.CACHED in results:
        pairs = zip(results[ExtractionMode.LAYOUT_NOCACHE], results[ExtractionMode.CACHED])
        bad = [a.query_id for a, b in pairs if a.tokens != b.tokens]
        if bad:
            violations.append(f"cache transparency: CACHED differs from LAYOUT_NOCACHE on {bad[:5]}")

    seen = sorted({sid for ms in matched_sets for sid in ms.ids})
    ident = {
        "source": cfg.identification,
        "precision": identification_precision([ms.ids for ms in matched_sets], gold_ids),
        "dropped_names": sum(ms.dropped for ms in matched_sets),
        "flagged": sum(ms.flagged for ms in matched_sets),
        "latency_mean_s": statistics.fmean(ident_times),
        "latency_median_s": statistics.median(ident_times),
    }
    if not 0.0 <= ident["precision"] <= 1.0:
        violations.append(f"identification precision {ident['precision']} outside [0,1]")
    report = BenchReport(
        n_queries=len(rt.queries),
        identification=ident,
        modes=reports,
        divergence_rate=divergence,
        segment_lengths={sid: len(tokenize(rt.registry.rendered(sid))) for sid in seen},
        meta_length=cfg.meta_width,
        config=cfg.to_dict(),
        violations=violations,
    )
    return StreamRun(matched_sets, results, pools, report)


def _check_mode(rep: ModeReport, results, pool) -> list[str]:
    out = []
    for name in ("precision", "recall", "f1", "parse_ok_rate", "hit_rate"):
        v = getattr(rep, name)
        if not 0.0 <= v <= 1.0:
            out.append(f"{rep.mode}: {name}={v} outside [0,1]")
    for r in results:
        if r.records and not r.parse_ok:
            out.append(f"{rep.mode}: {r.query_id} has records without parse_ok")
    if pool is not None:
        if pool.total_bytes > pool.capacity_bytes:
            out.append(f"{rep.mode}: pool holds {pool.total_bytes} bytes over capacity {pool.capacity_bytes}")
        if pool.hits + pool.misses != pool.lookups:
            out.append(f"{rep.mode}: hits + misses != lookups")
        n_lookups = sum(r.stats.cache_hits + r.stats.cache_misses for r in results)
        if n_lookups != pool.lookups:
            out.append(f"{rep.mode}: per-call lookups {n_lookups} != pool lookups {pool.lookups}")
    elif any(r.stats.cache_hits or r.stats.cache_misses for r in results):
        out.append(f"{rep.mode}: touched the cache without a pool")
    return out
