"""Stage two: schema-aware extraction, optionally backed by the schema KV cache."""

from __future__ import annotations

import enum
import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .cache import META_KEY_ID, CacheKey, CachePool
from .generation import GreedyBackend
from .identify import MatchedSchemaSet, MetaPrompt, Query
from .lora import Role
from .model import Segment, Visibility, prefill
from .schemas import SchemaRegistry, SlotError, SlotLayout
from .tokenizer import EOS, PAD, detokenize, tokenize


class ExtractionMode(str, enum.Enum):
    VANILLA = "VANILLA"
    LAYOUT_NOCACHE = "LAYOUT_NOCACHE"
    CACHED = "CACHED"


class ExtractionError(RuntimeError):
    pass


@dataclass
class ExtractionStats:
    computed_tokens: int = 0
    computed_meta_tokens: int = 0
    computed_schema_tokens: int = 0
    query_tokens: int = 0
    prompt_tokens: int = 0
    generated_tokens: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    dropped_records: int = 0
    wall_time: float = 0.0


@dataclass
class ExtractionResult:
    query_id: str
    mode: ExtractionMode
    records: list[tuple[str, str, str]]
    raw_text: str
    parse_ok: bool
    tokens: list[int]
    stats: ExtractionStats
    final_logits: np.ndarray | None = field(default=None, repr=False)

    def to_record(self) -> dict:
        return {
            "query_id": self.query_id,
            "mode": self.mode.value,
            "records": [list(r) for r in self.records],
            "raw_text": self.raw_text,
            "parse_ok": self.parse_ok,
            "stats": {k: v for k, v in vars(self.stats).items() if k != "wall_time"},
        }


def format_records(records) -> str:
    return "".join(f"{s} | {f} | {v}\n" for s, f, v in records)


def parse_structured_output(text: str) -> tuple[list[tuple[str, str, str]], bool]:
    """Parse ``schema_id | field_name | value`` lines.

    Blank lines are skipped. One malformed line fails the whole output, which
    then yields no records.
    """
    records = []
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.split("|", 2)
        if len(parts) != 3:
            return [], False
        sid, fname, value = (p.strip() for p in parts)
        if not sid or not fname:
            return [], False
        records.append((sid, fname, value))
    return records, True


def _digest(tokens) -> str:
    return hashlib.sha256(bytes(np.asarray(tokens, dtype="<u2").tobytes())).hexdigest()[:32]


def extract(
    model_e,
    m_e: MetaPrompt,
    matched: MatchedSchemaSet,
    query: Query,
    registry: SchemaRegistry,
    layout: SlotLayout | None = None,
    pool: CachePool | None = None,
    mode: ExtractionMode | str = ExtractionMode.CACHED,
    backend=None,
    max_new: int = 32,
    stop_id: int = EOS,
) -> ExtractionResult:
    """Run ``M_E + S + Q`` through the extraction model and parse the output.

    VANILLA prefills one contiguous causal sequence and never touches the
    pool. LAYOUT_NOCACHE places every segment at its fixed slot under the
    visibility mask and computes everything. CACHED does the same but looks
    up the meta prompt and each schema in ``pool``, injecting hits and
    inserting freshly computed segments after the prefill.
    """
    t0 = time.perf_counter()
    mode = ExtractionMode(mode)
    backend = backend or GreedyBackend()
    role = getattr(model_e, "role", None)
    if role is not None and role is not Role.EXTRACT:
        raise ExtractionError(f"extraction needs an EXTRACT model, got {role.value}")
    q_tokens = tokenize(query.text)
    if not q_tokens:
        raise ExtractionError(f"query {query.query_id!r} has empty text")
    ids = registry.canonical_order(matched.ids)
    schema_tokens = [tokenize(registry.rendered(sid)) for sid in ids]
    meta_tokens = tokenize(m_e.text)
    stats = ExtractionStats(query_tokens=len(q_tokens))

    segments: list[Segment] = []
    precomputed: list = []
    keys: list[CacheKey | None] = []

    if mode is ExtractionMode.VANILLA:
        prompt = meta_tokens + [t for toks in schema_tokens for t in toks]
        if prompt:
            segments.append(Segment(prompt, 0, Visibility.META))
        segments.append(Segment(q_tokens, len(prompt), Visibility.QUERY))
    else:
        if layout is None:
            raise ExtractionError(f"{mode.value} extraction needs a slot layout")
        if mode is ExtractionMode.CACHED and pool is None:
            raise ExtractionError("CACHED extraction needs a cache pool")
        if len(meta_tokens) > layout.meta_width:
            raise ExtractionError(
                f"extraction meta prompt is {len(meta_tokens)} tokens, meta slot holds {layout.meta_width}"
            )
        padded = meta_tokens + [PAD] * (layout.meta_width - len(meta_tokens))
        segments.append(Segment(padded, 0, Visibility.META))
        keys.append(_key(model_e, META_KEY_ID, 0, registry.template_version, padded))
        for sid, toks in zip(ids, schema_tokens):
            try:
                start, _ = layout.allocate(sid, len(toks))
            except SlotError as exc:
                raise ExtractionError(f"query {query.query_id!r}: {exc}") from exc
            segments.append(Segment(toks, start, Visibility.SCHEMA))
            keys.append(_key(model_e, sid, start, registry.template_version, toks))
        segments.append(Segment(q_tokens, layout.query_base, Visibility.QUERY))
        keys.append(None)
        if mode is ExtractionMode.CACHED:
            for key in keys:
                kv = pool.lookup(key) if key is not None else None
                if key is not None:
                    if kv is None:
                        stats.cache_misses += 1
                    else:
                        stats.cache_hits += 1
                precomputed.append(kv)

    state, logits = prefill(model_e, segments, precomputed or None)
    stats.prompt_tokens = sum(len(s) for s in segments)
    stats.computed_tokens = state.computed_tokens
    by_base = {kv.position_base: (kv, done) for kv, done in zip(state.segments, state.computed)}
    for seg in segments:
        if seg.visibility is Visibility.QUERY or not by_base[seg.position_base][1]:
            continue
        if seg.visibility is Visibility.META:
            stats.computed_meta_tokens += len(seg)
        else:
            stats.computed_schema_tokens += len(seg)

    if mode is ExtractionMode.CACHED:
        for seg, key, kv in zip(segments, keys, precomputed):
            if key is not None and kv is None:
                pool.insert(key, by_base[seg.position_base][0])

    out = backend.generate(model_e, state, max_new, stop_id, query.query_id)
    stats.generated_tokens = len(out)
    raw = detokenize(out).decode("utf-8", errors="replace")
    records, ok = parse_structured_output(raw)
    allowed = set(ids)
    kept = [r for r in records if r[0] in allowed]
    stats.dropped_records = len(records) - len(kept)
    stats.wall_time = time.perf_counter() - t0
    return ExtractionResult(query.query_id, mode, kept, raw, ok, list(out), stats, logits)


def _key(model, schema_id, base, template_version, tokens) -> CacheKey:
    return CacheKey(
        schema_id=schema_id,
        model_fingerprint=model.fingerprint,
        adapter_fingerprint=getattr(model, "adapter_fingerprint", ""),
        template_version=template_version,
        position_base=base,
        content_digest=_digest(tokens),
    )
