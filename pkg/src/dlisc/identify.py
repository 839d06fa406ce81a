"""Stage one: choose the matched schemas for a query."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Iterable

from .generation import GreedyBackend
from .lora import Role
from .model import Segment, Visibility, prefill
from .schemas import SchemaRegistry, canonical_order, text_terms
from .tokenizer import EOS, SEP, detokenize, split_on, tokenize


class Provenance(str, enum.Enum):
    MODEL = "MODEL"
    BM25 = "BM25"


@dataclass(frozen=True)
class Query:
    query_id: str
    text: bytes
    gold_ids: frozenset[str] | None = None
    gold_records: tuple[tuple[str, str, str], ...] | None = None

    def __post_init__(self):
        if isinstance(self.text, str):
            object.__setattr__(self, "text", self.text.encode("utf-8"))
        if self.gold_ids is not None:
            object.__setattr__(self, "gold_ids", frozenset(self.gold_ids))
        if self.gold_records is not None:
            object.__setattr__(self, "gold_records", tuple(tuple(r) for r in self.gold_records))

    @classmethod
    def from_record(cls, rec: dict) -> "Query":
        return cls(rec["query_id"], rec["text"], rec.get("gold_ids"), rec.get("gold_records"))

    def to_record(self) -> dict:
        rec = {"query_id": self.query_id, "text": self.text.decode("utf-8", errors="replace")}
        if self.gold_ids is not None:
            rec["gold_ids"] = sorted(self.gold_ids)
        if self.gold_records is not None:
            rec["gold_records"] = [list(r) for r in self.gold_records]
        return rec


def load_queries(path) -> list[Query]:
    queries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                queries.append(Query.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: cannot parse query record ({exc})") from None
    return queries


def save_queries(queries: Iterable[Query], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps(q.to_record(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class MatchedSchemaSet:
    ids: tuple[str, ...]
    provenance: Provenance
    dropped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(sorted(set(self.ids))))
        object.__setattr__(self, "provenance", Provenance(self.provenance))

    @property
    def flagged(self) -> bool:
        """True when identification produced no valid schema."""
        return not self.ids

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


@dataclass(frozen=True)
class MetaPrompt:
    role: Role
    text: bytes
    version: str = "v1"

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        if isinstance(self.text, str):
            object.__setattr__(self, "text", self.text.encode("utf-8"))


DEFAULT_IDENTIFY_PROMPT = MetaPrompt(
    Role.IDENTIFY, "List the schema names that apply to the text, separated by SEP.\nText: "
)
DEFAULT_EXTRACT_PROMPT = MetaPrompt(
    Role.EXTRACT, "Extract records as lines: schema_id | field | value\nSchemas:\n"
)


# -- BM25 --------------------------------------------------------------------

def bm25_idf(n_docs: int, df: int) -> float:
    return math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))


def bm25_score(query_terms, schema_id: str, stats, k1: float = 1.2, b: float = 0.75) -> float:
    """Okapi BM25 of one schema document against a list of query terms.

    Repeated query terms contribute once per occurrence.
    """
    tf_doc = stats.doc_tf[schema_id]
    norm = 1.0 - b + b * (stats.doc_len[schema_id] / stats.avg_len) if stats.avg_len else 1.0
    score = 0.0
    for term in query_terms:
        tf = tf_doc.get(term, 0)
        if not tf:
            continue
        idf = bm25_idf(stats.n_docs, stats.df[term])
        score += idf * (tf * (k1 + 1.0)) / (tf + k1 * norm)
    return score


def rank_schemas(query, registry: SchemaRegistry, k1: float = 1.2, b: float = 0.75) -> list[tuple[str, float]]:
    """Every schema with its BM25 score, best first, ties by schema id."""
    if len(registry) == 0:
        raise ValueError("cannot retrieve from an empty registry")
    text = query.text if isinstance(query, Query) else query
    terms = text_terms(text)
    scored = sorted(((-bm25_score(terms, sid, registry.stats, k1, b), sid) for sid in registry.ids))
    return [(sid, -neg) for neg, sid in scored]


def retrieve_topk(query, registry: SchemaRegistry, k: int = 5, k1: float = 1.2, b: float = 0.75) -> MatchedSchemaSet:
    """Top-``k`` schemas by BM25, returned in canonical order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = rank_schemas(query, registry, k1, b)
    return MatchedSchemaSet(tuple(sid for sid, _ in ranked[:k]), Provenance.BM25)


# -- model-based identification ---------------------------------------------

def parse_identification(tokens, registry: SchemaRegistry) -> tuple[list[str], int]:
    """Map SEP-separated names to schema ids; returns (ids, dropped_count)."""
    ids: list[str] = []
    dropped = 0
    for chunk in split_on(tokens, SEP):
        if not chunk:
            continue
        name = detokenize(chunk).decode("utf-8", errors="replace")
        found = registry.ids_for_name(name)
        if found:
            ids.extend(found)
        else:
            dropped += 1
    return ids, dropped


def identify_schemas(
    model_i,
    m_i: MetaPrompt,
    query: Query,
    registry: SchemaRegistry,
    backend=None,
    max_new: int = 32,
) -> MatchedSchemaSet:
    """Prefill ``M_I + Q`` contiguously, decode, and keep only registered names."""
    role = getattr(model_i, "role", None)
    if role is not None and role is not Role.IDENTIFY:
        raise ValueError(f"identification needs an IDENTIFY model, got {role.value}")
    backend = backend or GreedyBackend()
    meta = tokenize(m_i.text)
    q = tokenize(query.text)
    if not q:
        raise ValueError(f"query {query.query_id!r} has empty text")
    segments = []
    if meta:
        segments.append(Segment(meta, 0, Visibility.META))
    segments.append(Segment(q, len(meta), Visibility.QUERY))
    state, _ = prefill(model_i, segments)
    out = backend.generate(model_i, state, max_new, EOS, query.query_id)
    ids, dropped = parse_identification(out, registry)
    return MatchedSchemaSet(tuple(canonical_order(ids)), Provenance.MODEL, dropped)
