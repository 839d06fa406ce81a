"""Schema library, prompt rendering and the fixed position-slot layout."""

from __future__ import annotations

import enum
import json
import re
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np

TEMPLATE_VERSIONS = ("v1",)
DEFAULT_TEMPLATE = "v1"

_TERM_RE = re.compile(r"[^\W_]+", re.UNICODE)


class SchemaError(ValueError):
    pass


class SlotError(RuntimeError):
    pass


class SchemaKind(str, enum.Enum):
    ENTITY = "ENTITY"
    RELATION = "RELATION"
    EVENT = "EVENT"


@dataclass(frozen=True)
class Schema:
    schema_id: str
    kind: SchemaKind
    name: str
    description: str = ""
    fields: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.schema_id or not isinstance(self.schema_id, str):
            raise SchemaError("schema_id must be a nonempty string")
        if not self.name or not self.name.strip():
            raise SchemaError(f"schema {self.schema_id!r}: name must be nonempty")
        try:
            object.__setattr__(self, "kind", SchemaKind(self.kind))
        except ValueError:
            raise SchemaError(f"schema {self.schema_id!r}: unknown kind {self.kind!r}") from None
        fields = tuple((str(n), str(d)) for n, d in self.fields)
        names = [n for n, _ in fields]
        dup = [n for n, c in Counter(names).items() if c > 1]
        if dup:
            raise SchemaError(f"schema {self.schema_id!r}: duplicate field names {dup}")
        object.__setattr__(self, "fields", fields)

    @classmethod
    def from_record(cls, rec: dict) -> "Schema":
        fields = []
        for f in rec.get("fields", []):
            if isinstance(f, dict):
                fields.append((f["name"], f.get("description", "")))
            else:
                fields.append(tuple(f))
        return cls(rec["schema_id"], rec["kind"], rec["name"], rec.get("description", ""), tuple(fields))

    def to_record(self) -> dict:
        return {
            "schema_id": self.schema_id,
            "kind": self.kind.value,
            "name": self.name,
            "description": self.description,
            "fields": [{"name": n, "description": d} for n, d in self.fields],
        }


def render_schema(schema: Schema, template_version: str = DEFAULT_TEMPLATE) -> str:
    """Canonical prompt text for one schema.

    One header line with the kind, name and id, one description line, then one
    line per field. Every line ends with a newline.
    """
    if template_version != "v1":
        raise SchemaError(f"unknown template version {template_version!r}")
    lines = [f"{schema.kind.value}: {schema.name} (id: {schema.schema_id})", f"description: {schema.description}"]
    lines += [f"- {name}: {desc}" for name, desc in schema.fields]
    return "\n".join(lines) + "\n"


def text_terms(text: str | bytes) -> list[str]:
    """Lowercased words, split on whitespace and punctuation."""
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    return _TERM_RE.findall(text.lower())


@dataclass
class CorpusStats:
    n_docs: int
    doc_tf: dict[str, Counter]
    doc_len: dict[str, int]
    df: Counter
    avg_len: float


def build_stats(docs: dict[str, str]) -> CorpusStats:
    doc_tf, doc_len, df = {}, {}, Counter()
    for sid, text in docs.items():
        terms = text_terms(text)
        tf = Counter(terms)
        doc_tf[sid] = tf
        doc_len[sid] = len(terms)
        df.update(tf.keys())
    n = len(docs)
    avg = sum(doc_len.values()) / n if n else 0.0
    return CorpusStats(n, doc_tf, doc_len, df, avg)


class SchemaRegistry:
    """Schemas by id, their rendered text, and BM25 corpus statistics.

    Statistics are rebuilt on every mutation.
    """

    def __init__(self, schemas: Iterable[Schema] = (), template_version: str = DEFAULT_TEMPLATE):
        if template_version not in TEMPLATE_VERSIONS:
            raise SchemaError(f"unknown template version {template_version!r}")
        self.template_version = template_version
        self._schemas: dict[str, Schema] = {}
        for s in schemas:
            if s.schema_id in self._schemas:
                raise SchemaError(f"duplicate schema_id {s.schema_id!r}")
            self._schemas[s.schema_id] = s
        self._rebuild()

    def _rebuild(self) -> None:
        self._rendered = {sid: render_schema(s, self.template_version) for sid, s in self._schemas.items()}
        self._by_name: dict[str, list[str]] = {}
        for sid in sorted(self._schemas):
            self._by_name.setdefault(self._schemas[sid].name, []).append(sid)
        self.stats = build_stats(self._rendered)

    def add(self, schema: Schema) -> None:
        if schema.schema_id in self._schemas:
            raise SchemaError(f"duplicate schema_id {schema.schema_id!r}")
        self._schemas[schema.schema_id] = schema
        self._rebuild()

    def remove(self, schema_id: str) -> None:
        del self._schemas[schema_id]
        self._rebuild()

    def __len__(self):
        return len(self._schemas)

    def __contains__(self, schema_id):
        return schema_id in self._schemas

    def __iter__(self):
        return iter(self._schemas.values())

    def __getitem__(self, schema_id: str) -> Schema:
        return self._schemas[schema_id]

    @property
    def ids(self) -> list[str]:
        return sorted(self._schemas)

    def ids_for_name(self, name: str) -> list[str]:
        return self._by_name.get(name, [])

    def rendered(self, schema_id: str) -> str:
        return self._rendered[schema_id]

    def canonical_order(self, schema_ids: Iterable[str]) -> list[str]:
        return canonical_order(schema_ids, self)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for sid in self.ids:
                fh.write(json.dumps(self._schemas[sid].to_record(), ensure_ascii=False) + "\n")


def canonical_order(schema_ids: Iterable[str], registry: SchemaRegistry | None = None) -> list[str]:
    """Deduplicated ids sorted lexicographically."""
    ids = set(schema_ids)
    if registry is not None:
        unknown = sorted(i for i in ids if i not in registry)
        if unknown:
            raise SchemaError(f"unknown schema ids {unknown}")
    return sorted(ids)


def load_registry(path, template_version: str = DEFAULT_TEMPLATE) -> SchemaRegistry:
    """Read a line-delimited JSON schema library."""
    schemas = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                schema = Schema.from_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise SchemaError(f"{path}:{lineno}: cannot parse schema record ({exc})") from None
            if schema.schema_id in seen:
                raise SchemaError(f"{path}:{lineno}: duplicate schema_id {schema.schema_id!r}")
            seen.add(schema.schema_id)
            schemas.append(schema)
    if not schemas:
        raise SchemaError(f"{path}: no schema records")
    return SchemaRegistry(schemas, template_version)


class SlotLayout:
    """Fixed absolute-position slots: meta prompt at 0, one slot per schema.

    A schema keeps its slot for as long as the layout lives, so its cached
    keys never need re-rotation. The query always starts at ``capacity``.
    """

    def __init__(self, capacity: int = 2048, meta_width: int = 64, template_version: str = DEFAULT_TEMPLATE):
        if not 0 < meta_width <= capacity:
            raise SlotError(f"meta width {meta_width} does not fit capacity {capacity}")
        self.capacity = capacity
        self.meta_width = meta_width
        self.template_version = template_version
        self.slots: dict[str, tuple[int, int]] = {}
        self._lock = threading.Lock()

    @property
    def meta_slot(self) -> tuple[int, int]:
        return (0, self.meta_width)

    @property
    def query_base(self) -> int:
        return self.capacity

    def allocate(self, schema_id: str, token_length: int) -> tuple[int, int]:
        """First-fit slot for ``schema_id``; repeat calls return the same range."""
        if token_length < 1:
            raise SlotError(f"schema {schema_id!r}: slot length must be positive")
        with self._lock:
            if schema_id in self.slots:
                start, end = self.slots[schema_id]
                if end - start != token_length:
                    raise SlotError(
                        f"schema {schema_id!r} already holds a {end - start}-token slot, asked for {token_length}"
                    )
                return start, end
            cursor = self.meta_width
            for start, end in sorted(self.slots.values()):
                if start - cursor >= token_length:
                    break
                cursor = max(cursor, end)
            if cursor + token_length > self.capacity:
                raise SlotError(
                    f"slot capacity exhausted: {schema_id!r} needs {token_length} positions, "
                    f"{len(self.slots)} live slots in capacity {self.capacity}"
                )
            rng = (cursor, cursor + token_length)
            self.slots[schema_id] = rng
            return rng

    def free(self, schema_id: str, pool) -> None:
        """Release a slot. Refused while ``pool`` still holds KV for it."""
        with self._lock:
            start, _ = self.slots[schema_id]
            if pool is not None and pool.holds(schema_id, start):
                raise SlotError(f"schema {schema_id!r} still has a live cache entry at position {start}")
            del self.slots[schema_id]

    def dump(self) -> str:
        lines = [
            f"layout template_version={self.template_version} capacity={self.capacity} "
            f"meta=[0,{self.meta_width}) query_base={self.query_base}"
        ]
        for sid, (a, b) in sorted(self.slots.items(), key=lambda kv: kv[1]):
            lines.append(f"slot {sid} [{a},{b}) width={b - a}")
        return "\n".join(lines) + "\n"


# -- builtin toy libraries ---------------------------------------------------

# Entity label set of the CrossNER AI domain.
CROSSNER_AI_LABELS = {
    "algorithm": "A named learning method or model family.",
    "conference": "A venue where research is presented.",
    "country": "A sovereign nation.",
    "field": "A research discipline or subfield.",
    "location": "A place that is not a country.",
    "metrics": "A measure used to evaluate systems.",
    "misc": "Any other named AI-related item.",
    "organisation": "A company, lab or agency.",
    "person": "A named person who is not a researcher.",
    "product": "A named AI system, device or tool.",
    "programlang": "A programming language.",
    "researcher": "A named scientist or engineer.",
    "task": "A problem that systems are built to solve.",
    "university": "An academic institution.",
}


def entity_list_to_records(labels, descriptions: dict[str, str] | None = None, prefix: str = "") -> list[dict]:
    """Turn a flat NER label list into ENTITY schema records."""
    descriptions = descriptions or {}
    records = []
    for label in labels:
        label = label.strip()
        if not label:
            continue
        records.append(
            {
                "schema_id": prefix + label,
                "kind": "ENTITY",
                "name": label,
                "description": descriptions.get(label, f"Mentions of type {label}."),
                "fields": [
                    {"name": "mention", "description": "exact text span"},
                    {"name": "context", "description": "supporting phrase"},
                ],
            }
        )
    return records


def crossner_ai_library() -> SchemaRegistry:
    recs = entity_list_to_records(CROSSNER_AI_LABELS, CROSSNER_AI_LABELS)
    return SchemaRegistry(Schema.from_record(r) for r in recs)


_FINANCE_EVENTS = {
    "equity_pledge": ("Equity Pledge", ["pledger", "pledgee", "pledged_shares", "start_date"]),
    "pledge_release": ("Pledge Release", ["pledger", "pledgee", "released_shares", "release_date"]),
    "share_repurchase": ("Share Repurchase", ["company", "repurchased_shares", "amount", "announce_date"]),
    "share_reduction": ("Share Reduction", ["holder", "reduced_shares", "price", "end_date"]),
    "share_increase": ("Share Increase", ["holder", "increased_shares", "price", "announce_date"]),
    "bid_winning": ("Bid Winning", ["winner", "tenderer", "amount", "announce_date"]),
    "financing": ("Company Financing", ["company", "investors", "round", "amount"]),
    "bankruptcy": ("Enterprise Bankruptcy", ["company", "creditor", "announce_date"]),
    "acquisition": ("Enterprise Acquisition", ["acquirer", "target", "amount", "announce_date"]),
    "loss": ("Enterprise Loss", ["company", "loss_amount", "period"]),
    "executive_change": ("Executive Change", ["company", "executive", "position", "change_date"]),
    "listing": ("Public Listing", ["company", "exchange", "raised_amount", "listing_date"]),
    "regulator_interview": ("Regulator Interview", ["company", "regulator", "interview_date"]),
}


def finance_event_library() -> SchemaRegistry:
    """Thirteen financial event types in the style of a Chinese financial EE corpus."""
    schemas = []
    for sid, (name, fields) in _FINANCE_EVENTS.items():
        schemas.append(
            Schema(
                sid,
                SchemaKind.EVENT,
                name,
                f"A disclosed {name.lower()} event.",
                tuple((f, "") for f in fields),
            )
        )
    return SchemaRegistry(schemas)


_SYLLABLES = ["ka", "lo", "mer", "ti", "van", "sul", "dor", "pe", "ri", "nax", "qu", "bel", "tor", "esh", "mi", "zan"]
_TOY_VOCAB = [
    "signal", "market", "vector", "engine", "harbor", "ledger", "protein", "orbit", "graph", "token",
    "sensor", "policy", "garden", "fabric", "cipher", "river", "metric", "kernel", "matrix", "voltage",
    "archive", "canyon", "beacon", "thread", "portal", "crystal", "summit", "lattice", "rocket", "meadow",
]


def toy_library(n: int, seed: int = 0, duplicate_every: int = 10) -> SchemaRegistry:
    """Random schemas over a small shared vocabulary.

    Every ``duplicate_every``-th schema copies the content of its predecessor
    under a fresh id, which produces exact BM25 score ties.
    """
    rng = np.random.default_rng(seed)
    schemas: list[Schema] = []
    kinds = list(SchemaKind)
    for i in range(n):
        sid = f"toy-{i:03d}"
        if duplicate_every and i % duplicate_every == duplicate_every - 1 and schemas:
            prev = schemas[-1]
            schemas.append(Schema(sid, prev.kind, prev.name, prev.description, prev.fields))
            continue
        name = "".join(rng.choice(_SYLLABLES, size=3))
        words = rng.choice(_TOY_VOCAB, size=int(rng.integers(4, 9)))
        n_fields = int(rng.integers(0, 4))
        fields = tuple(
            (f"f{j}_{rng.choice(_TOY_VOCAB)}", " ".join(rng.choice(_TOY_VOCAB, size=3))) for j in range(n_fields)
        )
        schemas.append(Schema(sid, kinds[int(rng.integers(0, 3))], name, " ".join(words), fields))
    return SchemaRegistry(schemas)


BUILTIN_LIBRARIES = {
    "crossner_ai": crossner_ai_library,
    "finance_events": finance_event_library,
}
