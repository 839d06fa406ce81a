"""Seeded synthetic query streams with gold schemas and records."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .identify import Query
from .schemas import SchemaRegistry

_FILLER = (
    "the report noted that during a recent review analysts discussed progress while "
    "several teams compared results across new benchmarks and earlier studies in detail"
).split()
_SYL = ["ko", "va", "rin", "tel", "mo", "sa", "dri", "lun", "pax", "ore", "bi", "zet", "qua", "nu"]


@dataclass
class Workload:
    queries: list[Query]
    seed: int
    params: dict = field(default_factory=dict)


def popularity(n: int, skew: float) -> np.ndarray:
    """Power-law weights ``1 / rank**skew``, normalized."""
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** skew
    return w / w.sum()


def generate_workload(
    registry: SchemaRegistry,
    n_queries: int,
    skew: float = 1.1,
    seed: int = 7,
    pool_size: int | None = None,
    max_gold: int = 3,
) -> Workload:
    """Queries that each mention 1-``max_gold`` gold schemas by name.

    The schema pool is the first ``pool_size`` ids in canonical order;
    popularity ranks over the pool are a seeded permutation. Each gold
    schema contributes one record ``(schema_id, first field, value)`` whose
    value appears verbatim in the text.
    """
    if n_queries < 1:
        raise ValueError("n_queries must be >= 1")
    if len(registry) == 0:
        raise ValueError("registry is empty")
    rng = np.random.default_rng(seed)
    ids = registry.ids[: pool_size or len(registry)]
    ranked = [ids[i] for i in rng.permutation(len(ids))]
    probs = popularity(len(ranked), skew)
    queries = []
    for qi in range(n_queries):
        m = int(rng.integers(1, min(max_gold, len(ranked)) + 1))
        picks = rng.choice(len(ranked), size=m, replace=False, p=probs)
        gold = sorted(ranked[i] for i in picks)
        words = list(rng.choice(_FILLER, size=int(rng.integers(3, 7))))
        records = []
        for sid in gold:
            schema = registry[sid]
            value = "".join(rng.choice(_SYL, size=3)).capitalize()
            words += [schema.name, value]
            words += list(rng.choice(_FILLER, size=int(rng.integers(2, 5))))
            if schema.fields:
                records.append((sid, schema.fields[0][0], value))
        text = " ".join(words) + "."
        queries.append(Query(f"q{qi:04d}", text, frozenset(gold), tuple(records)))
    params = {"n_queries": n_queries, "skew": skew, "pool_size": len(ids), "max_gold": max_gold}
    return Workload(queries, seed, params)
