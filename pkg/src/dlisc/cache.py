"""Schema KV cache pool with byte-capacity LRU eviction."""

from __future__ import annotations

import threading
from collections import Counter, OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import container
from .model import SegmentKV

META_KEY_ID = "__meta__"
DEFAULT_CAPACITY_BYTES = 64 * 1024 * 1024


class CacheCapacityError(ValueError):
    pass


class FingerprintMismatch(ValueError):
    pass


@dataclass(frozen=True)
class CacheKey:
    schema_id: str
    model_fingerprint: str
    adapter_fingerprint: str
    template_version: str
    position_base: int
    content_digest: str = ""


@dataclass
class CacheEntry:
    key: CacheKey
    kv: SegmentKV
    byte_size: int
    last_used: int
    insert_order: int


class CachePool:
    """Keyed pool of segment KV tensors.

    Every method takes the pool lock, so lookups and inserts are
    linearizable even when extraction calls interleave across threads.
    """

    def __init__(self, capacity_bytes: int = DEFAULT_CAPACITY_BYTES):
        if capacity_bytes < 0:
            raise ValueError("capacity_bytes must be non-negative")
        self.capacity_bytes = int(capacity_bytes)
        self._entries: OrderedDict[CacheKey, CacheEntry] = OrderedDict()
        self._lock = threading.RLock()
        self._clock = 0
        self._inserted = 0
        self.total_bytes = 0
        self.hits = 0
        self.misses = 0
        self.insertions = 0
        self.evictions = 0
        self.miss_counts: Counter[str] = Counter()

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    @property
    def lookups(self) -> int:
        return self.hits + self.misses

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._entries

    def lookup(self, key: CacheKey) -> SegmentKV | None:
        """Stored KV on a hit (recency refreshed), ``None`` on a miss."""
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                self.misses += 1
                self.miss_counts[key.schema_id] += 1
                return None
            self.hits += 1
            entry.last_used = self._tick()
            self._entries.move_to_end(key)
            return entry.kv

    def insert(self, key: CacheKey, kv: SegmentKV) -> list[CacheKey]:
        """Store ``kv`` under ``key`` and evict LRU entries until within capacity."""
        if kv.position_base != key.position_base:
            raise ValueError(f"kv computed at {kv.position_base}, key says {key.position_base}")
        if kv.fingerprint != key.model_fingerprint:
            raise ValueError("kv fingerprint does not match key model fingerprint")
        size = kv.nbytes
        if size > self.capacity_bytes:
            raise CacheCapacityError(f"entry of {size} bytes exceeds pool capacity {self.capacity_bytes}")
        with self._lock:
            old = self._entries.pop(key, None)
            if old is not None:
                self.total_bytes -= old.byte_size
                order = old.insert_order
            else:
                self._inserted += 1
                order = self._inserted
            self._entries[key] = CacheEntry(key, kv, size, self._tick(), order)
            self.total_bytes += size
            self.insertions += 1
            evicted = []
            while self.total_bytes > self.capacity_bytes:
                victim, entry = next(iter(self._entries.items()))
                del self._entries[victim]
                self.total_bytes -= entry.byte_size
                self.evictions += 1
                evicted.append(victim)
            return evicted

    def holds(self, schema_id: str, position_base: int) -> bool:
        with self._lock:
            return any(k.schema_id == schema_id and k.position_base == position_base for k in self._entries)

    def entries(self) -> list[CacheEntry]:
        with self._lock:
            return list(self._entries.values())

    def counters(self) -> dict[str, int]:
        return {
            "hits": self.hits,
            "misses": self.misses,
            "lookups": self.lookups,
            "insertions": self.insertions,
            "evictions": self.evictions,
            "entries": len(self._entries),
            "total_bytes": self.total_bytes,
            "capacity_bytes": self.capacity_bytes,
        }

    def report(self) -> str:
        """Counters followed by one line per entry, least recently used first."""
        lines = [" ".join(f"{k}={v}" for k, v in self.counters().items())]
        for e in sorted(self.entries(), key=lambda e: e.last_used):
            k = e.key
            lines.append(
                f"entry schema_id={k.schema_id} position_base={k.position_base} tokens={e.kv.n_tokens} "
                f"bytes={e.byte_size} last_used={e.last_used} insert_order={e.insert_order} "
                f"model={k.model_fingerprint[:12]} adapter={k.adapter_fingerprint[:12]} "
                f"template={k.template_version}"
            )
        return "\n".join(lines) + "\n"

    # -- persistence -------------------------------------------------------

    def save(self, path, model_fingerprint: str, adapter_fingerprint: str) -> str:
        with self._lock:
            tensors: dict[str, np.ndarray] = {}
            recs = []
            for i, e in enumerate(self._entries.values()):
                tensors[f"e{i}.k"] = e.kv.keys
                tensors[f"e{i}.v"] = e.kv.values
                recs.append({"key": asdict(e.key), "last_used": e.last_used, "insert_order": e.insert_order})
            meta = {
                "model_fingerprint": model_fingerprint,
                "adapter_fingerprint": adapter_fingerprint,
                "capacity_bytes": self.capacity_bytes,
                "clock": self._clock,
                "inserted": self._inserted,
                "counters": {
                    "hits": self.hits,
                    "misses": self.misses,
                    "insertions": self.insertions,
                    "evictions": self.evictions,
                },
                "miss_counts": dict(sorted(self.miss_counts.items())),
                "entries": recs,
            }
            return container.write(path, container.KIND_POOL, meta, tensors)

    @classmethod
    def load(cls, path, model_fingerprint: str | None = None, adapter_fingerprint: str | None = None) -> "CachePool":
        """Read a pool file, refusing it when the fingerprints do not match."""
        _, meta, tensors, _ = container.read(path, container.KIND_POOL)
        for label, want, have in (
            ("model", model_fingerprint, meta.get("model_fingerprint")),
            ("adapter", adapter_fingerprint, meta.get("adapter_fingerprint")),
        ):
            if want is not None and want != have:
                raise FingerprintMismatch(
                    f"pool was built for {label} fingerprint {str(have)[:12]}, expected {want[:12]}"
                )
        pool = cls(meta["capacity_bytes"])
        for i, rec in enumerate(meta["entries"]):
            key = CacheKey(**rec["key"])
            if model_fingerprint is not None and key.model_fingerprint != model_fingerprint:
                raise FingerprintMismatch(f"entry {key.schema_id!r} has a stale model fingerprint")
            if adapter_fingerprint is not None and key.adapter_fingerprint != adapter_fingerprint:
                raise FingerprintMismatch(f"entry {key.schema_id!r} has a stale adapter fingerprint")
            kv = SegmentKV(tensors[f"e{i}.k"], tensors[f"e{i}.v"], key.position_base, key.model_fingerprint)
            pool._entries[key] = CacheEntry(key, kv, kv.nbytes, rec["last_used"], rec["insert_order"])
            pool.total_bytes += kv.nbytes
        c = meta["counters"]
        pool.hits, pool.misses = c["hits"], c["misses"]
        pool.insertions, pool.evictions = c["insertions"], c["evictions"]
        pool.miss_counts = Counter(meta.get("miss_counts", {}))
        pool._clock = meta["clock"]
        pool._inserted = meta["inserted"]
        return pool
