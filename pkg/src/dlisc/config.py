"""Run configuration shared by the CLI and the benchmark.

A config file is a single JSON object whose keys are the field names of
:class:`RunConfig`; unknown keys are rejected. Relative paths resolve against
the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .cache import DEFAULT_CAPACITY_BYTES
from .extract import ExtractionMode
from .schemas import BUILTIN_LIBRARIES, TEMPLATE_VERSIONS

BUILTIN_PREFIX = "builtin:"
_PATH_KEYS = ("weights", "adapter_identify", "adapter_extract", "meta_identify", "meta_extract", "dataset")


class ConfigError(ValueError):
    """Carries every validation problem found, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class RunConfig:
    # model and adapters; unset paths mean "generate from the seed"
    weights: str | None = None
    init_seed: int = 42
    adapter_identify: str | None = None
    adapter_extract: str | None = None
    adapter_seed_identify: int = 1
    adapter_seed_extract: int = 2
    adapter_rank: int = 8
    adapter_alpha: float = 16.0

    registry: str = "builtin:crossner_ai"
    template_version: str = "v1"
    meta_identify: str | None = None
    meta_extract: str | None = None

    # queries: a dataset file, or a generated workload
    dataset: str | None = None
    n_queries: int = 100
    schema_pool_size: int | None = 10
    skew: float = 1.1
    workload_seed: int = 7

    identification: str = "MODEL"
    identify_backend: str = "scripted"
    extract_backend: str = "greedy"
    modes: list[str] = field(default_factory=lambda: ["VANILLA", "CACHED"])
    k: int = 5
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    cache_capacity_bytes: int = DEFAULT_CAPACITY_BYTES
    slot_capacity: int = 2048
    meta_width: int = 64
    max_new_identify: int = 32
    max_new_extract: int = 16

    output_dir: str | None = None
    save_pool: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        cfg = cls(**data)
        if base_dir is not None:
            for name in _PATH_KEYS + ("output_dir",):
                val = getattr(cfg, name)
                if val and not Path(val).is_absolute():
                    setattr(cfg, name, str(base_dir / val))
            if cfg.registry and not cfg.registry.startswith(BUILTIN_PREFIX) and not Path(cfg.registry).is_absolute():
                cfg.registry = str(base_dir / cfg.registry)
        return cfg

    def problems(self, *, need_output: bool = False) -> list[str]:
        out = []
        for name in _PATH_KEYS:
            val = getattr(self, name)
            if val and not Path(val).is_file():
                out.append(f"{name}: file not found: {val}")
        if self.registry.startswith(BUILTIN_PREFIX):
            lib = self.registry[len(BUILTIN_PREFIX):]
            if lib not in BUILTIN_LIBRARIES:
                out.append(f"registry: unknown builtin library {lib!r} (have {sorted(BUILTIN_LIBRARIES)})")
        elif not Path(self.registry).is_file():
            out.append(f"registry: file not found: {self.registry}")
        if self.template_version not in TEMPLATE_VERSIONS:
            out.append(f"template_version: unknown {self.template_version!r}")
        if self.dataset is None and self.n_queries < 1:
            out.append("n_queries must be >= 1")
        if self.schema_pool_size is not None and self.schema_pool_size < 1:
            out.append("schema_pool_size must be >= 1")
        if self.skew < 0:
            out.append("skew must be >= 0")
        if self.identification not in ("MODEL", "BM25"):
            out.append(f"identification must be MODEL or BM25, got {self.identification!r}")
        for name in ("identify_backend", "extract_backend"):
            if getattr(self, name) not in ("greedy", "scripted"):
                out.append(f"{name} must be greedy or scripted, got {getattr(self, name)!r}")
        if not self.modes:
            out.append("modes must list at least one extraction mode")
        for m in self.modes:
            if m not in ExtractionMode.__members__:
                out.append(f"unknown extraction mode {m!r}")
        if len(set(self.modes)) != len(self.modes):
            out.append("modes contains duplicates")
        if self.k < 1:
            out.append("k must be >= 1")
        if self.cache_capacity_bytes < 1:
            out.append("cache_capacity_bytes must be >= 1")
        if not 0 < self.meta_width <= self.slot_capacity:
            out.append("meta_width must be in (0, slot_capacity]")
        if self.adapter_rank < 1:
            out.append("adapter_rank must be >= 1")
        if self.max_new_identify < 0 or self.max_new_extract < 0:
            out.append("decode limits must be >= 0")
        if self.save_pool and "CACHED" not in self.modes:
            out.append("save_pool requires CACHED in modes")
        if need_output and not self.output_dir:
            out.append("output_dir is required")
        return out

    def validate(self, *, need_output: bool = False) -> "RunConfig":
        problems = self.problems(need_output=need_output)
        if problems:
            raise ConfigError(problems)
        return self


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config (optional) and apply non-``None`` overrides on top.

    Override paths are taken as given (relative to the working directory).
    """
    data: dict = {}
    base_dir = None
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config {path} is not valid JSON: {exc}"]) from None
        if not isinstance(data, dict):
            raise ConfigError([f"config {path} must hold a JSON object"])
        base_dir = path.parent
    try:
        cfg = RunConfig.from_dict(data, base_dir)
    except TypeError as exc:
        raise ConfigError([str(exc)]) from None
    known = {f.name for f in fields(RunConfig)}
    bad = [f"unknown override {k!r}" for k in (overrides or {}) if k not in known]
    if bad:
        raise ConfigError(bad)
    for k, v in (overrides or {}).items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg
