"""Assemble models, registry, prompts and queries from a :class:`RunConfig`."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

from .cache import CachePool
from .config import BUILTIN_PREFIX, ConfigError, RunConfig
from .generation import GenerationError, GreedyBackend, ScriptedGenerator
from .identify import (
    DEFAULT_EXTRACT_PROMPT,
    DEFAULT_IDENTIFY_PROMPT,
    MatchedSchemaSet,
    MetaPrompt,
    Query,
    identify_schemas,
    load_queries,
    retrieve_topk,
)
from .lora import MergedModel, Role, load_adapter, merge_adapter, random_adapter
from .model import ModelConfig, ModelWeights
from .schemas import BUILTIN_LIBRARIES, SchemaRegistry, SlotLayout, load_registry
from .workload import Workload, generate_workload


@dataclass
class Runtime:
    config: RunConfig
    base: ModelWeights
    model_i: MergedModel
    model_e: MergedModel
    registry: SchemaRegistry
    m_i: MetaPrompt
    m_e: MetaPrompt
    queries: list[Query]
    workload: Workload | None
    identify_backend: object
    extract_backend: object

    def identify(self, query: Query) -> tuple[MatchedSchemaSet, float]:
        t0 = time.perf_counter()
        cfg = self.config
        if cfg.identification == "BM25":
            matched = retrieve_topk(query, self.registry, cfg.k, cfg.bm25_k1, cfg.bm25_b)
        else:
            matched = identify_schemas(
                self.model_i, self.m_i, query, self.registry, self.identify_backend, cfg.max_new_identify
            )
        return matched, time.perf_counter() - t0

    def new_layout(self) -> SlotLayout:
        return SlotLayout(self.config.slot_capacity, self.config.meta_width, self.registry.template_version)

    def new_pool(self) -> CachePool:
        return CachePool(self.config.cache_capacity_bytes)


def load_library(source: str, template_version: str = "v1") -> SchemaRegistry:
    if source.startswith(BUILTIN_PREFIX):
        reg = BUILTIN_LIBRARIES[source[len(BUILTIN_PREFIX):]]()
        if reg.template_version != template_version:
            reg = SchemaRegistry(list(reg), template_version)
        return reg
    return load_registry(source, template_version)


def _meta(path: str | None, default: MetaPrompt) -> MetaPrompt:
    if path is None:
        return default
    return MetaPrompt(default.role, Path(path).read_bytes(), version=f"file:{Path(path).name}")


def build_models(cfg: RunConfig) -> tuple[ModelWeights, MergedModel, MergedModel]:
    """Base weights plus the merged identification and extraction models."""
    base = ModelWeights.load(cfg.weights) if cfg.weights else ModelWeights.initialize(ModelConfig(init_seed=cfg.init_seed))
    if cfg.adapter_identify:
        ad_i = load_adapter(cfg.adapter_identify)
    else:
        ad_i = random_adapter(base.config, "identify", cfg.adapter_seed_identify, cfg.adapter_rank,
                              cfg.adapter_alpha, role=Role.IDENTIFY)
    if cfg.adapter_extract:
        ad_e = load_adapter(cfg.adapter_extract)
    else:
        ad_e = random_adapter(base.config, "extract", cfg.adapter_seed_extract, cfg.adapter_rank,
                              cfg.adapter_alpha, role=Role.EXTRACT)
    return base, merge_adapter(base, ad_i, Role.IDENTIFY), merge_adapter(base, ad_e, Role.EXTRACT)


def build_runtime(cfg: RunConfig) -> Runtime:
    cfg.validate()
    base, model_i, model_e = build_models(cfg)
    registry = load_library(cfg.registry, cfg.template_version)

    workload = None
    if cfg.dataset:
        queries = load_queries(cfg.dataset)
        if not queries:
            raise ConfigError([f"dataset {cfg.dataset} holds no queries"])
        unknown = sorted({sid for q in queries for sid in (q.gold_ids or ()) if sid not in registry})
        if unknown:
            raise ConfigError([f"dataset gold ids not in registry: {unknown}"])
    else:
        workload = generate_workload(registry, cfg.n_queries, cfg.skew, cfg.workload_seed, cfg.schema_pool_size)
        queries = workload.queries

    try:
        if cfg.identify_backend == "scripted" and cfg.identification == "MODEL":
            ident_backend = ScriptedGenerator.for_identification(queries, registry)
        else:
            ident_backend = GreedyBackend()
        if cfg.extract_backend == "scripted":
            extract_backend = ScriptedGenerator.for_extraction(queries)
        else:
            extract_backend = GreedyBackend()
    except GenerationError as exc:
        raise ConfigError([f"scripted backend: {exc}"]) from None

    return Runtime(
        config=cfg,
        base=base,
        model_i=model_i,
        model_e=model_e,
        registry=registry,
        m_i=_meta(cfg.meta_identify, DEFAULT_IDENTIFY_PROMPT),
        m_e=_meta(cfg.meta_extract, DEFAULT_EXTRACT_PROMPT),
        queries=queries,
        workload=workload,
        identify_backend=ident_backend,
        extract_backend=extract_backend,
    )
