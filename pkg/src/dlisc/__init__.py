"""Two-stage on-device information extraction with cached schema prefixes."""

from .cache import CacheKey, CachePool
from .config import RunConfig, load_config
from .extract import ExtractionMode, ExtractionResult, extract
from .identify import MatchedSchemaSet, MetaPrompt, Query, identify_schemas, retrieve_topk
from .lora import LoraAdapter, MergedModel, merge_adapter
from .model import ModelConfig, ModelWeights, Segment, Visibility, decode_greedy, prefill
from .schemas import Schema, SchemaRegistry, SlotLayout

__all__ = [
    "CacheKey", "CachePool", "RunConfig", "load_config", "ExtractionMode", "ExtractionResult",
    "extract", "MatchedSchemaSet", "MetaPrompt", "Query", "identify_schemas", "retrieve_topk",
    "LoraAdapter", "MergedModel", "merge_adapter", "ModelConfig", "ModelWeights", "Segment",
    "Visibility", "decode_greedy", "prefill", "Schema", "SchemaRegistry", "SlotLayout",
]
__version__ = "0.1.0"
