"""Pluggable generation backends.

The extraction and identification stages prefill through the real model
and then hand the state to a backend. :class:`GreedyBackend` decodes with
the model; :class:`ScriptedGenerator` returns canned token sequences keyed by
query id so pipeline plumbing can be tested independently of model quality.
"""

from __future__ import annotations

from typing import Iterable, Protocol

from .model import PrefillState, decode_greedy
from .tokenizer import SEP, tokenize


class GenerationError(RuntimeError):
    pass


class Backend(Protocol):
    def generate(self, model, state: PrefillState, max_new: int, stop_id: int, query_id: str) -> list[int]: ...


class GreedyBackend:
    def generate(self, model, state, max_new, stop_id, query_id):
        return decode_greedy(model, state, max_new, stop_id)


class ScriptedGenerator:
    """Returns a fixed token sequence per query id, ignoring ``max_new``."""

    def __init__(self, outputs: dict[str, list[int]]):
        self.outputs = {k: list(v) for k, v in outputs.items()}

    def generate(self, model, state, max_new, stop_id, query_id):
        try:
            return list(self.outputs[query_id])
        except KeyError:
            raise GenerationError(f"no scripted output for query {query_id!r}") from None

    @classmethod
    def for_identification(cls, queries: Iterable, registry) -> "ScriptedGenerator":
        """Emit each query's gold schema names separated by SEP."""
        outputs = {}
        for q in queries:
            if q.gold_ids is None:
                raise GenerationError(f"query {q.query_id!r} has no gold schema ids")
            toks: list[int] = []
            for i, sid in enumerate(sorted(q.gold_ids)):
                if i:
                    toks.append(SEP)
                toks.extend(tokenize(registry[sid].name))
            outputs[q.query_id] = toks
        return cls(outputs)

    @classmethod
    def for_extraction(cls, queries: Iterable) -> "ScriptedGenerator":
        """Emit each query's gold records in the line-oriented triple format."""
        from .extract import format_records

        outputs = {}
        for q in queries:
            if q.gold_records is None:
                raise GenerationError(f"query {q.query_id!r} has no gold records")
            outputs[q.query_id] = tokenize(format_records(q.gold_records))
        return cls(outputs)
