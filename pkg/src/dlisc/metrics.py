"""Identification precision and extraction P/R/F1, both micro-averaged."""

from __future__ import annotations

from typing import Iterable, Sequence


def identification_precision(pred: Sequence[Iterable[str]], gold: Sequence[Iterable[str]]) -> float:
    """sum |pred_i & gold_i| / sum |pred_i|, or 0.0 when nothing was predicted."""
    if len(pred) != len(gold):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(gold)} gold sets")
    hit = total = 0
    for p, g in zip(pred, gold):
        p, g = set(p), set(g)
        hit += len(p & g)
        total += len(p)
    return hit / total if total else 0.0


def _norm(records) -> set[tuple[str, str, str]]:
    return {tuple(str(x).strip() for x in r) for r in records}


def extraction_f1(pred, gold) -> tuple[float, float, float]:
    """Micro precision, recall and F1 over (schema_id, field, value) triples.

    ``pred`` and ``gold`` are aligned per-sample lists of records. A flat
    list of triples is treated as a single sample.
    """
    pred, gold = list(pred), list(gold)
    if _is_flat(pred) or _is_flat(gold):
        pred, gold = [pred], [gold]
    elif not pred:
        pred = [[] for _ in gold]
    elif not gold:
        gold = [[] for _ in pred]
    if len(pred) != len(gold):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(gold)} samples")
    tp = n_pred = n_gold = 0
    for p, g in zip(pred, gold):
        p, g = _norm(p), _norm(g)
        tp += len(p & g)
        n_pred += len(p)
        n_gold += len(g)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _is_flat(x: list) -> bool:
    if not x:
        return False
    r = x[0]
    return isinstance(r, (tuple, list)) and len(r) == 3 and all(isinstance(v, str) for v in r)
