"""Byte-level tokenizer with four reserved special ids."""

from __future__ import annotations

BOS = 256
EOS = 257
SEP = 258
PAD = 259
N_SPECIAL = 4
VOCAB_SIZE = 256 + N_SPECIAL

SPECIAL_IDS = frozenset({BOS, EOS, SEP, PAD})


def tokenize(text: bytes | str) -> list[int]:
    """Map raw bytes to ids 0-255. ``str`` input is UTF-8 encoded first."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def detokenize(ids) -> bytes:
    """Inverse of :func:`tokenize`. Special ids carry no bytes and are dropped."""
    return bytes(i for i in ids if i < 256)


def split_on(ids, sep: int = SEP) -> list[list[int]]:
    chunks: list[list[int]] = [[]]
    for i in ids:
        if i == sep:
            chunks.append([])
        else:
            chunks[-1].append(i)
    return chunks
