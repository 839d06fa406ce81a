"""Small deterministic decoder-only transformer with segment-structured prefill.

The prefill takes a list of :class:`Segment` objects, each carrying its own
absolute position base and a visibility class:

* ``META`` attends causally within itself.
* ``SCHEMA`` attends to every META token and causally within its own span,
  never to another SCHEMA segment.
* ``QUERY`` attends to every earlier segment and causally within itself.

Because a SCHEMA segment only ever sees META plus itself, its keys and values
are a pure function of (weights, META tokens, its own tokens, its position
base) and can be cached and injected into later prefills verbatim.

Everything is float32 numpy. Context key/value tensors are always assembled in
ascending position order so the summation order inside attention never
depends on how the caller listed the segments.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from . import container
from .tokenizer import VOCAB_SIZE

_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    vocab_size: int = VOCAB_SIZE
    max_position: int = 4096
    rope_base: float = 10000.0
    init_seed: int = 42

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff, self.vocab_size) < 1:
            raise ValueError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ValueError(f"head_dim {self.head_dim} must be even for rotary pairs")
        if self.max_position < 1:
            raise ValueError("max_position must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Tensor names and shapes in the fixed serialization order.

        Projection matrices are stored ``(out_features, in_features)``.
        """
        d, f = self.d_model, self.d_ff
        shapes: dict[str, tuple[int, ...]] = {"embed": (self.vocab_size, d)}
        for i in range(self.n_layers):
            p = f"layers.{i}."
            shapes[p + "attn_norm"] = (d,)
            shapes[p + "wq"] = (d, d)
            shapes[p + "wk"] = (d, d)
            shapes[p + "wv"] = (d, d)
            shapes[p + "wo"] = (d, d)
            shapes[p + "mlp_norm"] = (d,)
            shapes[p + "w_up"] = (f, d)
            shapes[p + "w_down"] = (d, f)
        shapes["final_norm"] = (d,)
        shapes["lm_head"] = (self.vocab_size, d)
        return shapes


class ModelWeights:
    """Immutable parameter set for one model.

    Arrays are made read-only on construction, so two weight sets may share
    untouched arrays safely.
    """

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]):
        shapes = config.tensor_shapes()
        missing = set(shapes) - set(tensors)
        extra = set(tensors) - set(shapes)
        if missing or extra:
            raise ValueError(f"tensor set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        ordered: dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            arr = np.asarray(tensors[name])
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {shape}")
            if arr.dtype != np.float32:
                arr = arr.astype(np.float32)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite entries")
            if arr.flags.writeable:
                arr = arr.copy()
                arr.flags.writeable = False
            ordered[name] = arr
        self.config = config
        self.tensors = ordered

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def linear(self, name: str, x: np.ndarray) -> np.ndarray:
        return x @ self.tensors[name].T

    def _meta(self) -> dict:
        return {"config": asdict(self.config)}

    @cached_property
    def fingerprint(self) -> str:
        return container.content_hash(self._meta(), self.tensors)

    @classmethod
    def initialize(cls, config: ModelConfig | None = None) -> "ModelWeights":
        """normal(0, 0.02) matrices and unit norm gains, drawn from ``config.init_seed``."""
        config = config or ModelConfig()
        rng = np.random.default_rng(config.init_seed)
        tensors = {}
        for name, shape in config.tensor_shapes().items():
            if name.endswith("norm"):
                tensors[name] = np.ones(shape, dtype=np.float32)
            else:
                tensors[name] = rng.normal(0.0, 0.02, size=shape).astype(np.float32)
        return cls(config, tensors)

    def save(self, path) -> str:
        return container.write(path, container.KIND_WEIGHTS, self._meta(), self.tensors)

    @classmethod
    def load(cls, path) -> "ModelWeights":
        _, meta, tensors, digest = container.read(path, container.KIND_WEIGHTS)
        try:
            config = ModelConfig(**meta["config"])
        except (KeyError, TypeError) as exc:
            raise container.ContainerError(f"bad config block: {exc}") from None
        weights = cls(config, tensors)
        if weights.fingerprint != digest:
            raise container.ContainerError("weights fingerprint does not match file digest")
        return weights


# -- rotary positions -------------------------------------------------------

def rope_frequencies(head_dim: int, rope_base: float) -> np.ndarray:
    j = np.arange(head_dim // 2, dtype=np.float64)
    return rope_base ** (-2.0 * j / head_dim)


def rope_apply(vec, position: int, rope_base: float = 10000.0) -> np.ndarray:
    """Rotate each adjacent pair ``(x, y)`` of ``vec`` by ``position * w_j``."""
    vec = np.asarray(vec)
    if vec.ndim != 1 or vec.shape[0] % 2:
        raise ValueError(f"rope_apply needs an even-length vector, got shape {vec.shape}")
    if position == 0:
        return vec.copy()
    ang = position * rope_frequencies(vec.shape[0], rope_base)
    cos, sin = np.cos(ang), np.sin(ang)
    x, y = vec[0::2].astype(np.float64), vec[1::2].astype(np.float64)
    out = np.empty(vec.shape, dtype=np.float64)
    out[0::2] = x * cos - y * sin
    out[1::2] = x * sin + y * cos
    return out.astype(vec.dtype if vec.dtype.kind == "f" else np.float64)


class _RopeTable:
    def __init__(self, config: ModelConfig):
        ang = np.arange(config.max_position, dtype=np.float64)[:, None] * rope_frequencies(
            config.head_dim, config.rope_base
        )[None, :]
        self.cos = np.cos(ang).astype(np.float32)
        self.sin = np.sin(ang).astype(np.float32)

    def apply(self, x: np.ndarray, positions: np.ndarray) -> np.ndarray:
        # x: (H, T, hd)
        cos, sin = self.cos[positions], self.sin[positions]
        a, b = x[..., 0::2], x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = a * cos - b * sin
        out[..., 1::2] = a * sin + b * cos
        return out


_ROPE_CACHE: dict[tuple, _RopeTable] = {}


def _rope_table(config: ModelConfig) -> _RopeTable:
    key = (config.head_dim, config.rope_base, config.max_position)
    table = _ROPE_CACHE.get(key)
    if table is None:
        table = _ROPE_CACHE[key] = _RopeTable(config)
    return table


# -- segments and KV --------------------------------------------------------

class Visibility(str, enum.Enum):
    META = "META"
    SCHEMA = "SCHEMA"
    QUERY = "QUERY"


@dataclass(frozen=True)
class Segment:
    tokens: tuple[int, ...]
    position_base: int
    visibility: Visibility

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "visibility", Visibility(self.visibility))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def end(self) -> int:
        return self.position_base + len(self.tokens)


@dataclass(frozen=True, eq=False)
class SegmentKV:
    """Keys (post-rotary) and values for one span, shape ``(layers, heads, T, head_dim)``."""

    keys: np.ndarray
    values: np.ndarray
    position_base: int
    fingerprint: str

    def __post_init__(self):
        if self.keys.shape != self.values.shape or self.keys.ndim != 4:
            raise ValueError(f"key/value shape mismatch {self.keys.shape} vs {self.values.shape}")
        for arr in (self.keys, self.values):
            arr.flags.writeable = False

    @property
    def n_tokens(self) -> int:
        return self.keys.shape[2]

    @property
    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes


@dataclass
class PrefillState:
    segments: list[SegmentKV]
    next_position: int
    logits: np.ndarray | None
    fingerprint: str
    computed_tokens: int = 0
    computed: list[bool] = field(default_factory=list)


class PrefillError(ValueError):
    pass


def _resolve(model) -> tuple[ModelWeights, str]:
    if isinstance(model, ModelWeights):
        return model, model.fingerprint
    return model.weights, model.fingerprint


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + np.float32(_EPS)) * gain


def _gelu(x: np.ndarray) -> np.ndarray:
    c = np.float32(math.sqrt(2.0 / math.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


def _softmax(s: np.ndarray) -> np.ndarray:
    s = s - np.max(s, axis=-1, keepdims=True)
    e = np.exp(s)
    return e / np.sum(e, axis=-1, keepdims=True)


def _run_tokens(weights: ModelWeights, tokens, positions: np.ndarray, ctx_k, ctx_v):
    """Run a contiguous span through every layer.

    ``ctx_k[l]``/``ctx_v[l]`` are ``(H, Tc, hd)`` context tensors the span may
    attend to in full (or ``None``). Returns per-layer keys, values and the
    final hidden states.
    """
    cfg = weights.config
    L, H, hd = cfg.n_layers, cfg.n_heads, cfg.head_dim
    T = len(tokens)
    rope = _rope_table(cfg)
    scale = np.float32(1.0 / math.sqrt(hd))
    x = weights["embed"][np.asarray(tokens, dtype=np.int64)]
    mask = np.triu(np.full((T, T), -np.inf, dtype=np.float32), k=1)
    keys = np.empty((L, H, T, hd), dtype=np.float32)
    values = np.empty((L, H, T, hd), dtype=np.float32)
    for layer in range(L):
        p = f"layers.{layer}."
        h = _rmsnorm(x, weights[p + "attn_norm"])
        q = weights.linear(p + "wq", h).reshape(T, H, hd).transpose(1, 0, 2)
        k = weights.linear(p + "wk", h).reshape(T, H, hd).transpose(1, 0, 2)
        v = weights.linear(p + "wv", h).reshape(T, H, hd).transpose(1, 0, 2)
        q = rope.apply(q, positions)
        k = rope.apply(k, positions)
        keys[layer] = k
        values[layer] = v
        if ctx_k is not None:
            K = np.concatenate([ctx_k[layer], k], axis=1)
            V = np.concatenate([ctx_v[layer], v], axis=1)
        else:
            K, V = k, v
        scores = (q @ K.transpose(0, 2, 1)) * scale
        scores[:, :, K.shape[1] - T :] += mask
        attn = _softmax(scores) @ V
        x = x + weights.linear(p + "wo", attn.transpose(1, 0, 2).reshape(T, cfg.d_model))
        h = _rmsnorm(x, weights[p + "mlp_norm"])
        x = x + weights.linear(p + "w_down", _gelu(weights.linear(p + "w_up", h)))
    return keys, values, x


def _logits(weights: ModelWeights, hidden: np.ndarray) -> np.ndarray:
    return weights.linear("lm_head", _rmsnorm(hidden, weights["final_norm"]))


def _stack_context(kvs: Sequence[SegmentKV]):
    if not kvs:
        return None, None
    if len(kvs) == 1:
        return kvs[0].keys, kvs[0].values
    return (
        np.concatenate([s.keys for s in kvs], axis=2),
        np.concatenate([s.values for s in kvs], axis=2),
    )


def prefill(
    model,
    segments: Sequence[Segment],
    precomputed: Sequence[SegmentKV | None] | Mapping[int, SegmentKV] | None = None,
    *,
    require_query: bool = True,
) -> tuple[PrefillState, np.ndarray | None]:
    """Build KV state for ``segments`` under the visibility mask.

    ``precomputed`` supplies KV for some segments (aligned by index, or a
    mapping from segment index); those are injected verbatim and not
    recomputed. Returns the state and the logits at the final QUERY token.
    """
    weights, fp = _resolve(model)
    cfg = weights.config
    n = len(segments)
    if isinstance(precomputed, Mapping):
        supplied = [precomputed.get(i) for i in range(n)]
    elif precomputed is None:
        supplied = [None] * n
    else:
        supplied = list(precomputed)
        if len(supplied) != n:
            raise PrefillError("precomputed list must align with segments")

    if n == 0:
        raise PrefillError("no segments")
    by_pos = sorted(range(n), key=lambda i: segments[i].position_base)
    for i in by_pos:
        s = segments[i]
        if len(s) == 0:
            raise PrefillError(f"segment {i} is empty")
        if s.position_base < 0 or s.end > cfg.max_position:
            raise PrefillError(f"segment {i} positions [{s.position_base},{s.end}) outside [0,{cfg.max_position})")
    for a, b in zip(by_pos, by_pos[1:]):
        if segments[a].end > segments[b].position_base:
            raise PrefillError(f"segments {a} and {b} have overlapping position ranges")

    metas = [i for i in range(n) if segments[i].visibility is Visibility.META]
    queries = [i for i in range(n) if segments[i].visibility is Visibility.QUERY]
    schemas = [i for i in range(n) if segments[i].visibility is Visibility.SCHEMA]
    if len(metas) > 1:
        raise PrefillError("at most one META segment is allowed")
    if len(queries) > 1:
        raise PrefillError("at most one QUERY segment is allowed")
    if not queries and require_query:
        raise PrefillError("QUERY segment absent")
    if metas and by_pos[0] != metas[0]:
        raise PrefillError("META segment must precede every other segment")
    if queries and by_pos[-1] != queries[0]:
        raise PrefillError("QUERY segment must follow every other segment")

    for i, kv in enumerate(supplied):
        if kv is None:
            continue
        s = segments[i]
        if s.visibility is Visibility.QUERY:
            raise PrefillError("QUERY segment cannot be precomputed")
        if kv.position_base != s.position_base:
            raise PrefillError(
                f"segment {i}: SegmentKV computed at position {kv.position_base}, segment is at {s.position_base}"
            )
        if kv.fingerprint != fp:
            raise PrefillError(f"segment {i}: SegmentKV fingerprint does not match model")
        if kv.n_tokens != len(s) or kv.keys.shape[:2] != (cfg.n_layers, cfg.n_heads):
            raise PrefillError(f"segment {i}: SegmentKV shape {kv.keys.shape} does not fit segment")

    result: list[SegmentKV | None] = list(supplied)
    computed = [kv is None for kv in supplied]
    n_computed = 0

    def compute(i, ctx):
        nonlocal n_computed
        s = segments[i]
        pos = np.arange(s.position_base, s.end)
        ck, cv = _stack_context(ctx)
        k, v, hidden = _run_tokens(weights, s.tokens, pos, ck, cv)
        result[i] = SegmentKV(k, v, s.position_base, fp)
        n_computed += len(s)
        return hidden

    if metas and result[metas[0]] is None:
        compute(metas[0], [])
    meta_ctx = [result[metas[0]]] if metas else []
    for i in sorted(schemas, key=lambda j: segments[j].position_base):
        if result[i] is None:
            compute(i, meta_ctx)

    logits = None
    if queries:
        q = queries[0]
        earlier = [result[i] for i in by_pos if i != q]
        hidden = compute(q, earlier)
        logits = _logits(weights, hidden[-1])

    ordered = [result[i] for i in by_pos]
    state = PrefillState(
        segments=ordered,
        next_position=max(s.end for s in segments),
        logits=logits,
        fingerprint=fp,
        computed_tokens=n_computed,
        computed=[computed[i] for i in by_pos],
    )
    return state, logits


def decode_greedy(model, state: PrefillState, max_new: int, stop_id: int) -> list[int]:
    """Argmax decoding from a prefilled state; the stop token is not returned.

    ``state`` is not modified, so decoding the same state twice gives the
    same tokens. np.argmax returns the first maximum, which is the lowest
    token id on ties.
    """
    if max_new <= 0:
        return []
    weights, fp = _resolve(model)
    if state.fingerprint != fp:
        raise PrefillError("PrefillState was produced by a different model")
    if state.logits is None:
        raise PrefillError("PrefillState has no QUERY logits to decode from")
    cfg = weights.config
    L, H, hd = cfg.n_layers, cfg.n_heads, cfg.head_dim
    rope = _rope_table(cfg)
    scale = np.float32(1.0 / math.sqrt(hd))

    n_ctx = sum(s.n_tokens for s in state.segments)
    cap = n_ctx + max_new
    kbuf = np.empty((L, H, cap, hd), dtype=np.float32)
    vbuf = np.empty((L, H, cap, hd), dtype=np.float32)
    off = 0
    for s in state.segments:
        kbuf[:, :, off : off + s.n_tokens] = s.keys
        vbuf[:, :, off : off + s.n_tokens] = s.values
        off += s.n_tokens

    out: list[int] = []
    logits = state.logits
    pos = state.next_position
    n = n_ctx
    for step in range(max_new):
        tok = int(np.argmax(logits))
        if tok == stop_id:
            break
        out.append(tok)
        if step == max_new - 1 or pos >= cfg.max_position:
            break
        x = weights["embed"][tok][None, :]
        p_arr = np.array([pos])
        for layer in range(L):
            p = f"layers.{layer}."
            h = _rmsnorm(x, weights[p + "attn_norm"])
            q = rope.apply(weights.linear(p + "wq", h).reshape(1, H, hd).transpose(1, 0, 2), p_arr)
            k = rope.apply(weights.linear(p + "wk", h).reshape(1, H, hd).transpose(1, 0, 2), p_arr)
            v = weights.linear(p + "wv", h).reshape(1, H, hd).transpose(1, 0, 2)
            kbuf[layer, :, n] = k[:, 0]
            vbuf[layer, :, n] = v[:, 0]
            K, V = kbuf[layer, :, : n + 1], vbuf[layer, :, : n + 1]
            scores = (q @ K.transpose(0, 2, 1)) * scale
            attn = _softmax(scores) @ V
            x = x + weights.linear(p + "wo", attn.transpose(1, 0, 2).reshape(1, cfg.d_model))
            h = _rmsnorm(x, weights[p + "mlp_norm"])
            x = x + weights.linear(p + "w_down", _gelu(weights.linear(p + "w_up", h)))
        logits = _logits(weights, x[0])
        n += 1
        pos += 1
    return out


def forward(model, tokens, position_base: int = 0) -> np.ndarray:
    """Plain causal pass over one contiguous span; logits for every position."""
    weights, _ = _resolve(model)
    pos = np.arange(position_base, position_base + len(tokens))
    _, _, hidden = _run_tokens(weights, tokens, pos, None, None)
    return _logits(weights, hidden)
