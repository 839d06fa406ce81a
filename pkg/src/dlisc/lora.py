"""LoRA adapters and merging them into base weights."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from . import container
from .model import ModelConfig, ModelWeights


class Role(str, enum.Enum):
    IDENTIFY = "IDENTIFY"
    EXTRACT = "EXTRACT"


class AdapterError(ValueError):
    pass


def default_targets(config: ModelConfig) -> list[str]:
    """Query and value projections of every layer."""
    return [f"layers.{i}.{m}" for i in range(config.n_layers) for m in ("wq", "wv")]


class LoraAdapter:
    """Low-rank deltas ``(A, B)`` per target matrix.

    ``A`` is ``rank x in_features`` and ``B`` is ``out_features x rank``; the
    merged matrix is ``W + (alpha / rank) * B @ A``.
    """

    def __init__(
        self,
        adapter_id: str,
        factors: Mapping[str, tuple[np.ndarray, np.ndarray]],
        rank: int,
        alpha: float,
        role: Role | str | None = None,
    ):
        if int(rank) < 1:
            raise AdapterError(f"adapter {adapter_id!r}: rank must be >= 1, got {rank}")
        if not factors:
            raise AdapterError(f"adapter {adapter_id!r}: empty target set")
        frozen = {}
        for name in sorted(factors):
            a, b = factors[name]
            a = np.array(a, dtype=np.float32)
            b = np.array(b, dtype=np.float32)
            if a.ndim != 2 or b.ndim != 2 or a.shape[0] != rank or b.shape[1] != rank:
                raise AdapterError(
                    f"adapter {adapter_id!r}, target {name}: A {a.shape} / B {b.shape} do not share rank {rank}"
                )
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise AdapterError(f"adapter {adapter_id!r}, target {name}: non-finite entries")
            a.flags.writeable = False
            b.flags.writeable = False
            frozen[name] = (a, b)
        self.adapter_id = adapter_id
        self.factors = frozen
        self.rank = int(rank)
        self.alpha = float(alpha)
        self.role = Role(role) if role is not None else None

    @property
    def targets(self) -> list[str]:
        return list(self.factors)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def _meta(self) -> dict:
        return {
            "adapter_id": self.adapter_id,
            "role": self.role.value if self.role else None,
            "rank": self.rank,
            "alpha": self.alpha,
            "targets": self.targets,
        }

    def _tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, (a, b) in self.factors.items():
            out[name + ".A"] = a
            out[name + ".B"] = b
        return out

    @cached_property
    def fingerprint(self) -> str:
        return container.content_hash(self._meta(), self._tensors())

    def __eq__(self, other):
        if not isinstance(other, LoraAdapter):
            return NotImplemented
        return self.fingerprint == other.fingerprint

    def __hash__(self):
        return hash(self.fingerprint)

    def __repr__(self):
        return f"LoraAdapter({self.adapter_id!r}, rank={self.rank}, alpha={self.alpha}, targets={len(self.factors)})"

    def check_conforms(self, base: ModelWeights) -> None:
        for name, (a, b) in self.factors.items():
            if name not in base.tensors:
                raise AdapterError(f"adapter {self.adapter_id!r}: unknown target {name!r}")
            w = base[name]
            if w.ndim != 2 or a.shape[1] != w.shape[1] or b.shape[0] != w.shape[0]:
                raise AdapterError(
                    f"adapter {self.adapter_id!r}, target {name}: B@A is {b.shape[0]}x{a.shape[1]}, "
                    f"base matrix is {w.shape}"
                )

    def save(self, path) -> str:
        return container.write(path, container.KIND_ADAPTER, self._meta(), self._tensors())


def load_adapter(path) -> LoraAdapter:
    """Read an adapter file, verifying its hash, shapes and rank."""
    _, meta, tensors, digest = container.read(path, container.KIND_ADAPTER)
    try:
        factors = {t: (tensors[t + ".A"], tensors[t + ".B"]) for t in meta["targets"]}
        adapter = LoraAdapter(meta["adapter_id"], factors, meta["rank"], meta["alpha"], meta.get("role"))
    except KeyError as exc:
        raise container.ContainerError(f"adapter file is missing {exc}") from None
    if adapter.fingerprint != digest:
        raise AdapterError("adapter fingerprint does not match stored content hash")
    return adapter


def random_adapter(
    config: ModelConfig,
    adapter_id: str,
    seed: int,
    rank: int = 8,
    alpha: float = 16.0,
    std: float = 0.01,
    targets: Iterable[str] | None = None,
    role: Role | str | None = None,
) -> LoraAdapter:
    """Synthetic adapter with every A and B entry drawn from normal(0, std)."""
    shapes = config.tensor_shapes()
    rng = np.random.default_rng(seed)
    factors = {}
    for name in targets if targets is not None else default_targets(config):
        out_f, in_f = shapes[name]
        a = rng.normal(0.0, std, size=(rank, in_f)).astype(np.float32)
        b = rng.normal(0.0, std, size=(out_f, rank)).astype(np.float32)
        factors[name] = (a, b)
    return LoraAdapter(adapter_id, factors, rank, alpha, role)


@dataclass(frozen=True, eq=False)
class MergedModel:
    weights: ModelWeights
    base_fingerprint: str
    adapter_fingerprint: str
    role: Role | None
    fingerprint: str

    @property
    def config(self) -> ModelConfig:
        return self.weights.config


def merged_fingerprint(base_fingerprint: str, adapter_fingerprint: str) -> str:
    return hashlib.sha256(f"merge:{base_fingerprint}:{adapter_fingerprint}".encode()).hexdigest()


def merge_adapter(base: ModelWeights, adapter: LoraAdapter, role: Role | str | None = None) -> MergedModel:
    """Materialize ``W + (alpha/r) B A`` for each target; base is untouched."""
    adapter.check_conforms(base)
    scale = np.float32(adapter.scale)
    tensors = dict(base.tensors)
    for name, (a, b) in adapter.factors.items():
        delta = (b @ a) * scale
        if np.any(delta):
            tensors[name] = base[name] + delta
    weights = ModelWeights(base.config, tensors)
    role = Role(role) if role is not None else adapter.role
    return MergedModel(
        weights=weights,
        base_fingerprint=base.fingerprint,
        adapter_fingerprint=adapter.fingerprint,
        role=role,
        fingerprint=merged_fingerprint(base.fingerprint, adapter.fingerprint),
    )


class DynamicLoraWeights(ModelWeights):
    """Base weights plus a low-rank delta applied on the fly.

    Computes ``x W^T + scale * (x A^T) B^T`` without ever forming ``B A``.
    Used only as an independent check on :func:`merge_adapter`.
    """

    def __init__(self, base: ModelWeights, adapter: LoraAdapter):
        adapter.check_conforms(base)
        self.config = base.config
        self.tensors = base.tensors
        self.adapter = adapter
        self._base_fp = base.fingerprint

    def linear(self, name: str, x: np.ndarray) -> np.ndarray:
        y = x @ self.tensors[name].T
        if name in self.adapter.factors:
            a, b = self.adapter.factors[name]
            y = y + np.float32(self.adapter.scale) * ((x @ a.T) @ b.T)
        return y

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha256(f"dynamic:{self._base_fp}:{self.adapter.fingerprint}".encode()).hexdigest()
