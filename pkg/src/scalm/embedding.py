"""Text embedding providers.

``local`` is a dependency-free feature-hashing embedder (lowercase, split on
non-alphanumerics, FNV-1a 64 bucket counts, L2 normalization).  ``remote``
speaks the common ``{"model", "input"} -> {"data": [{"embedding"}]}`` JSON
shape.  Every provider returns unit-norm vectors, so cosine similarity is a
plain dot product downstream.
"""

from __future__ import annotations

import functools
import math
import os
import re
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import httpx

from . import _http
from ._util import fnv1a_64
from .errors import BatchError, DimensionMismatch, EmptyInput, RemoteError, ZeroNorm

_SPLIT = re.compile(r"[\W_]+")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    provider_id: str = "local"

    def __post_init__(self):
        if not self.values:
            raise ValueError("empty embedding")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding contains non-finite values")

    @property
    def dim(self) -> int:
        return len(self.values)

    def norm(self) -> float:
        return math.sqrt(math.fsum(v * v for v in self.values))


def normalize(values: Sequence[float], provider_id: str = "local") -> EmbeddingVector:
    norm = math.sqrt(math.fsum(float(v) * float(v) for v in values))
    if norm == 0.0:
        raise ZeroNorm("cannot normalize a zero vector")
    return EmbeddingVector(tuple(float(v) / norm for v in values), provider_id)


@dataclass(frozen=True)
class EmbeddingProviderConfig:
    provider_id: str = "local"
    dim: int = 256
    endpoint_url: str | None = None
    model_name: str | None = None
    api_key_env: str | None = None
    timeout_ms: int = 30_000
    max_retries: int = 5
    max_in_flight: int = 4

    def __post_init__(self):
        if self.dim < 8:
            raise ValueError("embedding dim must be >= 8")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")

    def header(self) -> dict:
        """Identity of the embedder, recorded alongside a knowledge base."""
        return {"provider_id": self.provider_id, "dim": self.dim, "model_name": self.model_name}


def hash_tokens(text: str) -> list[str]:
    return [t for t in _SPLIT.split(text.lower()) if t]


class LocalEmbedder:
    """Deterministic feature-hashing embedder."""

    def __init__(self, config: EmbeddingProviderConfig):
        self.config = config

    def embed(self, text: str) -> EmbeddingVector:
        _check_text(text)
        dim = self.config.dim
        counts = [0] * dim
        for token, n in Counter(hash_tokens(text)).items():
            counts[fnv1a_64(token.encode("utf-8")) % dim] += n
        if not any(counts):
            raise EmptyInput("text has no alphanumeric tokens")
        return normalize(counts, self.config.provider_id)

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        out = []
        for i, text in enumerate(texts):
            try:
                out.append(self.embed(text))
            except Exception as exc:
                raise BatchError(i, exc) from exc
        return out


class RemoteEmbedder:
    """HTTP embedder; one POST per batch, at most ``max_in_flight`` concurrent requests."""

    def __init__(self, config: EmbeddingProviderConfig, client: httpx.Client | None = None, sleep=None):
        if not config.endpoint_url:
            raise ValueError("remote embedder needs endpoint_url")
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout_ms / 1000)
        self._gate = threading.BoundedSemaphore(max(1, config.max_in_flight))
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        env = self.config.api_key_env
        if env and os.environ.get(env):
            return {"Authorization": f"Bearer {os.environ[env]}"}
        return {}

    def embed(self, text: str) -> EmbeddingVector:
        try:
            return self.embed_batch([text])[0]
        except BatchError as exc:
            raise exc.cause from None

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        if not texts:
            return []
        for i, text in enumerate(texts):
            try:
                _check_text(text)
            except EmptyInput as exc:
                raise BatchError(i, exc) from exc
        payload = {"model": self.config.model_name, "input": list(texts)}
        kwargs = {"sleep": self._sleep} if self._sleep else {}
        with self._gate:
            resp = _http.post_json(
                self._client,
                self.config.endpoint_url,
                payload,
                headers=self._headers(),
                max_attempts=self.config.max_retries,
                **kwargs,
            )
        try:
            data = resp.json()["data"]
            rows = [item["embedding"] for item in data]
        except (ValueError, KeyError, TypeError) as exc:
            raise RemoteError(resp.status_code, f"malformed embedding reply: {resp.text}") from exc
        if len(rows) != len(texts):
            raise RemoteError(resp.status_code, f"expected {len(texts)} embeddings, got {len(rows)}")
        out = []
        for i, row in enumerate(rows):
            if len(row) != self.config.dim:
                raise BatchError(i, DimensionMismatch(self.config.dim, len(row)))
            try:
                out.append(normalize(row, self.config.provider_id))
            except (ZeroNorm, ValueError) as exc:
                raise BatchError(i, exc) from exc
        return out


def _check_text(text: str) -> None:
    if not text or not text.strip():
        raise EmptyInput("cannot embed empty text")


@functools.lru_cache(maxsize=16)
def get_embedder(config: EmbeddingProviderConfig):
    if config.endpoint_url or config.provider_id == "remote":
        return RemoteEmbedder(config)
    return LocalEmbedder(config)


def embed(text: str, config: EmbeddingProviderConfig | None = None) -> EmbeddingVector:
    return get_embedder(config or EmbeddingProviderConfig()).embed(text)


def embed_batch(texts: Sequence[str], config: EmbeddingProviderConfig | None = None) -> list[EmbeddingVector]:
    return get_embedder(config or EmbeddingProviderConfig()).embed_batch(texts)
