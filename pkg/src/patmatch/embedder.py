"""Text embedding backends: a remote HTTP service client and an offline mock.

The remote protocol is a single endpoint accepting ``POST {"texts": [...]}``
and returning ``{"vectors": [[...], ...]}``. The mock backend is a pure
function of (seed, text) so whole pipelines can run reproducibly with no
model weights; its construction is documented on :class:`MockEmbedder`.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import threading
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


class EmbeddingError(RuntimeError):
    """Embedding backend failure; ``attempts`` counts tries for remote calls."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class EmbeddingConfig:
    backend_id: str
    dim: int
    batch_size: int = 32
    truncation_chars: int = 2000
    normalize: bool = False
    endpoint: str | None = None
    timeout: float = 30.0
    retries: int = 3
    max_in_flight: int = 8

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.truncation_chars < 1:
            raise ValueError("truncation_chars must be positive")


class EmbeddingBackend:
    """Shared contract: batch = per-item, fixed dim, optional L2 normalization."""

    def __init__(self, config: EmbeddingConfig):
        self.config = config

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def fingerprint(self) -> str:
        """Identifies vector provenance: backend, dimension, normalization."""
        cfg = self.config
        return f"{cfg.backend_id}:dim={cfg.dim}:norm={int(cfg.normalize)}"

    def embed_text(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: list[str]) -> np.ndarray:
        """Embed texts in input order, splitting into chunks of ``batch_size``."""
        for i, text in enumerate(texts):
            if not text or not text.strip():
                raise ValueError(f"text at index {i} is empty")
        prepared = [self._truncate(t) for t in texts]
        out = np.empty((len(prepared), self.dim), dtype=np.float64)
        step = self.config.batch_size
        for start in range(0, len(prepared), step):
            chunk = prepared[start : start + step]
            try:
                vectors = self._embed_chunk(chunk)
            except EmbeddingError as exc:
                raise EmbeddingError(
                    f"failed for batch indices {start}..{start + len(chunk) - 1}: {exc}",
                    attempts=exc.attempts,
                ) from exc
            if vectors.shape != (len(chunk), self.dim):
                raise EmbeddingError(
                    f"backend returned shape {vectors.shape}, expected ({len(chunk)}, {self.dim})"
                )
            if not np.all(np.isfinite(vectors)):
                raise EmbeddingError("backend returned non-finite values")
            out[start : start + len(chunk)] = vectors
        if self.config.normalize:
            norms = np.linalg.norm(out, axis=1, keepdims=True)
            if np.any(norms == 0.0):
                raise EmbeddingError("cannot normalize a zero vector")
            out = out / norms
        return out

    def _truncate(self, text: str) -> str:
        limit = self.config.truncation_chars
        if len(text) > limit:
            logger.warning("truncating text of %d chars to %d", len(text), limit)
            return text[:limit]
        return text

    def _embed_chunk(self, texts: list[str]) -> np.ndarray:
        raise NotImplementedError


class MockEmbedder(EmbeddingBackend):
    """Deterministic offline embedder.

    Construction, reproducible across platforms and library versions:

    1. ``base = BLAKE2b(text_utf8, key=seed_as_8_big_endian_bytes, digest=32)``
    2. for block j = 0, 1, ...: ``block = BLAKE2b(base || j_as_4_big_endian_bytes,
       digest=32)``, read as four big-endian uint64
    3. each uint64 ``u`` maps to ``((u >> 11) / 2**53) * 2 - 1``, a float in
       [-1, 1); the first ``dim`` values form the vector.
    """

    def __init__(self, dim: int, seed: int = 0, **kwargs):
        config = EmbeddingConfig(backend_id=f"mock-{seed}", dim=dim, **kwargs)
        super().__init__(config)
        self.seed = seed
        self._key = struct.pack(">q", seed)

    def _embed_chunk(self, texts: list[str]) -> np.ndarray:
        return np.stack([self._embed_one(t) for t in texts])

    def _embed_one(self, text: str) -> np.ndarray:
        base = hashlib.blake2b(text.encode("utf-8"), key=self._key, digest_size=32).digest()
        blocks_needed = -(-self.dim // 4)
        words = np.empty(blocks_needed * 4, dtype=np.uint64)
        for j in range(blocks_needed):
            block = hashlib.blake2b(base + struct.pack(">I", j), digest_size=32).digest()
            words[j * 4 : j * 4 + 4] = np.frombuffer(block, dtype=">u8")
        floats = (words[: self.dim] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return floats * 2.0 - 1.0


class RemoteEmbedder(EmbeddingBackend):
    """Client for the HTTP embedding service, with retry and an in-flight bound."""

    def __init__(self, config: EmbeddingConfig, backoff: float = 0.5):
        if not config.endpoint:
            raise ValueError("remote embedder requires an endpoint")
        super().__init__(config)
        self._backoff = backoff
        self._gate = threading.Semaphore(config.max_in_flight)

    def _embed_chunk(self, texts: list[str]) -> np.ndarray:
        import requests

        last_error: Exception | None = None
        for attempt in range(1, self.config.retries + 1):
            try:
                with self._gate:
                    response = requests.post(
                        self.config.endpoint,
                        json={"texts": texts},
                        timeout=self.config.timeout,
                    )
                response.raise_for_status()
                vectors = response.json()["vectors"]
                arr = np.asarray(vectors, dtype=np.float64)
                if arr.ndim != 2 or arr.shape[1] != self.dim:
                    raise EmbeddingError(
                        f"dimension mismatch: expected {self.dim}, got "
                        f"{arr.shape[1] if arr.ndim == 2 else 'ragged'}",
                        attempts=attempt,
                    )
                return arr
            except EmbeddingError:
                raise
            except Exception as exc:  # transport, HTTP, or payload errors
                last_error = exc
                logger.warning("embedding request failed (attempt %d): %s", attempt, exc)
                if attempt < self.config.retries:
                    import time

                    time.sleep(self._backoff * 2 ** (attempt - 1))
        raise EmbeddingError(
            f"embedding request failed after {self.config.retries} attempts: {last_error}",
            attempts=self.config.retries,
        )
