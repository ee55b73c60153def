"""Uniform completion interface over LLM backends.

Ships a remote chat-API client and a deterministic scripted backend for
offline runs, plus a persistent append-only response cache and an
order-preserving bounded-concurrency dispatcher. With the scripted backend
and the cache every pipeline in this package is end-to-end deterministic.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

logger = logging.getLogger(__name__)

TokenLogprobs = tuple[tuple[str, float], ...]


class BackendError(RuntimeError):
    """Transport-level backend failure after exhausting retries."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    model_id: str = "default"
    temperature: float = 0.0
    max_tokens: int = 1024
    want_logprobs: bool = False
    seed: int | None = None

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError("temperature must be finite and >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class Completion:
    text: str
    token_logprobs: TokenLogprobs | None = None
    backend_id: str = ""
    cached: bool = False

    def __post_init__(self):
        if self.token_logprobs is not None:
            for token, lp in self.token_logprobs:
                if not math.isfinite(lp) or lp > 0:
                    raise ValueError(f"logprob for {token!r} must be finite and <= 0")


class LLMBackend:
    backend_id: str = "base"

    def complete(self, request: CompletionRequest) -> Completion:
        raise NotImplementedError

    def score_continuation(self, prompt: str, continuation: str) -> TokenLogprobs | None:
        """Token logprobs of forcing ``continuation`` after ``prompt``.

        Returns None when the backend cannot score arbitrary continuations
        (true of chat APIs); callers treat that as "unsupported", not an error.
        """
        return None


@dataclass(frozen=True)
class ScriptRule:
    """First matching rule wins; ``matcher`` is a substring, or a regex if flagged."""

    matcher: str
    response: str
    logprobs: TokenLogprobs | None = None
    regex: bool = False

    def matches(self, prompt: str) -> bool:
        if self.regex:
            return re.search(self.matcher, prompt) is not None
        return self.matcher in prompt


class ScriptedBackend(LLMBackend):
    """Deterministic rule-based stand-in for an LLM.

    ``scoring_rules`` serve score_continuation: the first rule whose matcher
    hits the prompt supplies the token logprobs.
    """

    def __init__(
        self,
        rules: Sequence[ScriptRule] = (),
        default_response: str = "",
        scoring_rules: Sequence[tuple[str, TokenLogprobs]] = (),
        backend_id: str = "scripted",
    ):
        self.rules = tuple(rules)
        self.default_response = default_response
        self.scoring_rules = tuple(scoring_rules)
        self.backend_id = backend_id
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> Completion:
        with self._lock:
            self.calls += 1
        for rule in self.rules:
            if rule.matches(request.prompt):
                logprobs = rule.logprobs if request.want_logprobs else None
                return Completion(
                    text=rule.response, token_logprobs=logprobs, backend_id=self.backend_id
                )
        return Completion(text=self.default_response, backend_id=self.backend_id)

    def score_continuation(self, prompt: str, continuation: str) -> TokenLogprobs | None:
        for matcher, logprobs in self.scoring_rules:
            if matcher in prompt:
                return tuple(logprobs)
        return None

    @classmethod
    def from_file(cls, path: str | Path, backend_id: str = "scripted") -> "ScriptedBackend":
        """Load rules from line-delimited JSON.

        Records: ``{"contains": ...}`` or ``{"regex": ...}`` with ``response``
        and optional ``logprobs`` [[token, lp], ...]; ``{"default": ...}`` sets
        the fallback; ``{"score_contains": ..., "logprobs": ...}`` adds a
        scoring rule.
        """
        rules: list[ScriptRule] = []
        scoring: list[tuple[str, TokenLogprobs]] = []
        default = ""
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            if not raw.strip():
                continue
            record = json.loads(raw)
            if "default" in record:
                default = record["default"]
            elif "score_contains" in record:
                scoring.append(
                    (record["score_contains"], tuple((t, lp) for t, lp in record["logprobs"]))
                )
            else:
                logprobs = record.get("logprobs")
                rules.append(
                    ScriptRule(
                        matcher=record.get("contains") or record["regex"],
                        response=record["response"],
                        logprobs=tuple((t, lp) for t, lp in logprobs) if logprobs else None,
                        regex="regex" in record and "contains" not in record,
                    )
                )
        return cls(rules, default_response=default, scoring_rules=scoring, backend_id=backend_id)


class RemoteChatBackend(LLMBackend):
    """Client for an OpenAI-style chat completions endpoint.

    The endpoint comes from ``endpoint`` or the PATMATCH_LLM_ENDPOINT
    environment variable; the bearer token from the environment variable named
    by ``api_key_env``. Raw exchanges are mirrored to ``transcript_path`` when
    given.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        api_key_env: str = "PATMATCH_LLM_API_KEY",
        timeout: float = 120.0,
        retries: int = 3,
        backoff: float = 1.0,
        transcript_path: str | Path | None = None,
        backend_id: str = "remote",
    ):
        self.endpoint = endpoint or os.environ.get("PATMATCH_LLM_ENDPOINT")
        if not self.endpoint:
            raise ValueError("remote backend requires an endpoint")
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self.backend_id = backend_id
        self._transcript_lock = threading.Lock()

    def complete(self, request: CompletionRequest) -> Completion:
        import requests

        payload: dict = {
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.want_logprobs:
            payload["logprobs"] = True
        if request.seed is not None:
            payload["seed"] = request.seed
        headers = {}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        last_error: Exception | None = None
        for attempt in range(1, self.retries + 1):
            try:
                response = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                response.raise_for_status()
                body = response.json()
                self._log_exchange(payload, body)
                return self._parse(body)
            except Exception as exc:
                last_error = exc
                logger.warning("chat request failed (attempt %d): %s", attempt, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * 2 ** (attempt - 1))
        raise BackendError(
            f"chat request failed after {self.retries} attempts: {last_error}",
            attempts=self.retries,
        )

    def _parse(self, body: dict) -> Completion:
        choice = body["choices"][0]
        text = choice["message"]["content"] or ""
        if choice.get("finish_reason") == "length":
            logger.warning("completion truncated at max_tokens")
        logprobs = None
        lp_content = (choice.get("logprobs") or {}).get("content")
        if lp_content:
            logprobs = tuple(
                (item["token"], min(0.0, float(item["logprob"]))) for item in lp_content
            )
        return Completion(text=text, token_logprobs=logprobs, backend_id=self.backend_id)

    def _log_exchange(self, payload: dict, body: dict) -> None:
        if self.transcript_path is None:
            return
        line = json.dumps({"request": payload, "response": body}, ensure_ascii=False)
        with self._transcript_lock:
            with self.transcript_path.open("a", encoding="utf-8") as handle:
                handle.write(line + "\n")


def cache_key(
    backend_id: str,
    model_id: str,
    prompt: str,
    temperature: float,
    max_tokens: int,
    seed: int | None,
) -> str:
    material = json.dumps(
        [backend_id, model_id, prompt, temperature, max_tokens, seed],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only completion cache backed by line-delimited JSON.

    Each record holds (key, request digest, completion). Replaying the log
    reconstructs the same key-to-completion mapping (first occurrence wins).
    Corrupt lines are quarantined next to the cache and recomputed.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._entries: dict[str, Completion] = {}
        self._mutex = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        self._load()

    def __len__(self) -> int:
        return len(self._entries)

    def _load(self) -> None:
        if not self.path.exists():
            return
        quarantined = 0
        for raw in self.path.read_text(encoding="utf-8").splitlines():
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
                completion = Completion(
                    text=record["completion"]["text"],
                    token_logprobs=(
                        tuple((t, lp) for t, lp in record["completion"]["token_logprobs"])
                        if record["completion"].get("token_logprobs")
                        else None
                    ),
                    backend_id=record["completion"].get("backend_id", ""),
                )
                self._entries.setdefault(record["key"], completion)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                quarantined += 1
                with self.path.with_suffix(".quarantine").open("a", encoding="utf-8") as bad:
                    bad.write(raw + "\n")
                logger.warning("quarantined corrupt cache record: %s", exc)
        if quarantined:
            logger.warning("%d corrupt cache records quarantined", quarantined)

    def get(self, key: str) -> Completion | None:
        with self._mutex:
            return self._entries.get(key)

    def put(self, key: str, request: CompletionRequest, completion: Completion) -> None:
        record = {
            "key": key,
            "request_digest": hashlib.sha256(
                request.prompt.encode("utf-8")
            ).hexdigest()[:16],
            "completion": {
                "text": completion.text,
                "token_logprobs": (
                    [[t, lp] for t, lp in completion.token_logprobs]
                    if completion.token_logprobs
                    else None
                ),
                "backend_id": completion.backend_id,
            },
        }
        with self._mutex:
            if key in self._entries:
                return
            self._entries[key] = completion
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(record, ensure_ascii=False) + "\n")

    def _lock_for(self, key: str) -> threading.Lock:
        with self._mutex:
            lock = self._key_locks.get(key)
            if lock is None:
                lock = self._key_locks[key] = threading.Lock()
            return lock


def cached_complete(
    request: CompletionRequest, cache: ResponseCache | None, backend: LLMBackend
) -> Completion:
    """Serve from cache when possible; at most one backend call per key."""
    if cache is None:
        return backend.complete(request)
    key = cache_key(
        backend.backend_id,
        request.model_id,
        request.prompt,
        request.temperature,
        request.max_tokens,
        request.seed,
    )
    hit = cache.get(key)
    if hit is not None:
        return Completion(
            text=hit.text,
            token_logprobs=hit.token_logprobs,
            backend_id=hit.backend_id,
            cached=True,
        )
    with cache._lock_for(key):
        hit = cache.get(key)
        if hit is not None:
            return Completion(
                text=hit.text,
                token_logprobs=hit.token_logprobs,
                backend_id=hit.backend_id,
                cached=True,
            )
        completion = backend.complete(request)
        cache.put(key, request, completion)
        return completion


def complete_many(
    requests: Sequence[CompletionRequest],
    backend: LLMBackend,
    cache: ResponseCache | None = None,
    max_in_flight: int = 4,
) -> list[Completion]:
    """Dispatch with a bounded worker pool; results joined in request order."""
    if not requests:
        return []
    if max_in_flight <= 1:
        return [cached_complete(req, cache, backend) for req in requests]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda req: cached_complete(req, cache, backend), requests))
