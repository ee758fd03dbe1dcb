"""Resilient, cached client for remote chat-completion endpoints.

Wire protocol is the de-facto chat-completions format: POST
``{base_url}/chat/completions`` with a JSON body

    {"model": ..., "messages": [{"role": "user", "content": ...}],
     "temperature": ..., "max_tokens": ...}

where ``content`` is a plain string for text prompts or a list of parts
(``{"type": "text", ...}`` / ``{"type": "image_url", ...}``) when images are
attached. The response text is read from ``choices[0].message.content``.
Credentials are resolved from a named environment variable, never stored.

The on-disk cache keeps one JSON file per key under a two-level fan-out
directory. Writes are atomic (temp file + rename) and concurrent identical
requests are collapsed to a single upstream call.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import httpx

from .prompting import RenderedPrompt

log = logging.getLogger(__name__)


class ConfigurationError(Exception):
    """Bad endpoint configuration, detected before any network call."""


class TransportError(Exception):
    """Retries exhausted on connection-level failures."""


class ProtocolError(Exception):
    """Non-2xx response from the endpoint."""


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    api_key_env: str | None = None
    vision: bool = False
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 8
    temperature: float = 0.0
    max_output_tokens: int = 256
    backoff_base: float = 0.5

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ConfigurationError(f"timeout must be positive, got {self.timeout}")
        if self.max_retries < 0:
            raise ConfigurationError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.max_in_flight < 1:
            raise ConfigurationError(f"max_in_flight must be >= 1, got {self.max_in_flight}")


@dataclass(frozen=True)
class Completion:
    text: str
    finish_reason: str
    latency_ms: float
    from_cache: bool = False
    retries: int = 0


def cache_key(endpoint: EndpointConfig, prompt: RenderedPrompt) -> str:
    """Digest over model id, prompt text, image digests, and sampling controls."""
    image_digests = [
        hashlib.sha256(ref.locator.encode()).hexdigest()
        for ref in prompt.attached_images
    ]
    payload = json.dumps(
        [
            endpoint.model,
            prompt.text,
            image_digests,
            endpoint.temperature,
            endpoint.max_output_tokens,
        ],
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


class DiskCache:
    """One file per key under ``<dir>/<k[:2]>/<k[2:4]>/<k>.json``.

    Corrupt entries are quarantined under ``<dir>/quarantine`` and treated as
    misses.
    """

    def __init__(self, directory: Path | str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / key[:2] / key[2:4] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, OSError) as exc:
            quarantine = self.directory / "quarantine"
            quarantine.mkdir(exist_ok=True)
            try:
                path.rename(quarantine / path.name)
            except OSError:
                pass
            log.warning("quarantined corrupt cache entry %s: %s", key, exc)
            return None

    def put(self, key: str, record: dict) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp.{os.getpid()}.{threading.get_ident()}")
        tmp.write_text(json.dumps(record, sort_keys=True), encoding="utf-8")
        tmp.replace(path)


class ChatClient:
    """Thread-safe client for one endpoint.

    A per-endpoint semaphore bounds in-flight requests; an in-process
    single-flight table collapses concurrent identical cached requests.
    """

    def __init__(self, endpoint: EndpointConfig, cache: DiskCache | None = None):
        self.endpoint = endpoint
        self.cache = cache
        self._semaphore = threading.BoundedSemaphore(endpoint.max_in_flight)
        self._http = httpx.Client(timeout=endpoint.timeout)
        self._inflight: dict[str, threading.Lock] = {}
        self._inflight_guard = threading.Lock()

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "ChatClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- request building ----------------------------------------------------

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.endpoint.api_key_env:
            key = os.environ.get(self.endpoint.api_key_env)
            if not key:
                raise ConfigurationError(
                    f"credentials variable {self.endpoint.api_key_env} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _body(self, prompt: RenderedPrompt) -> dict:
        if prompt.attached_images:
            content: list[dict] = [{"type": "text", "text": prompt.text}]
            content.extend(
                {"type": "image_url", "image_url": {"url": ref.locator}}
                for ref in prompt.attached_images
            )
        else:
            content = prompt.text  # type: ignore[assignment]
        return {
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": self.endpoint.temperature,
            "max_tokens": self.endpoint.max_output_tokens,
        }

    # -- completion paths ----------------------------------------------------

    def complete(self, prompt: RenderedPrompt) -> Completion:
        """One upstream completion with exponential-backoff retries."""
        if prompt.attached_images and not self.endpoint.vision:
            raise ConfigurationError(
                f"images attached but endpoint {self.endpoint.model} is text-only"
            )
        headers = self._headers()
        body = self._body(prompt)
        url = self.endpoint.base_url.rstrip("/") + "/chat/completions"
        start = time.monotonic()
        attempts = self.endpoint.max_retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                time.sleep(self.endpoint.backoff_base * 2 ** (attempt - 1))
            try:
                with self._semaphore:
                    response = self._http.post(url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_error = exc
                log.warning("transport failure (attempt %d): %s", attempt + 1, exc)
                continue
            if response.status_code in (429,) or response.status_code >= 500:
                last_error = ProtocolError(
                    f"HTTP {response.status_code}: {response.text[:200]}"
                )
                log.warning("retryable status %d (attempt %d)", response.status_code, attempt + 1)
                continue
            if response.status_code != 200:
                raise ProtocolError(f"HTTP {response.status_code}: {response.text[:200]}")
            data = response.json()
            choice = data["choices"][0]
            text = choice["message"]["content"] or ""
            return Completion(
                text=text,
                finish_reason=choice.get("finish_reason", "stop"),
                latency_ms=(time.monotonic() - start) * 1000.0,
                retries=attempt,
            )
        raise TransportError(
            f"retries exhausted after {attempts} attempts: {last_error}"
        )

    def cached_complete(self, prompt: RenderedPrompt) -> Completion:
        """Completion through the disk cache; falls back to `complete` on miss."""
        if self.cache is None:
            return self.complete(prompt)
        key = cache_key(self.endpoint, prompt)
        hit = self.cache.get(key)
        if hit is not None:
            return Completion(
                text=hit["text"],
                finish_reason=hit["finish_reason"],
                latency_ms=0.0,
                from_cache=True,
            )
        lock = self._flight_lock(key)
        with lock:
            hit = self.cache.get(key)
            if hit is not None:
                return Completion(
                    text=hit["text"],
                    finish_reason=hit["finish_reason"],
                    latency_ms=0.0,
                    from_cache=True,
                )
            completion = self.complete(prompt)
            self.cache.put(
                key,
                {
                    "model": self.endpoint.model,
                    "prompt_sha256": hashlib.sha256(prompt.text.encode()).hexdigest(),
                    "temperature": self.endpoint.temperature,
                    "max_tokens": self.endpoint.max_output_tokens,
                    "text": completion.text,
                    "finish_reason": completion.finish_reason,
                    "timestamp": time.time(),
                },
            )
        self._drop_flight_lock(key)
        return completion

    def _flight_lock(self, key: str) -> threading.Lock:
        with self._inflight_guard:
            lock = self._inflight.get(key)
            if lock is None:
                lock = threading.Lock()
                self._inflight[key] = lock
            return lock

    def _drop_flight_lock(self, key: str) -> None:
        with self._inflight_guard:
            self._inflight.pop(key, None)
