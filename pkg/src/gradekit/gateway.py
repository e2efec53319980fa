"""Completion gateway: chat-completions HTTP backend, replay backend, cache, retries.

Completions are cached on disk as one JSON ``CompletionRecord`` per cache key.
The same files serve as replay fixtures, so running a live backend with a
cache directory is "record mode" and :class:`ReplayBackend` over that
directory reproduces the run without network access.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import httpx

from .prompts import PromptBundle

log = logging.getLogger(__name__)

TRANSIENT_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


class GatewayError(Exception):
    pass


class TransientError(GatewayError):
    def __init__(self, status: Optional[int], message: str = ""):
        self.status = status
        super().__init__(f"transient backend error (status {status}) {message}".strip())


class PermanentError(GatewayError):
    def __init__(self, status: Optional[int], message: str = ""):
        self.status = status
        super().__init__(f"backend error (status {status}) {message}".strip())


class GatewayTimeout(GatewayError):
    pass


class ReplayMiss(GatewayError):
    def __init__(self, cache_key: str):
        self.cache_key = cache_key
        super().__init__(f"no replay fixture for cache key {cache_key}")


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str
    model_name: str
    temperature: float = 0.0
    max_output_tokens: int = 1024
    credential_source: Optional[str] = None
    timeout: float = 60.0
    max_retries: int = 3

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_dict(cls, doc: dict) -> "BackendConfig":
        known = {k: doc[k] for k in cls.__dataclass_fields__ if k in doc}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None


def cache_key(model_name: str, system: str, user: str, temperature: float) -> str:
    payload = json.dumps([model_name, system, user, float(temperature)], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def bundle_key(bundle: PromptBundle, config: BackendConfig) -> str:
    return cache_key(config.model_name, bundle.system, bundle.user, config.temperature)


class Backend(Protocol):
    def __call__(self, bundle: PromptBundle, config: BackendConfig, key: str) -> Completion: ...


def request_payload(bundle: PromptBundle, config: BackendConfig) -> dict:
    return {
        "model": config.model_name,
        "temperature": config.temperature,
        "max_tokens": config.max_output_tokens,
        "messages": bundle.messages(),
    }


class HTTPBackend:
    """Speaks ``POST {endpoint}/chat/completions``."""

    def __init__(self, client: Optional[httpx.Client] = None):
        self._client = client or httpx.Client()

    def __call__(self, bundle: PromptBundle, config: BackendConfig, key: str) -> Completion:
        headers = {"Content-Type": "application/json"}
        if config.credential_source:
            token = os.environ.get(config.credential_source)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        url = config.endpoint_url.rstrip("/") + "/chat/completions"
        try:
            resp = self._client.post(url, json=request_payload(bundle, config), headers=headers, timeout=config.timeout)
        except httpx.TimeoutException as exc:
            raise GatewayTimeout(f"request to {url} timed out") from exc
        except httpx.TransportError as exc:
            raise TransientError(None, type(exc).__name__) from exc
        if resp.status_code in TRANSIENT_STATUS:
            raise TransientError(resp.status_code)
        if resp.status_code >= 400:
            raise PermanentError(resp.status_code, resp.text[:200])
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise PermanentError(resp.status_code, "malformed completion body") from exc
        usage = body.get("usage") or {}
        return Completion(text or "", usage.get("prompt_tokens"), usage.get("completion_tokens"))


class RecordStore:
    """Directory of ``<cache_key>.json`` CompletionRecords with atomic writes."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> Optional[dict]:
        try:
            with open(self.path(key), encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            return None

    def put(self, record: dict) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(record, fh, indent=1, ensure_ascii=False, sort_keys=True)
            os.replace(tmp, self.path(record["cache_key"]))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def __len__(self) -> int:
        return sum(1 for _ in self.directory.glob("*.json"))


class ReplayBackend:
    """Answers purely from recorded fixtures."""

    def __init__(self, fixture_dir):
        self.store = RecordStore(fixture_dir)

    def __call__(self, bundle: PromptBundle, config: BackendConfig, key: str) -> Completion:
        record = self.store.get(key)
        if record is None:
            raise ReplayMiss(key)
        usage = record.get("usage") or {}
        return Completion(record["completion"], usage.get("prompt_tokens"), usage.get("completion_tokens"))


def replay_backend(fixture_dir) -> ReplayBackend:
    return ReplayBackend(fixture_dir)


class Gateway:
    """Cached, retrying, concurrency-bounded access to a completion backend."""

    def __init__(
        self,
        backend: Backend,
        cache_dir=None,
        max_in_flight: int = 4,
        sleep: Callable[[float], None] = time.sleep,
        backoff_base: float = 0.5,
        backoff_cap: float = 30.0,
    ):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.backend = backend
        self.store = RecordStore(cache_dir) if cache_dir is not None else None
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._sleep = sleep
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.network_calls = 0
        self._lock = threading.Lock()

    def _call_with_retries(self, bundle: PromptBundle, config: BackendConfig, key: str) -> Completion:
        attempt = 0
        while True:
            try:
                with self._slots:
                    with self._lock:
                        self.network_calls += 1
                    return self.backend(bundle, config, key)
            except (TransientError, GatewayTimeout) as exc:
                if attempt >= config.max_retries:
                    raise
                delay = min(self.backoff_cap, self.backoff_base * 2**attempt)
                log.warning("retrying %s after %s (attempt %d, sleeping %.2fs)", key[:12], exc, attempt + 1, delay)
                self._sleep(delay)
                attempt += 1

    def complete(self, bundle: PromptBundle, config: BackendConfig) -> str:
        key = bundle_key(bundle, config)
        if self.store is not None:
            cached = self.store.get(key)
            if cached is not None:
                return cached["completion"]
        start = time.perf_counter()
        completion = self._call_with_retries(bundle, config, key)
        latency_ms = (time.perf_counter() - start) * 1000.0
        log.debug("completion %s from %s in %.0f ms", key[:12], config.model_name, latency_ms)
        if self.store is not None:
            request = request_payload(bundle, config)
            request["endpoint_url"] = config.endpoint_url
            self.store.put(
                {
                    "cache_key": key,
                    "request": request,
                    "completion": completion.text,
                    "latency_ms": round(latency_ms, 3),
                    "usage": {
                        "prompt_tokens": completion.prompt_tokens,
                        "completion_tokens": completion.completion_tokens,
                    },
                    "timestamp": datetime.now(timezone.utc).isoformat(),
                }
            )
        return completion.text

    def complete_many(self, bundles: Sequence[PromptBundle], config: BackendConfig) -> list:
        """Complete bundles concurrently; results (or exceptions) in input order."""

        def one(bundle):
            try:
                return self.complete(bundle, config)
            except GatewayError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(one, bundles))
