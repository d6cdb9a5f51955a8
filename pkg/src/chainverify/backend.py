"""Text-generation backends and the content-addressed response cache.

Two transports are provided: an OpenAI-compatible ``/completions`` client and
a scripted backend that replays canned samples from a JSONL file. Both expose
``complete(request) -> Completion``; :class:`CachedBackend` wraps either one
with an on-disk cache so experiment re-runs are byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Protocol

import requests

from .errors import BackendRefusal, CacheCorrupt, ScriptMiss, TransportError

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7
DEFAULT_MAX_TOKENS = 512


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    n_logprobs: bool = False
    stop: Optional[tuple[str, ...]] = None
    seed_tag: str = ""

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not (self.temperature >= 0 and self.temperature != float("inf")):
            raise ValueError(f"invalid temperature {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.stop is not None and not isinstance(self.stop, tuple):
            object.__setattr__(self, "stop", tuple(self.stop))


@dataclass(frozen=True)
class Completion:
    text: str
    tokens: Optional[tuple[tuple[str, float], ...]] = None
    backend_id: str = ""
    cached: bool = False

    def to_dict(self) -> dict:
        toks = [[t, lp] for t, lp in self.tokens] if self.tokens is not None else None
        return {"text": self.text, "tokens": toks, "backend_id": self.backend_id}

    @classmethod
    def from_dict(cls, d: dict, cached: bool = False) -> "Completion":
        toks = d.get("tokens")
        if toks is not None:
            toks = tuple((str(t), float(lp)) for t, lp in toks)
        return cls(d["text"], toks, d.get("backend_id", ""), cached)


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    backoff: float = 1.0


@dataclass
class BackendConfig:
    kind: str = "scripted"  # http_openai_compatible | scripted
    base_url: Optional[str] = None
    model: Optional[str] = None
    api_key_env: str = "OPENAI_API_KEY"
    script_path: Optional[str] = None
    max_concurrent_requests: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout: float = 60.0

    def __post_init__(self):
        if isinstance(self.retry, dict):
            self.retry = RetryPolicy(**self.retry)
        if self.kind == "http_openai_compatible":
            if not self.base_url or self.script_path:
                raise ValueError("http backend needs base_url and no script_path")
        elif self.kind == "scripted":
            if not self.script_path or self.base_url:
                raise ValueError("scripted backend needs script_path and no base_url")
        else:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.max_concurrent_requests < 1:
            raise ValueError("max_concurrent_requests must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "max_concurrent_requests": self.max_concurrent_requests,
            "retry": {"max_attempts": self.retry.max_attempts, "backoff": self.retry.backoff},
        }
        if self.kind == "scripted":
            d["script_path"] = self.script_path
        else:
            d.update(base_url=self.base_url, model=self.model, api_key_env=self.api_key_env)
        return d


class Backend(Protocol):
    backend_id: str

    def complete(self, request: CompletionRequest) -> Completion: ...


def prompt_digest(prompt: str) -> str:
    return "sha256:" + hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class ScriptedBackend:
    """Replays canned samples keyed by prompt.

    Each script line is ``{"prompt_key": ..., "samples": [{"text": ..., "tokens": ...}]}``
    where ``prompt_key`` is the prompt itself or its ``prompt_digest``. Every
    call for a key returns the next sample, cycling once the list is exhausted.
    """

    def __init__(self, entries: dict[str, list[dict]], backend_id: str = "scripted"):
        self.entries = entries
        self.backend_id = backend_id
        self.calls = 0
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        entries: dict[str, list[dict]] = {}
        with open(path, encoding="utf-8") as f:
            for n, line in enumerate(f, 1):
                if not line.strip():
                    continue
                d = json.loads(line)
                if not d.get("samples"):
                    raise ValueError(f"{path}:{n}: entry without samples")
                entries.setdefault(d["prompt_key"], []).extend(d["samples"])
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
        return cls(entries, backend_id=f"scripted:{digest}")

    def complete(self, request: CompletionRequest) -> Completion:
        key = request.prompt if request.prompt in self.entries else prompt_digest(request.prompt)
        samples = self.entries.get(key)
        if samples is None:
            raise ScriptMiss(f"no scripted entry for prompt {request.prompt[:80]!r}")
        with self._lock:
            i = self._cursor.get(key, 0)
            self._cursor[key] = i + 1
            self.calls += 1
        sample = samples[i % len(samples)]
        tokens = None
        if request.n_logprobs and sample.get("tokens") is not None:
            tokens = tuple((str(t), float(lp)) for t, lp in sample["tokens"])
        return Completion(sample["text"], tokens, self.backend_id)


class HttpBackend:
    """Client for an OpenAI-compatible ``POST {base_url}/completions`` endpoint."""

    def __init__(self, config: BackendConfig, session: Optional[requests.Session] = None):
        self.config = config
        self.backend_id = f"http:{config.base_url}:{config.model}"
        self.calls = 0
        self._session = session or requests.Session()
        self._sem = threading.BoundedSemaphore(config.max_concurrent_requests)
        self._lock = threading.Lock()

    def _body(self, request: CompletionRequest) -> dict:
        body = {
            "model": self.config.model,
            "prompt": request.prompt,
            "temperature": request.temperature,
            "top_p": 1.0,
            "max_tokens": request.max_tokens,
            "logprobs": 1 if request.n_logprobs else None,
            "stop": list(request.stop) if request.stop else None,
            "n": 1,
        }
        return {k: v for k, v in body.items() if v is not None}

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, request: CompletionRequest) -> Completion:
        url = self.config.base_url.rstrip("/") + "/completions"
        policy = self.config.retry
        last: Optional[Exception] = None
        for attempt in range(policy.max_attempts):
            if attempt:
                time.sleep(policy.backoff * 2 ** (attempt - 1))
            with self._lock:
                self.calls += 1
            try:
                with self._sem:
                    resp = self._session.post(
                        url, json=self._body(request), headers=self._headers(), timeout=self.config.timeout
                    )
            except requests.RequestException as exc:
                last = exc
                log.warning("attempt %d/%d to %s failed: %s", attempt + 1, policy.max_attempts, url, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                log.warning("attempt %d/%d got HTTP %d", attempt + 1, policy.max_attempts, resp.status_code)
                continue
            if 400 <= resp.status_code < 500:
                raise BackendRefusal(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return self._parse(resp.json(), request)
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                last = exc
                continue
        raise TransportError(f"request failed after {policy.max_attempts} attempts: {last}")

    def _parse(self, payload: dict, request: CompletionRequest) -> Completion:
        choice = payload["choices"][0]
        text = choice["text"]
        tokens = None
        lp = choice.get("logprobs")
        if request.n_logprobs and lp:
            toks = lp.get("tokens") or []
            vals = lp.get("token_logprobs") or []
            if len(toks) != len(vals):
                raise ValueError("logprobs tokens/values length mismatch")
            # servers sometimes report log(1) as a tiny positive float
            tokens = tuple((str(t), min(0.0, float(v if v is not None else 0.0))) for t, v in zip(toks, vals))
        return Completion(text, tokens, self.backend_id)


def make_backend(config: BackendConfig):
    if config.kind == "scripted":
        return ScriptedBackend.from_file(config.script_path)
    return HttpBackend(config)


def _canonical_number(x):
    x = float(x)
    if x == 0:
        x = 0.0
    return repr(x)


def cache_key(request: CompletionRequest, backend_id: str) -> str:
    payload = {
        "backend_id": backend_id,
        "prompt": request.prompt,
        "temperature": _canonical_number(request.temperature),
        "max_tokens": int(request.max_tokens),
        "stop": list(request.stop) if request.stop is not None else None,
        "n_logprobs": bool(request.n_logprobs),
        "seed_tag": request.seed_tag,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return "sha256:" + hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    """One JSON file per cache key; writes are atomic and first-writer-wins."""

    def __init__(self, cache_dir):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self.quarantined = 0
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def path(self, key: str) -> Path:
        return self.dir / (key.split(":", 1)[-1] + ".json")

    def lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def get(self, key: str) -> Optional[Completion]:
        p = self.path(key)
        if not p.exists():
            return None
        try:
            d = json.loads(p.read_text(encoding="utf-8"))
            if not isinstance(d, dict) or d.get("key") != key:
                raise ValueError("key mismatch")
            return Completion.from_dict(d["completion"], cached=True)
        except (ValueError, KeyError, TypeError) as exc:
            raise CacheCorrupt(f"{p}: {exc}") from exc

    def quarantine(self, key: str) -> None:
        p = self.path(key)
        target = p.with_suffix(f".corrupt.{os.getpid()}.{time.time_ns()}")
        try:
            os.replace(p, target)
            self.quarantined += 1
            log.warning("quarantined corrupt cache entry %s -> %s", p.name, target.name)
        except FileNotFoundError:
            pass

    def put(self, key: str, completion: Completion) -> Completion:
        """Persist ``completion`` unless another writer got there first; return the stored value."""
        p = self.path(key)
        blob = json.dumps({"key": key, "completion": completion.to_dict()}, sort_keys=True, ensure_ascii=False)
        fd, tmp = tempfile.mkstemp(dir=self.dir, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                f.write(blob)
                f.flush()
                os.fsync(f.fileno())
            try:
                os.link(tmp, p)
            except FileExistsError:
                try:
                    stored = self.get(key)
                except CacheCorrupt:
                    stored = None
                if stored is not None:
                    return replace(stored, cached=False)
                os.replace(tmp, p)
                tmp = None
        finally:
            if tmp is not None:
                try:
                    os.unlink(tmp)
                except FileNotFoundError:
                    pass
        return completion

    def __len__(self) -> int:
        return sum(1 for _ in self.dir.glob("*.json") if not _.name.startswith(".tmp-"))


def cached_complete(backend, cache: ResponseCache, request: CompletionRequest) -> Completion:
    key = cache_key(request, backend.backend_id)
    with cache.lock_for(key):
        try:
            hit = cache.get(key)
        except CacheCorrupt as exc:
            log.warning("%s", exc)
            cache.quarantine(key)
            hit = None
        if hit is not None:
            cache.hits += 1
            return hit
        cache.misses += 1
        fresh = backend.complete(request)
        return cache.put(key, replace(fresh, cached=False))


class CachedBackend:
    """Backend wrapper routing every call through a :class:`ResponseCache`."""

    def __init__(self, inner, cache: ResponseCache):
        self.inner = inner
        self.cache = cache
        self.backend_id = inner.backend_id

    def complete(self, request: CompletionRequest) -> Completion:
        return cached_complete(self.inner, self.cache, request)

    @property
    def calls(self) -> int:
        return getattr(self.inner, "calls", 0)

    def stats(self) -> dict:
        return {"hits": self.cache.hits, "misses": self.cache.misses, "quarantined": self.cache.quarantined}
