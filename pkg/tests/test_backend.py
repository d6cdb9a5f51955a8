from __future__ import annotations

import json
import socket
import threading
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from chainverify.backend import (
    BackendConfig,
    CachedBackend,
    Completion,
    CompletionRequest,
    HttpBackend,
    ResponseCache,
    RetryPolicy,
    ScriptedBackend,
    cache_key,
    cached_complete,
    make_backend,
    prompt_digest,
)
from chainverify.errors import BackendRefusal, ScriptMiss, TransportError


def write_script(path, entries):
    with open(path, "w", encoding="utf-8") as f:
        for key, samples in entries:
            f.write(json.dumps({"prompt_key": key, "samples": samples}) + "\n")
    return path


def test_scripted_identity_and_cursor(tmp_path):
    p = write_script(tmp_path / "s.jsonl", [("P", [{"text": "yes"}]), ("Q", [{"text": "one"}, {"text": "two"}])])
    b = ScriptedBackend.from_file(p)
    assert b.complete(CompletionRequest("P")).text == "yes"
    assert [b.complete(CompletionRequest("Q")).text for _ in range(3)] == ["one", "two", "one"]
    assert b.calls == 4
    assert b.backend_id.startswith("scripted:")


def test_scripted_digest_key_and_tokens(tmp_path):
    p = write_script(tmp_path / "s.jsonl", [(prompt_digest("long prompt"), [{"text": "ok", "tokens": [["ok", -0.5]]}])])
    b = make_backend(BackendConfig(kind="scripted", script_path=str(p)))
    c = b.complete(CompletionRequest("long prompt", n_logprobs=True))
    assert c.tokens == (("ok", -0.5),)
    assert b.complete(CompletionRequest("long prompt")).tokens is None


def test_scripted_miss(tmp_path):
    b = ScriptedBackend.from_file(write_script(tmp_path / "s.jsonl", [("P", [{"text": "x"}])]))
    with pytest.raises(ScriptMiss):
        b.complete(CompletionRequest("other"))


def test_request_validation():
    with pytest.raises(ValueError):
        CompletionRequest("")
    with pytest.raises(ValueError):
        CompletionRequest("p", temperature=float("nan"))
    with pytest.raises(ValueError):
        CompletionRequest("p", max_tokens=0)
    assert CompletionRequest("p").temperature == 0.7


def test_config_fields_per_kind():
    with pytest.raises(ValueError):
        BackendConfig(kind="scripted")
    with pytest.raises(ValueError):
        BackendConfig(kind="http_openai_compatible", base_url="http://x", script_path="s")
    with pytest.raises(ValueError):
        BackendConfig(kind="carrier_pigeon")
    cfg = BackendConfig.from_dict({"kind": "http_openai_compatible", "base_url": "http://x", "retry": {"max_attempts": 2}})
    assert cfg.retry.max_attempts == 2 and cfg.retry.backoff == 1.0


# ------------------------------------------------------------------ cache key

def test_cache_key_format_and_canonicalization():
    a = CompletionRequest(prompt="p", temperature=0.7, max_tokens=10, stop=["x"])
    b = CompletionRequest(stop=("x",), max_tokens=10, temperature=0.70, prompt="p")
    k = cache_key(a, "m")
    assert k == cache_key(b, "m")
    assert k.startswith("sha256:") and len(k) == 71 and k[7:] == k[7:].lower()
    assert cache_key(CompletionRequest("p", temperature=1), "m") == cache_key(CompletionRequest("p", temperature=1.0), "m")


def test_cache_key_sensitivity():
    base = CompletionRequest("p", seed_tag="s0")
    assert cache_key(base, "m") != cache_key(CompletionRequest("p", temperature=0.0, seed_tag="s0"), "m")
    assert cache_key(base, "m") != cache_key(CompletionRequest("p", seed_tag="s1"), "m")
    assert cache_key(base, "m") != cache_key(base, "other")
    assert cache_key(base, "m") != cache_key(CompletionRequest("p", seed_tag="s0", n_logprobs=True), "m")


# ---------------------------------------------------------------------- cache

class Echo:
    backend_id = "echo"

    def __init__(self):
        self.calls = 0
        self.lock = threading.Lock()

    def complete(self, request):
        with self.lock:
            self.calls += 1
        return Completion(f"{request.prompt}|{request.seed_tag}", (("a", -0.25),), self.backend_id)


def test_cache_hit_roundtrip(tmp_path):
    cache, b = ResponseCache(tmp_path), Echo()
    r = CompletionRequest("p", seed_tag="s0")
    first = cached_complete(b, cache, r)
    second = cached_complete(b, cache, r)
    assert not first.cached and second.cached
    assert (first.text, first.tokens) == (second.text, second.tokens)
    assert b.calls == 1 and cache.hits == 1 and cache.misses == 1


def test_forty_seed_tags_forty_entries(tmp_path):
    cache, b = ResponseCache(tmp_path), Echo()
    for i in range(40):
        cached_complete(b, cache, CompletionRequest("same prompt", seed_tag=f"s{i}"))
    assert len(cache) == 40
    assert len(list(tmp_path.glob("*.json"))) == 40


def test_corrupt_entry_quarantined(tmp_path):
    cache, b = ResponseCache(tmp_path), Echo()
    r = CompletionRequest("p")
    cached_complete(b, cache, r)
    cache.path(cache_key(r, b.backend_id)).write_text("{not json", encoding="utf-8")
    again = cached_complete(b, cache, r)
    assert not again.cached and again.text == "p|"
    assert cache.quarantined == 1
    assert len(list(tmp_path.glob("*.corrupt.*"))) == 1
    assert cached_complete(b, cache, r).cached


def test_concurrent_same_key_single_entry(tmp_path):
    b = Echo()
    r = CompletionRequest("p", seed_tag="race")
    # separate cache objects share no in-process lock, so the on-disk link race decides
    caches = [ResponseCache(tmp_path) for _ in range(8)]
    with ThreadPoolExecutor(8) as ex:
        results = list(ex.map(lambda c: cached_complete(b, c, r), caches))
    assert len({x.text for x in results}) == 1
    assert len(list(tmp_path.glob("*.json"))) == 1
    assert not list(tmp_path.glob(".tmp-*"))


def test_cached_backend_wrapper(tmp_path):
    inner = Echo()
    cb = CachedBackend(inner, ResponseCache(tmp_path))
    cb.complete(CompletionRequest("p"))
    cb.complete(CompletionRequest("p"))
    assert cb.calls == 1
    assert cb.stats() == {"hits": 1, "misses": 1, "quarantined": 0}


# ----------------------------------------------------------------------- http

class Handler(BaseHTTPRequestHandler):
    script: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        Handler.seen.append((self.path, body, self.headers.get("Authorization")))
        status, payload = Handler.script.pop(0) if Handler.script else (200, None)
        if payload is None:
            payload = {"choices": [{"text": "hi there", "logprobs": {"tokens": ["hi", " there"],
                                                                    "token_logprobs": [-0.5, 1e-9]}}]}
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    Handler.script, Handler.seen = [], []
    srv = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}/v1"
    srv.shutdown()
    srv.server_close()


def http_backend(url, attempts=3):
    return HttpBackend(BackendConfig(kind="http_openai_compatible", base_url=url, model="m",
                                     api_key_env="CV_TEST_KEY", retry=RetryPolicy(attempts, 0.0), timeout=5))


def test_http_roundtrip(server, monkeypatch):
    monkeypatch.setenv("CV_TEST_KEY", "secret")
    b = http_backend(server)
    c = b.complete(CompletionRequest("Q: 1+1?", n_logprobs=True, stop=["\n\n"]))
    assert c.text == "hi there"
    assert c.tokens == (("hi", -0.5), (" there", 0.0))
    path, body, auth = Handler.seen[0]
    assert path == "/v1/completions" and auth == "Bearer secret"
    assert body == {"model": "m", "prompt": "Q: 1+1?", "temperature": 0.7, "top_p": 1.0, "max_tokens": 512,
                    "logprobs": 1, "stop": ["\n\n"], "n": 1}


def test_http_retries_then_succeeds(server):
    Handler.script = [(500, {"error": "boom"}), (429, {"error": "slow down"})]
    b = http_backend(server)
    assert b.complete(CompletionRequest("p")).text == "hi there"
    assert b.calls == 3


def test_http_refusal_not_retried(server):
    Handler.script = [(400, {"error": "bad"})]
    b = http_backend(server)
    with pytest.raises(BackendRefusal):
        b.complete(CompletionRequest("p"))
    assert b.calls == 1


def test_http_gives_up_after_max_attempts(server):
    Handler.script = [(503, {})] * 3
    with pytest.raises(TransportError):
        http_backend(server).complete(CompletionRequest("p"))


def test_unreachable_host_transport_error():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    b = http_backend(f"http://127.0.0.1:{port}", attempts=3)
    with pytest.raises(TransportError):
        b.complete(CompletionRequest("p"))
    assert b.calls == 3
