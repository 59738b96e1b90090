"""Tests for scripted/replay/HTTP backends, caches, and the mock embedder."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from lumberkit.backends import (
    BackendError,
    EmbeddingCache,
    HttpCompletionBackend,
    HttpEmbeddingBackend,
    MockEmbeddingBackend,
    ReplayBackend,
    ResponseCache,
    ScriptedBackend,
    prompt_key,
)


class _StubHandler(BaseHTTPRequestHandler):
    """Speaks the chat-completion and embedding wire shapes for tests."""

    fail_next: int = 0
    requests_seen: list = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        payload = json.loads(self.rfile.read(length))
        type(self).requests_seen.append(
            {"path": self.path, "payload": payload, "auth": self.headers.get("Authorization")}
        )
        if type(self).fail_next > 0:
            type(self).fail_next -= 1
            self.send_response(500)
            self.end_headers()
            return
        if self.path.endswith("/chat/completions"):
            body = {
                "choices": [
                    {"message": {"content": f"echo:{payload['messages'][0]['content']}"}}
                ]
            }
        elif self.path.endswith("/embeddings"):
            body = {
                "data": [
                    {"embedding": [float(len(text)), 1.0, 2.0]} for text in payload["input"]
                ]
            }
        else:
            self.send_response(404)
            self.end_headers()
            return
        encoded = json.dumps(body).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(encoded)))
        self.end_headers()
        self.wfile.write(encoded)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _StubHandler.fail_next = 0
    _StubHandler.requests_seen = []
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()
    server.server_close()


class TestScriptedBackend:
    def test_mapping_lookup(self):
        backend = ScriptedBackend({"p1": "r1"})
        assert backend.complete("p1") == "r1"

    def test_missing_prompt_raises(self):
        with pytest.raises(BackendError):
            ScriptedBackend({}).complete("unknown")

    def test_callable_is_deterministic(self):
        backend = ScriptedBackend(lambda p: p.upper())
        assert backend.complete("abc") == backend.complete("abc") == "ABC"


class TestResponseCache:
    def test_put_get_and_reload(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        cache = ResponseCache(path, model_id="m")
        assert cache.get("prompt") is None
        cache.put("prompt", "response ✓\nwith newline")
        assert cache.get("prompt") == "response ✓\nwith newline"
        reloaded = ResponseCache(path, model_id="m")
        assert reloaded.get("prompt") == "response ✓\nwith newline"

    def test_last_record_wins(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        cache = ResponseCache(path, model_id="m")
        cache.put("p", "first")
        cache.put("p", "second")
        assert ResponseCache(path, model_id="m").get("p") == "second"

    def test_distinct_keys_from_two_writers(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        writer_a = ResponseCache(path, model_id="m")
        writer_b = ResponseCache(path, model_id="m")
        writer_a.put("pa", "ra")
        writer_b.put("pb", "rb")
        merged = ResponseCache(path, model_id="m")
        assert merged.get("pa") == "ra"
        assert merged.get("pb") == "rb"
        assert len(merged) == 2

    def test_key_depends_on_model_id(self):
        assert prompt_key("m1", "p") != prompt_key("m2", "p")


class TestReplayBackend:
    def test_serves_recorded_response_byte_exactly(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        recording = ResponseCache(path, model_id="m")
        response = "Answer: ID 0007\n\ttrailing whitespace  "
        recording.put("the prompt", response)
        replay = ReplayBackend.from_file(path, model_id="m")
        assert replay.complete("the prompt") == response

    def test_miss_raises(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        ResponseCache(path, model_id="m").put("known", "r")
        replay = ReplayBackend.from_file(path, model_id="m")
        with pytest.raises(BackendError):
            replay.complete("unknown")


class TestHttpCompletionBackend:
    def test_round_trip(self, stub_server):
        backend = HttpCompletionBackend(stub_server, "test-model", api_key="sk-test")
        assert backend.complete("hello", temperature=0.0) == "echo:hello"
        request = _StubHandler.requests_seen[-1]
        assert request["payload"]["model"] == "test-model"
        assert request["payload"]["temperature"] == 0.0
        assert request["payload"]["messages"] == [{"role": "user", "content": "hello"}]
        assert request["auth"] == "Bearer sk-test"

    def test_retries_then_succeeds(self, stub_server):
        _StubHandler.fail_next = 1
        backend = HttpCompletionBackend(
            stub_server, "test-model", max_attempts=2, retry_wait=0.0
        )
        assert backend.complete("hi") == "echo:hi"

    def test_exhausted_retries_raise(self, stub_server):
        _StubHandler.fail_next = 5
        backend = HttpCompletionBackend(
            stub_server, "test-model", max_attempts=2, retry_wait=0.0
        )
        with pytest.raises(BackendError):
            backend.complete("hi")

    def test_no_auth_header_without_key(self, stub_server):
        HttpCompletionBackend(stub_server, "test-model").complete("x")
        assert _StubHandler.requests_seen[-1]["auth"] is None


class TestHttpEmbeddingBackend:
    def test_rows_are_normalized(self, stub_server):
        backend = HttpEmbeddingBackend(stub_server, "embed-model")
        rows = backend.embed(["abc", "longer text"])
        assert rows.shape == (2, 3)
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-9)
        assert backend.dimension == 3

    def test_failure_raises(self, stub_server):
        _StubHandler.fail_next = 5
        backend = HttpEmbeddingBackend(
            stub_server, "embed-model", max_attempts=2, retry_wait=0.0
        )
        with pytest.raises(BackendError):
            backend.embed(["x"])


class TestMockEmbeddingBackend:
    def test_unit_norm_and_dimension(self):
        backend = MockEmbeddingBackend(dimension=48, seed=3)
        rows = backend.embed(["alpha beta", "gamma", ""])
        assert rows.shape == (3, 48)
        np.testing.assert_allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-6)

    def test_identical_text_bitwise_identical(self):
        backend = MockEmbeddingBackend()
        a = backend.embed(["some exact text"])
        b = backend.embed(["some exact text"])
        assert a.tobytes() == b.tobytes()
        fresh = MockEmbeddingBackend()
        assert fresh.embed(["some exact text"]).tobytes() == a.tobytes()

    def test_word_order_ignored(self):
        backend = MockEmbeddingBackend()
        ab = backend.embed(["alpha beta"])
        ba = backend.embed(["beta alpha"])
        assert ab.tobytes() == ba.tobytes()

    def test_different_seeds_differ(self):
        a = MockEmbeddingBackend(seed=0).embed(["hello"])
        b = MockEmbeddingBackend(seed=1).embed(["hello"])
        assert not np.array_equal(a, b)

    def test_shared_vocabulary_raises_similarity(self):
        backend = MockEmbeddingBackend()
        rows = backend.embed(["cats chase mice", "cats chase birds", "quantum flux theorem"])
        similar = float(rows[0] @ rows[1])
        dissimilar = float(rows[0] @ rows[2])
        assert similar > dissimilar


class TestEmbeddingCache:
    def test_round_trip_exact(self, tmp_path):
        cache = EmbeddingCache(tmp_path / "emb.jsonl", backend_id="mock")
        vector = np.array([0.1, -2.5, 1e-17, 3.0])
        cache.put("text", vector)
        np.testing.assert_array_equal(cache.get("text"), vector)
        reloaded = EmbeddingCache(tmp_path / "emb.jsonl", backend_id="mock")
        np.testing.assert_array_equal(reloaded.get("text"), vector)

    def test_keys_scoped_by_backend_id(self, tmp_path):
        cache = EmbeddingCache(tmp_path / "emb.jsonl", backend_id="one")
        cache.put("text", np.ones(3))
        other = EmbeddingCache(tmp_path / "emb.jsonl", backend_id="two")
        assert other.get("text") is None
