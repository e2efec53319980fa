import json
import threading
import time

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradekit.gateway import (
    BackendConfig,
    Completion,
    Gateway,
    HTTPBackend,
    PermanentError,
    RecordStore,
    ReplayMiss,
    TransientError,
    bundle_key,
    cache_key,
    replay_backend,
)
from gradekit.prompts import PromptBundle

CONFIG = BackendConfig("http://llm.test/v1", "model-x", credential_source="TEST_LLM_KEY", max_retries=3)
BUNDLE = PromptBundle("system text", "user text")


def chat_response(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}], "usage": {"prompt_tokens": 3, "completion_tokens": 2}}


def http_gateway(handler, **kwargs):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return Gateway(HTTPBackend(client), sleep=lambda s: None, **kwargs)


def test_retry_after_429(monkeypatch):
    monkeypatch.setenv("TEST_LLM_KEY", "secret-token")
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) == 1:
            return httpx.Response(429, json={"error": "slow down"})
        return httpx.Response(200, json=chat_response("graded"))

    gw = http_gateway(handler)
    assert gw.complete(BUNDLE, CONFIG) == "graded"
    assert len(calls) == 2
    sent = json.loads(calls[1].content)
    assert sent["model"] == "model-x" and sent["temperature"] == 0
    assert [m["role"] for m in sent["messages"]] == ["system", "user"]
    assert calls[1].headers["authorization"] == "Bearer secret-token"
    assert str(calls[1].url) == "http://llm.test/v1/chat/completions"


def test_permanent_error_not_retried():
    calls = []

    def handler(request):
        calls.append(request)
        return httpx.Response(400, json={"error": "bad"})

    with pytest.raises(PermanentError):
        http_gateway(handler).complete(BUNDLE, CONFIG)
    assert len(calls) == 1


def test_retries_exhausted():
    sleeps = []
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(503)))
    gw = Gateway(HTTPBackend(client), sleep=sleeps.append, backoff_base=0.5)
    with pytest.raises(TransientError):
        gw.complete(BUNDLE, CONFIG)
    assert sleeps == [0.5, 1.0, 2.0]


def test_cache_hit_makes_no_request(tmp_path, monkeypatch):
    monkeypatch.setenv("TEST_LLM_KEY", "secret-token")
    calls = []

    def handler(request):
        calls.append(request)
        return httpx.Response(200, json=chat_response("once"))

    gw = http_gateway(handler, cache_dir=tmp_path)
    assert gw.complete(BUNDLE, CONFIG) == "once"
    assert gw.complete(BUNDLE, CONFIG) == "once"
    assert len(calls) == 1 and gw.network_calls == 1
    record = json.loads(next(tmp_path.glob("*.json")).read_text())
    assert record["cache_key"] == bundle_key(BUNDLE, CONFIG)
    assert record["request"]["temperature"] == 0
    assert "secret-token" not in json.dumps(record)


def test_record_then_replay(tmp_path):
    bundles = [PromptBundle("s", f"user {i}") for i in range(3)]
    recorder = Gateway(lambda b, c, k: Completion(b.user.upper()), cache_dir=tmp_path)
    recorded = [recorder.complete(b, CONFIG) for b in bundles]
    replay = Gateway(replay_backend(tmp_path))
    assert [replay.complete(b, CONFIG) for b in bundles] == recorded
    assert len(RecordStore(tmp_path)) == 3


def test_replay_miss_names_key(tmp_path):
    Gateway(lambda b, c, k: Completion("x"), cache_dir=tmp_path).complete(BUNDLE, CONFIG)
    altered = PromptBundle("system text", "user text ")
    with pytest.raises(ReplayMiss) as info:
        Gateway(replay_backend(tmp_path)).complete(altered, CONFIG)
    assert info.value.cache_key == bundle_key(altered, CONFIG)
    assert bundle_key(altered, CONFIG) in str(info.value)


@given(
    st.tuples(st.text(max_size=5), st.text(max_size=5), st.text(max_size=5), st.sampled_from([0.0, 0.5])),
    st.tuples(st.text(max_size=5), st.text(max_size=5), st.text(max_size=5), st.sampled_from([0.0, 0.5])),
)
def test_cache_key_changes_iff_inputs_change(a, b):
    assert (cache_key(*a) == cache_key(*b)) == (a == b)


def test_in_flight_bound():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def backend(bundle, config, key):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.01)
        with lock:
            state["now"] -= 1
        return Completion(bundle.user)

    gw = Gateway(backend, max_in_flight=3)
    bundles = [PromptBundle("s", str(i)) for i in range(30)]
    # oversubscribe the gateway from more threads than it allows in flight
    threads = [threading.Thread(target=lambda b=b: gw.complete(b, CONFIG)) for b in bundles]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert state["peak"] <= 3
    assert gw.complete_many(bundles[:5], CONFIG) == [str(i) for i in range(5)]
