import json
import threading
import time

import httpx
import pytest

from aqllm.cost import UsageLedger
from aqllm.errors import ConfigurationError, ExhaustedError, PreconditionError, TransportError
from aqllm.gateway import (
    ChatCompletionsProvider,
    ChatRequest,
    Gateway,
    RetryPolicy,
    RoutingProvider,
    ScriptedProvider,
    complete,
    count_tokens,
    load_transcripts,
    system,
    user,
)


def req(text="hello", model="m", tag=None):
    return ChatRequest(model, (user(text),), tag=tag)


def test_scripted_ok():
    r = complete(req(), ScriptedProvider([{"response": "OK"}]), RetryPolicy(3, 0))
    assert (r.content, r.attempts) == ("OK", 1)


def test_fail_twice_then_succeed():
    sleeps = []
    script = [{"error": "boom", "times": 2}, {"response": "fine"}]
    r = complete(req(), ScriptedProvider(script), RetryPolicy(3, 0.5, 2.0), sleep=sleeps.append)
    assert r.attempts == 3 and r.content == "fine"
    assert sleeps == [0.5, 1.0]


def test_exhaustion():
    provider = ScriptedProvider([{"error": "down"}])
    with pytest.raises(ExhaustedError) as exc:
        complete(req(), provider, RetryPolicy(2, 0), sleep=lambda s: None)
    assert exc.value.attempts == 2
    assert "down" in str(exc.value.last_error)
    assert len(provider.requests) == 2


def test_script_miss_is_not_retried():
    provider = ScriptedProvider([{"match": {"model": "other"}, "response": "x"}])
    with pytest.raises(ExhaustedError) as exc:
        complete(req(), provider, RetryPolicy(5, 0))
    assert exc.value.attempts == 1


def test_matching_rules():
    script = [
        {"match": {"model": "a", "contains": ["alpha", "beta"]}, "response": "both"},
        {"match": {"model": "a", "contains": "alpha"}, "response": "alpha"},
        {"match": {"model": "b"}, "response": "b"},
    ]
    p = ScriptedProvider(script)
    assert p.send(req("alpha beta", "a"))[0] == "both"
    assert p.send(req("alpha", "a"))[0] == "alpha"
    assert p.send(req("anything", "b"))[0] == "b"


def test_count_tokens():
    assert count_tokens("") == 0
    assert count_tokens("aaaa bbbb") == 3
    assert count_tokens("abcd") == 1


def test_request_validation():
    with pytest.raises(PreconditionError):
        ChatRequest("m", ())
    with pytest.raises(PreconditionError):
        user("")
    with pytest.raises(PreconditionError):
        RetryPolicy(0)


def test_ledger_records_successful_attempt_only():
    ledger = UsageLedger()
    script = [{"error": "x", "times": 1},
              {"response": "ok", "usage": {"input_tokens": 100, "output_tokens": 7, "cached_input_tokens": 40}}]
    complete(req(), ScriptedProvider(script), RetryPolicy(2, 0), ledger)
    t = ledger.models["m"]
    assert (t.input_tokens, t.output_tokens, t.cached_input_tokens, t.calls) == (100, 7, 40, 1)


def test_concurrency_cap():
    active, peak = [0], [0]
    lock = threading.Lock()

    def latency(_):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.02)
        with lock:
            active[0] -= 1
        return 0.0

    gw = Gateway(ScriptedProvider([{"response": "ok"}], latency=latency), RetryPolicy(1, 0), max_concurrency=3)
    threads = [threading.Thread(target=gw.complete, args=(req(str(k)),)) for k in range(12)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] <= 3
    assert len(gw.transcripts) == 12


def test_transcripts_deterministic_order(tmp_path):
    gw = Gateway(ScriptedProvider([{"response": "ok"}]), RetryPolicy(1, 0), deterministic=True)
    for tag in ("b", "a", "c"):
        gw.complete(req(tag, tag=tag))
    path = gw.write_transcripts(tmp_path / "t.jsonl")
    rows = load_transcripts(path)
    assert [r["tag"] for r in rows] == ["a", "b", "c"]
    assert all(r["wall_ms"] == 0 for r in rows)


def test_replay_from_transcripts(tmp_path):
    gw = Gateway(ScriptedProvider([{"response": "first"}]), RetryPolicy(1, 0))
    request = ChatRequest("m", (system("s"), user("u")), tag="t")
    gw.complete(request)
    replay = ScriptedProvider.from_transcripts(gw.transcripts)
    assert replay.send(request)[0] == "first"


def _mock_http(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_chat_completions_adapter_parses_usage():
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers["authorization"]
        return httpx.Response(200, json={
            "choices": [{"message": {"content": "hi"}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3, "prompt_tokens_details": {"cached_tokens": 4}},
        })

    p = ChatCompletionsProvider("openai", "https://x.test/v1", "k", http=_mock_http(handler))
    content, usage = p.send(ChatRequest("gpt-4.1", (system("a"), system("b"), user("c"))))
    assert content == "hi"
    assert (usage.input_tokens, usage.cached_input_tokens, usage.output_tokens) == (12, 4, 3)
    assert seen["auth"] == "Bearer k"
    assert len(seen["body"]["messages"]) == 3


def test_deepseek_merges_system_messages():
    p = ChatCompletionsProvider("deepseek", "https://x.test", "k", merge_system=True, http=_mock_http(lambda r: None))
    msgs = p.adapt(ChatRequest("deepseek-v3", (system("a"), system("b"), user("c"))))
    assert msgs == [{"role": "system", "content": "a\n\nb"}, {"role": "user", "content": "c"}]


def test_http_rejection_carries_status():
    p = ChatCompletionsProvider("openai", "https://x.test", "k",
                                http=_mock_http(lambda r: httpx.Response(429, text="slow down")))
    with pytest.raises(TransportError) as exc:
        p.send(req())
    assert exc.value.status == 429


def test_from_env_requires_key():
    with pytest.raises(ConfigurationError):
        ChatCompletionsProvider.from_env("openai", env={})
    p = ChatCompletionsProvider.from_env("deepseek", env={"DEEPSEEK_API_KEY": "k"})
    assert p.merge_system


def test_routing():
    a, b = ScriptedProvider([{"response": "A"}]), ScriptedProvider([{"response": "B"}])
    r = RoutingProvider({"x": a}, default=b)
    assert r.send(req(model="x"))[0] == "A"
    assert r.send(req(model="y"))[0] == "B"
    with pytest.raises(ConfigurationError):
        RoutingProvider({}).send(req())
