import json
import random

import httpx
import numpy as np
import pytest

from eco.backends import (
    BackendTimeout, EndpointGenerator, HashingEmbedder, MockClient, MockScript, ModelEndpoint, OpenAIClient,
    RemoteEmbedder, UpstreamError, api_key_env, embedder_from_id, estimate_cost, request_digest,
)

EP = ModelEndpoint("edge-small", "edge", "http://edge.test", cost_alpha=1e-6, cost_beta=2e-6, max_tokens=64)


def sse(*chunks: dict) -> bytes:
    return "".join(f"data: {json.dumps(c)}\n\n" for c in chunks).encode() + b"data: [DONE]\n\n"


def client_for(handler) -> OpenAIClient:
    return OpenAIClient(httpx.Client(transport=httpx.MockTransport(handler)))


# -- cost model

def test_cost_zero_and_worked_example():
    zero = ModelEndpoint("z")
    assert estimate_cost(12345, zero, 99) == 0
    ep = ModelEndpoint("x", cost_alpha=0.001, cost_beta=0.002)
    assert estimate_cost(100, ep, 500) == pytest.approx(1.1, abs=1e-12)


def test_cost_matches_formula_oracle():
    rng = random.Random(4)
    for _ in range(500):
        a, b = rng.uniform(0, 1e-3), rng.uniform(0, 1e-3)
        q, m = rng.randint(0, 10_000), rng.randint(1, 4096)
        ep = ModelEndpoint("x", cost_alpha=a, cost_beta=b, max_tokens=m)
        assert estimate_cost(q, ep, m) == a * q + b * m
        assert estimate_cost(q, ep) == estimate_cost(q, ep, m)


def test_cost_rejects_negative():
    with pytest.raises(ValueError):
        estimate_cost(-1, EP, 3)


def test_endpoint_invariants():
    with pytest.raises(ValueError):
        ModelEndpoint("x", cost_alpha=-1)
    with pytest.raises(ValueError):
        ModelEndpoint("x", max_tokens=0)
    with pytest.raises(ValueError):
        ModelEndpoint("x", tier="fog")
    assert ModelEndpoint.from_dict({"id": "a", "tier": "cloud", "extra": 1}).tier == "cloud"


def test_api_key_env_name():
    assert api_key_env("cloud-a.v2") == "ECO_LLM_API_KEY_CLOUD_A_V2"


# -- OpenAI-compatible client

def test_streaming_measures_ttft_and_usage(monkeypatch):
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        body = sse(
            {"choices": [{"delta": {"role": "assistant"}}]},
            {"choices": [{"delta": {"content": "hello"}}]},
            {"choices": [{"delta": {"content": " world"}}]},
            {"choices": [], "usage": {"prompt_tokens": 7, "completion_tokens": 2}},
        )
        return httpx.Response(200, content=body, headers={"content-type": "text/event-stream"})

    monkeypatch.setenv(api_key_env(EP.id), "sekrit")
    res = client_for(handler).complete(EP, "say hi", {"temperature": 0})
    assert res.text == "hello world"
    assert 0 <= res.ttft_ms < res.total_ms
    assert (res.input_tokens, res.output_tokens) == (7, 2)
    assert seen["body"]["stream"] is True and seen["body"]["temperature"] == 0
    assert seen["body"]["messages"] == [{"role": "user", "content": "say hi"}]
    assert seen["auth"] == "Bearer sekrit"


def test_missing_usage_falls_back_to_tokenizer():
    def handler(request):
        return httpx.Response(200, content=sse({"choices": [{"delta": {"content": "one two three"}}]}))
    res = client_for(handler).complete(EP, "a b c d")
    assert (res.input_tokens, res.output_tokens) == (4, 3)


def test_http_error_is_typed_with_status():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503, text="overloaded")
    with pytest.raises(UpstreamError) as info:
        client_for(handler).complete(EP, "x")
    assert info.value.status == 503
    assert len(calls) == 1  # no retry


def test_timeout_is_typed():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)
    with pytest.raises(BackendTimeout):
        client_for(handler).complete(EP, "x")


def test_unreachable_is_upstream_error():
    def handler(request):
        raise httpx.ConnectError("refused", request=request)
    with pytest.raises(UpstreamError) as info:
        client_for(handler).complete(EP, "x")
    assert info.value.status is None


def test_remote_embedding_dimension_checked():
    def handler(request):
        return httpx.Response(200, json={"data": [{"embedding": [0.5, 0.5, 0.0]}]})
    client = client_for(handler)
    assert RemoteEmbedder(client, EP, 3).embed("x").tolist() == [0.5, 0.5, 0.0]
    with pytest.raises(Exception, match="dimension"):
        RemoteEmbedder(client, EP, 4).embed("x")


# -- mock backend

def test_scripted_mock():
    script = MockScript()
    script.add(EP.id, "X", "Y", 12.0)
    res = MockClient(script).complete(EP, "X")
    assert res.text == "Y" and res.ttft_ms == 12.0
    assert res.ttft_ms <= res.total_ms


def test_mock_determinism_and_counters():
    mock = MockClient()
    runs = [mock.complete(EP, f"Context:\nalpha beta beta\n\nQuestion: q{i % 2}") for i in range(6)]
    assert runs[0] == runs[2] == runs[4]
    assert mock.script.counters[("complete", EP.id)] == 6


def test_mock_failing_endpoint():
    with pytest.raises(UpstreamError):
        MockClient(fail_endpoints={EP.id}).complete(EP, "x")


def test_request_digest_depends_on_params():
    assert request_digest("a", "p") == request_digest("a", "p", {})
    assert request_digest("a", "p") != request_digest("a", "p", {"max_tokens": 3})


def test_endpoint_generator_adapts_client():
    script = MockScript()
    script.add(EP.id, "ping", "pong", 1.0)
    assert EndpointGenerator(MockClient(script), EP).generate("ping") == "pong"


# -- embedders

def test_empty_embedding_is_degenerate():
    v = HashingEmbedder(dim=32).embed("")
    assert np.linalg.norm(v) == 0 and HashingEmbedder.is_degenerate(v)


def test_cosine_matches_dot_product_oracle():
    emb = HashingEmbedder(dim=128, seed=5)
    a, b = emb.embed("queue retention policy"), emb.embed("gateway rate limiter")
    oracle = sum(x * y for x, y in zip(a.tolist(), b.tolist())) / (
        sum(x * x for x in a.tolist()) ** 0.5 * sum(y * y for y in b.tolist()) ** 0.5)
    assert float(a @ b) == pytest.approx(oracle, abs=1e-12)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-9


def test_embedder_id_round_trip():
    emb = HashingEmbedder(dim=48, seed=3, ngram_range=(2, 4))
    back = embedder_from_id(emb.id)
    assert np.array_equal(back.embed("abc def"), emb.embed("abc def"))
    with pytest.raises(ValueError):
        embedder_from_id("remote:x")
