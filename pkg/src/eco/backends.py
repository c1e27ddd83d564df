"""Clients for text-generation and embedding endpoints, plus the cost model.

Every remote endpoint is spoken to in the OpenAI-compatible wire shape
(``/v1/chat/completions`` and ``/v1/embeddings``).  ``MockClient`` stands in
for any endpoint with fully deterministic, scripted behaviour.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol

import httpx
import numpy as np

from . import kernels
from .tokens import count_tokens

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """Any failure talking to a model or embedding endpoint."""


class UpstreamError(BackendError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class BackendTimeout(BackendError):
    pass


@dataclass(frozen=True)
class ModelEndpoint:
    id: str
    tier: str = "edge"  # "edge" | "cloud"
    base_url: str = ""
    model: str | None = None
    cost_alpha: float = 0.0  # per input token
    cost_beta: float = 0.0  # per output token
    max_tokens: int = 256
    timeout_ms: float = 30_000.0

    def __post_init__(self) -> None:
        if self.cost_alpha < 0 or self.cost_beta < 0:
            raise ValueError(f"endpoint {self.id!r}: cost factors must be non-negative")
        if self.max_tokens < 1:
            raise ValueError(f"endpoint {self.id!r}: max_tokens must be >= 1")
        if self.tier not in ("edge", "cloud"):
            raise ValueError(f"endpoint {self.id!r}: tier must be edge or cloud")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ModelEndpoint":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass(frozen=True)
class GenerationResult:
    text: str
    ttft_ms: float
    total_ms: float
    input_tokens: int
    output_tokens: int


def estimate_cost(query_tokens: int, endpoint: ModelEndpoint, max_tokens: int | None = None) -> float:
    """alpha * |q| + beta * max_tokens, with |q| the full prompt size in tokens."""
    if max_tokens is None:
        max_tokens = endpoint.max_tokens
    if query_tokens < 0 or max_tokens < 0:
        raise ValueError("token counts must be non-negative")
    return endpoint.cost_alpha * query_tokens + endpoint.cost_beta * max_tokens


def api_key_env(endpoint_id: str) -> str:
    return "ECO_LLM_API_KEY_" + re.sub(r"[^A-Za-z0-9]", "_", endpoint_id).upper()


def chat_body(endpoint: ModelEndpoint, prompt: str, params: Mapping[str, Any] | None = None,
              stream: bool = True) -> dict[str, Any]:
    params = dict(params or {})
    body: dict[str, Any] = {
        "model": endpoint.model or endpoint.id,
        "messages": [{"role": "user", "content": prompt}],
        "max_tokens": int(params.pop("max_tokens", endpoint.max_tokens)),
        "stream": stream,
    }
    if stream:
        body["stream_options"] = {"include_usage": True}
    body.update(params)
    return body


class OpenAIClient:
    """Client for any OpenAI-compatible server (Ollama, vLLM, OpenAI, ...)."""

    def __init__(self, http: httpx.Client | None = None):
        self._http = http or httpx.Client()

    def _headers(self, endpoint: ModelEndpoint) -> dict[str, str]:
        key = os.environ.get(api_key_env(endpoint.id))
        return {"Authorization": f"Bearer {key}"} if key else {}

    def complete(self, endpoint: ModelEndpoint, prompt: str,
                 params: Mapping[str, Any] | None = None) -> GenerationResult:
        url = endpoint.base_url.rstrip("/") + "/v1/chat/completions"
        body = chat_body(endpoint, prompt, params)
        timeout = endpoint.timeout_ms / 1000.0
        pieces: list[str] = []
        usage: dict[str, Any] = {}
        start = time.perf_counter()
        ttft: float | None = None
        try:
            with self._http.stream("POST", url, json=body, headers=self._headers(endpoint),
                                   timeout=timeout) as resp:
                if resp.status_code >= 400:
                    resp.read()
                    raise UpstreamError(f"{endpoint.id}: HTTP {resp.status_code}: {resp.text[:200]}",
                                        resp.status_code)
                for line in resp.iter_lines():
                    if not line.startswith("data:"):
                        continue
                    data = line[5:].strip()
                    if data == "[DONE]":
                        break
                    chunk = json.loads(data)
                    if chunk.get("usage"):
                        usage = chunk["usage"]
                    for choice in chunk.get("choices") or ():
                        delta = (choice.get("delta") or {}).get("content")
                        if delta:
                            if ttft is None:
                                ttft = (time.perf_counter() - start) * 1000.0
                            pieces.append(delta)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"{endpoint.id}: timed out after {endpoint.timeout_ms} ms") from exc
        except httpx.HTTPError as exc:
            raise UpstreamError(f"{endpoint.id}: {exc}") from exc
        total = (time.perf_counter() - start) * 1000.0
        text = "".join(pieces)
        if ttft is None:
            ttft = total
        return GenerationResult(
            text=text,
            ttft_ms=ttft,
            total_ms=total,
            input_tokens=int(usage.get("prompt_tokens", count_tokens(prompt))),
            output_tokens=int(usage.get("completion_tokens", count_tokens(text))),
        )

    def embed(self, endpoint: ModelEndpoint, text: str) -> np.ndarray:
        url = endpoint.base_url.rstrip("/") + "/v1/embeddings"
        try:
            resp = self._http.post(url, json={"model": endpoint.model or endpoint.id, "input": text},
                                   headers=self._headers(endpoint), timeout=endpoint.timeout_ms / 1000.0)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"{endpoint.id}: timed out") from exc
        except httpx.HTTPError as exc:
            raise UpstreamError(f"{endpoint.id}: {exc}") from exc
        if resp.status_code >= 400:
            raise UpstreamError(f"{endpoint.id}: HTTP {resp.status_code}", resp.status_code)
        return np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)


# -- mock backend -------------------------------------------------------------

def request_digest(endpoint_id: str, prompt: str, params: Mapping[str, Any] | None = None) -> str:
    doc = {"endpoint": endpoint_id, "prompt": prompt, "params": dict(params or {})}
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


@dataclass(frozen=True)
class ScriptedResponse:
    text: str
    ttft_ms: float
    accuracy_hint: float | None = None


@dataclass
class MockScript:
    """Scripted responses keyed by request digest, plus invocation counters."""

    responses: dict[str, ScriptedResponse] = field(default_factory=dict)
    counters: Counter = field(default_factory=Counter)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, endpoint_id: str, prompt: str, text: str, ttft_ms: float,
            params: Mapping[str, Any] | None = None, accuracy_hint: float | None = None) -> str:
        digest = request_digest(endpoint_id, prompt, params)
        self.responses[digest] = ScriptedResponse(text, ttft_ms, accuracy_hint)
        return digest

    def lookup(self, digest: str) -> ScriptedResponse | None:
        return self.responses.get(digest)

    def count(self, key: Any) -> None:
        with self._lock:
            self.counters[key] += 1


_GEN_TYPE_RE = re.compile(r"Generate a challenging (\w+) question from this content: (.*?)\n\s*Requirements:", re.S)
_CLEAN_RE = re.compile(r"Text to clean: (.*?)\n\s*Cleaned text:", re.S)
_CONTEXT_RE = re.compile(r"Context:\n(.*?)\n\nQuestion:", re.S)

_QUESTION_STEMS = {
    "retrieval": "What exactly does the documentation state about",
    "explanation": "Explain why and how the system behaves with respect to",
    "analysis": "Analyze the trade-offs involved in",
    "solving": "How would you troubleshoot a failure involving",
    "comparison": "Compare the different modes and settings for",
    "recommendation": "Which configuration would you recommend for",
}


class MockClient:
    """Deterministic stand-in for any endpoint.

    Scripted prompts return their scripted text; everything else gets a
    rule-based answer derived from the prompt, so identical requests always
    produce identical results.
    """

    def __init__(self, script: MockScript | None = None, fail_endpoints: set[str] | None = None):
        self.script = script or MockScript()
        self.fail_endpoints = set(fail_endpoints or ())

    def complete(self, endpoint: ModelEndpoint, prompt: str,
                 params: Mapping[str, Any] | None = None) -> GenerationResult:
        self.script.count(("complete", endpoint.id))
        if endpoint.id in self.fail_endpoints:
            raise UpstreamError(f"{endpoint.id}: connection refused", None)
        max_tokens = int((params or {}).get("max_tokens", endpoint.max_tokens))
        scripted = self.script.lookup(request_digest(endpoint.id, prompt, params))
        in_tokens = count_tokens(prompt)
        if scripted is not None:
            text, ttft = scripted.text, scripted.ttft_ms
        else:
            text = _default_response(prompt, max_tokens)
            base = 40.0 if endpoint.tier == "edge" else 250.0
            ttft = base + 0.02 * in_tokens
        out_tokens = count_tokens(text)
        return GenerationResult(text, ttft, ttft + 1.0 * out_tokens, in_tokens, out_tokens)

    def embed(self, endpoint: ModelEndpoint, text: str) -> np.ndarray:
        self.script.count(("embed", endpoint.id))
        if endpoint.id in self.fail_endpoints:
            raise UpstreamError(f"{endpoint.id}: connection refused", None)
        return HashingEmbedder().embed(text)


def _default_response(prompt: str, max_tokens: int) -> str:
    m = _GEN_TYPE_RE.search(prompt)
    if m:
        qtype, content = m.group(1), " ".join(m.group(2).split())
        topic = " ".join(content.split()[:12]).rstrip(".,;:")
        return json.dumps({
            "question": f"{_QUESTION_STEMS.get(qtype, 'What about')} {topic}?",
            "answer": " ".join(content.split()[:60]),
            "evaluation_guideline": "Check that the answer covers: " + ", ".join(content.split()[:8]),
        })
    m = _CLEAN_RE.search(prompt)
    if m:
        return m.group(1).strip()
    if "Answer yes or no" in prompt:
        return "yes"
    m = _CONTEXT_RE.search(prompt)
    body = m.group(1) if m else prompt
    seen: dict[str, None] = {}
    for word in body.split():
        seen.setdefault(word, None)
    return " ".join(list(seen)[: max(1, min(max_tokens, 64))])


# -- text generation adapter ---------------------------------------------------

class TextGenerationClient(Protocol):
    def generate(self, prompt: str) -> str: ...


class EndpointGenerator:
    """Adapts a completion client + endpoint to the ``generate(prompt)`` shape."""

    def __init__(self, client: OpenAIClient | MockClient, endpoint: ModelEndpoint):
        self.client = client
        self.endpoint = endpoint

    def generate(self, prompt: str) -> str:
        return self.client.complete(self.endpoint, prompt).text


# -- embedders ------------------------------------------------------------------

class HashingEmbedder:
    """Seeded feature hashing of character n-grams, L2-normalized.

    Never fails.  Empty input maps to the zero vector, which callers must
    treat as degenerate (see ``is_degenerate``).
    """

    def __init__(self, dim: int = 256, seed: int = 0, ngram_range: tuple[int, int] = (3, 5)):
        if dim < 1 or seed < 0:
            raise ValueError("dim must be >= 1 and seed >= 0")
        self.dim = dim
        self.seed = seed
        self.ngram_range = ngram_range

    @property
    def id(self) -> str:
        lo, hi = self.ngram_range
        return f"hashing:dim={self.dim},seed={self.seed},ngrams={lo}-{hi}"

    def embed(self, text: str) -> np.ndarray:
        norm_text = " ".join(text.lower().split())
        if not norm_text:
            return np.zeros(self.dim)
        vec = kernels.hash_ngrams(f" {norm_text} ", self.dim, self.seed, *self.ngram_range)
        n = float(np.linalg.norm(vec))
        return vec / n if n > 0 else vec

    def embed_many(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self.embed(t) for t in texts])

    @staticmethod
    def is_degenerate(vec: np.ndarray) -> bool:
        return float(np.linalg.norm(vec)) == 0.0


class RemoteEmbedder:
    def __init__(self, client: OpenAIClient | MockClient, endpoint: ModelEndpoint, dim: int):
        self.client = client
        self.endpoint = endpoint
        self.dim = dim

    @property
    def id(self) -> str:
        return f"remote:{self.endpoint.id}"

    def embed(self, text: str) -> np.ndarray:
        vec = self.client.embed(self.endpoint, text)
        if vec.shape != (self.dim,):
            raise BackendError(f"{self.endpoint.id}: expected dimension {self.dim}, got {vec.shape}")
        return vec

    def embed_many(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self.embed(t) for t in texts])

    is_degenerate = staticmethod(HashingEmbedder.is_degenerate)


def embedder_from_id(embedder_id: str) -> HashingEmbedder:
    """Rebuild a hashing embedder from its id string."""
    m = re.fullmatch(r"hashing:dim=(\d+),seed=(\d+),ngrams=(\d+)-(\d+)", embedder_id)
    if not m:
        raise ValueError(f"cannot rebuild embedder {embedder_id!r} without an endpoint")
    dim, seed, lo, hi = (int(g) for g in m.groups())
    return HashingEmbedder(dim, seed, (lo, hi))


def embed(text: str, embedder: HashingEmbedder | RemoteEmbedder) -> np.ndarray:
    return embedder.embed(text)
