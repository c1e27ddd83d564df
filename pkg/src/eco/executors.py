"""Stage executors backed by completion/embedding clients.

Techniques are thin prompt recipes over the shared clients; none of them is
a faithful reproduction of the method it is named after.

The text passed between stages uses one layout throughout::

    Context:
    <passage>
    ---
    <passage>

    Question: <processed question>
"""
from __future__ import annotations

import re
import time
from typing import Any, Mapping, Sequence

import numpy as np

from .backends import EndpointGenerator, MockClient, ModelEndpoint, OpenAIClient, estimate_cost
from .context import DocumentChunk, TrainingQuery
from .emulator import Context, StageError, StageOutput
from .paths import StageKind
from .tokens import count_tokens, token_spans

STEPBACK_PROMPT = (
    "Rewrite the question below as a more general, step-back question that captures the "
    "underlying concept. Reply with the rewritten question only.\n\nQuestion: {question}"
)
REWRITE_PROMPT = (
    "Rewrite the question below so that it is self-contained and precise. Reply with the "
    "rewritten question only.\n\nQuestion: {question}"
)
HYDE_PROMPT = "Write a short passage that answers the question.\n\nQuestion: {question}"
COMPRESS_PROMPT = (
    "Compress the context below, keeping only sentences relevant to the question.\n\n"
    "Context:\n{context}\n\nQuestion: {question}"
)

_LAYOUT_RE = re.compile(r"^(?:Context:\n(?P<context>.*?)\n\n)?Question: (?P<question>.*)$", re.S)


def split_layout(text: str) -> tuple[str, str]:
    m = _LAYOUT_RE.match(text)
    if not m:
        return "", text
    return m.group("context") or "", m.group("question")


def join_layout(context: str, question: str) -> str:
    if context:
        return f"Context:\n{context}\n\nQuestion: {question}"
    return f"Question: {question}"


class ChunkIndex:
    """Dense nearest-neighbour index over document chunks."""

    def __init__(self, chunks: Sequence[DocumentChunk], embedder):
        self.chunks = list(chunks)
        self.embedder = embedder
        self.matrix = embedder.embed_many([c.text for c in self.chunks]) if self.chunks else np.zeros((0, 1))

    def search(self, text: str, top_k: int) -> list[DocumentChunk]:
        if not self.chunks or top_k <= 0:
            return []
        v = self.embedder.embed(text)
        scores = self.matrix @ v
        order = np.argsort(-scores, kind="stable")[:top_k]
        return [self.chunks[i] for i in order]


class BackendExecutors:
    """Runs every stage through real (or mock) clients.

    ``helper`` names the endpoint used by LLM-assisted q/r/c techniques.
    Local stages (retrieval, truncation) report measured wall-clock time
    unless ``simulated_latency_ms`` is set in their configuration or a fixed
    ``local_latency_ms`` is given here (used with mock clients for
    reproducible records).
    """

    def __init__(self, client: OpenAIClient | MockClient, endpoints: Mapping[str, ModelEndpoint],
                 index: ChunkIndex | None = None, helper: str | None = None,
                 local_latency_ms: float | None = None):
        self.client = client
        self.endpoints = dict(endpoints)
        self.index = index
        self.helper = helper
        self.local_latency_ms = local_latency_ms

    def _endpoint(self, name: str | None) -> ModelEndpoint:
        if name is None or name not in self.endpoints:
            raise StageError(f"no endpoint named {name!r}")
        return self.endpoints[name]

    def _helper_call(self, prompt: str, theta: Mapping[str, Any]) -> tuple[str, float, float, int]:
        ep = self._endpoint(theta.get("helper", self.helper))
        res = self.client.complete(ep, prompt)
        return res.text.strip(), res.total_ms, estimate_cost(res.input_tokens, ep), res.input_tokens

    def run(self, stage: StageKind, impl: str, theta: Mapping[str, Any],
            query: TrainingQuery, upstream: Context) -> StageOutput:
        handler = getattr(self, f"_{stage.value}_{impl.replace('-', '_')}", None)
        if handler is None:
            if stage is StageKind.MODEL_SELECTION:
                return self._model(impl, theta, upstream)
            raise StageError(f"no executor for {stage.value}={impl}")
        return handler(theta, query, upstream)

    # query processing
    def _q_stepback(self, theta, query, upstream):
        context, question = split_layout(upstream.text)
        text, ms, cost, _ = self._helper_call(STEPBACK_PROMPT.format(question=question), theta)
        return StageOutput(join_layout(context, f"{question}\n(Broader question: {text})"), ms, cost)

    def _q_rewrite(self, theta, query, upstream):
        context, question = split_layout(upstream.text)
        text, ms, cost, _ = self._helper_call(REWRITE_PROMPT.format(question=question), theta)
        return StageOutput(join_layout(context, text or question), ms, cost)

    # retrieval
    def _retrieve(self, probe: str, theta, upstream, extra_ms=0.0, extra_cost=0.0):
        if self.index is None:
            raise StageError("retrieval requires a chunk index")
        context, question = split_layout(upstream.text)
        start = time.perf_counter()
        hits = self.index.search(probe, int(theta.get("top_k", 3)))
        measured = (time.perf_counter() - start) * 1000.0
        ms = theta.get("simulated_latency_ms", measured if self.local_latency_ms is None else self.local_latency_ms)
        passages = "\n---\n".join(c.text.strip() for c in hits)
        merged = "\n---\n".join(p for p in (context, passages) if p)
        return StageOutput(join_layout(merged, question), float(ms) + extra_ms, extra_cost)

    def _r_rag(self, theta, query, upstream):
        return self._retrieve(split_layout(upstream.text)[1], theta, upstream)

    def _r_hyde(self, theta, query, upstream):
        question = split_layout(upstream.text)[1]
        text, ms, cost, _ = self._helper_call(HYDE_PROMPT.format(question=question), theta)
        return self._retrieve(text or question, theta, upstream, ms, cost)

    # context processing
    def _c_truncate(self, theta, query, upstream):
        context, question = split_layout(upstream.text)
        limit = int(theta.get("max_tokens", 256))
        spans = token_spans(context)
        if len(spans) > limit:
            context = context[: spans[limit][0]].rstrip()
        fixed = 0.1 if self.local_latency_ms is None else self.local_latency_ms
        return StageOutput(join_layout(context, question), float(theta.get("simulated_latency_ms", fixed)))

    def _c_compress(self, theta, query, upstream):
        context, question = split_layout(upstream.text)
        if not context:
            return StageOutput(upstream.text, 0.0)
        text, ms, cost, _ = self._helper_call(COMPRESS_PROMPT.format(context=context, question=question), theta)
        return StageOutput(join_layout(text, question), ms, cost)

    # model
    def _model(self, impl: str, theta: Mapping[str, Any], upstream: Context) -> StageOutput:
        ep = self._endpoint(theta.get("model", impl))
        params = {k: v for k, v in theta.items() if k in ("temperature", "top_p", "max_tokens", "presence_penalty")}
        prompt = upstream.text + "\n\nAnswer:"
        res = self.client.complete(ep, prompt, params)
        max_tokens = int(params.get("max_tokens", ep.max_tokens))
        prompt_tokens = res.input_tokens or count_tokens(prompt)
        return StageOutput(res.text, res.ttft_ms, estimate_cost(prompt_tokens, ep, max_tokens), prompt_tokens)


def helper_generator(client, endpoints: Mapping[str, ModelEndpoint], name: str) -> EndpointGenerator:
    return EndpointGenerator(client, endpoints[name])
