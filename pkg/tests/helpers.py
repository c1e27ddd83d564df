"""Small deterministic building blocks shared by several test modules."""
from __future__ import annotations

import math
from collections import Counter

from eco.backends import HashingEmbedder
from eco.cca import build_map
from eco.context import QueryType, TrainingQuery
from eco.dsqe import DsqeConfig, train_from_map
from eco.emulator import EvalRecord, HintJudge, StageError, StageOutput, run_exploration
from eco.paths import enumerate_paths, load_registry
from eco.rps import Selector, TrainingIndex, build_path_stats, component_stats
from eco.world import WorldExecutors

LATENCY = {"q": 30.0, "r": 50.0, "c": 20.0, "m": 100.0}


class CountingExecutors:
    """Each stage tags the text and reports a fixed latency and cost."""

    def __init__(self, accuracy=None, fail_impl: str | None = None):
        self.counts: Counter = Counter()
        self.accuracy = accuracy
        self.fail_impl = fail_impl

    def run(self, stage, impl, theta, query, upstream):
        self.counts[stage.value] += 1
        if impl == self.fail_impl:
            raise StageError(f"{impl} exploded")
        tag = f"{impl}{sorted(theta.items())}"
        if stage.value == "m":
            hint = self.accuracy(query, upstream, impl) if self.accuracy else None
            text = f"{query.reference_answer} {tag}" if hint is None else tag
            return StageOutput(text, LATENCY["m"] + len(impl), 0.001 * len(upstream.text), 7, hint)
        return StageOutput(f"{upstream.text} [{tag}]", LATENCY[stage.value], 0.0001)


def grid_registry(models=("m1", "m2", "m3", "m4"), contexts=("none", "trim")):
    return load_registry({"stages": {
        "q": [{"id": "none"}],
        "r": [{"id": "rag", "params": [{"name": "top_k", "kind": "static", "value": 2}]}],
        "c": [{"id": c} for c in contexts],
        "m": [{"id": m} for m in models],
    }})


def grid_paths(**kw):
    return enumerate_paths(grid_registry(**kw))


def queries(n: int, types=(QueryType.RETRIEVAL,)) -> list[TrainingQuery]:
    return [TrainingQuery(f"q{i:03d}", f"question number {i} about topic {i % 7}", types[i % len(types)],
                          f"answer {i} alpha beta", "mention alpha") for i in range(n)]


def records(query_id: str, rows) -> list[EvalRecord]:
    """rows: (path_id, accuracy, ttft_ms, cost)"""
    return [EvalRecord("b", query_id, pid, acc, ttft, cost) for pid, acc, ttft, cost in rows]


def pid(q="none", r="none", c="none", m="m1") -> str:
    return f"q={q}{{}}|r={r}{{}}|c={c}{{}}|m={m}{{}}"



def world_pipeline(world, budget=math.inf, seed=0, dim=128, epochs=50, tau=0.1, k=5, sample_seed=None):
    """Explore, analyze and train in memory on a synthetic world; returns (selector, phi, records)."""
    emb = HashingEmbedder(dim, seed=0)
    train_q = world.by_split("train")
    store, _ = run_exploration("test", train_q, world.paths, WorldExecutors(world), HintJudge(), budget,
                               seed if sample_seed is None else sample_seed, workers=1, embedder=emb)
    recs = store.records
    phi = build_map(recs, tau=tau, query_ids=[q.id for q in train_q])
    texts, ids = [q.text for q in train_q if q.id in phi], [q.id for q in train_q if q.id in phi]
    model = train_from_map(texts, ids, phi, emb, DsqeConfig(epochs=epochs, seed=seed))
    index = TrainingIndex.build(model, emb.embed_many(texts), ids, phi)
    stats = build_path_stats(recs, world.endpoints)
    selector = Selector(model, emb, stats, index, component_stats(recs), world.paths, k=k)
    return selector, phi, recs
