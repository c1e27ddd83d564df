"""Budgeted exploration of (query, path) pairs with prefix caching.

Exploration runs in two phases.  A stratified, semantically spread set of
representative queries is evaluated on every path; the resulting per-type
path rankings then decide which few paths each remaining query is run on.
"""
from __future__ import annotations

import json
import logging
import math
import os
import random
import threading
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .backends import BackendError, EndpointGenerator
from .context import QUERY_TYPES, QueryType, TrainingQuery, round_half_up
from .paths import STAGES, PathSpec, StageChoice, StageKind, path_prefix_id
from .tokens import words

log = logging.getLogger(__name__)

EXHAUSTIVE = math.inf
KMEANS_ITERATIONS = 25
TOP_SHARE = 0.8


# -- stage execution ------------------------------------------------------------

@dataclass(frozen=True)
class Context:
    """Text handed from one stage to the next, plus the choices that produced it."""

    text: str
    trail: tuple[StageChoice, ...] = ()


@dataclass(frozen=True)
class StageOutput:
    text: str
    latency_ms: float
    cost: float = 0.0
    prompt_tokens: int = 0
    accuracy_hint: float | None = None


class StageExecutor(Protocol):
    def run(self, stage: StageKind, impl: str, theta: Mapping[str, Any],
            query: TrainingQuery, upstream: Context) -> StageOutput: ...


class StageError(RuntimeError):
    pass


@dataclass(frozen=True)
class CacheEntry:
    context: Context
    latency_ms: float  # accumulated over the prefix
    cost: float
    stage_latency: tuple[float, ...]
    stage_cost: tuple[float, ...]


class PrefixCache:
    """Intermediate contexts keyed by (query, path prefix). First writer wins."""

    def __init__(self) -> None:
        self._entries: dict[tuple[str, str], CacheEntry] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, query_key: str, prefix_id: str) -> CacheEntry | None:
        with self._lock:
            entry = self._entries.get((query_key, prefix_id))
            if entry is None:
                self.misses += 1
            else:
                self.hits += 1
            return entry

    def put(self, query_key: str, prefix_id: str, entry: CacheEntry) -> CacheEntry:
        with self._lock:
            return self._entries.setdefault((query_key, prefix_id), entry)

    def __len__(self) -> int:
        return len(self._entries)

    def stats(self) -> dict[str, int]:
        return {"entries": len(self), "hits": self.hits, "misses": self.misses}


# -- judges ---------------------------------------------------------------------

def overlap_f1(response: str, reference: str) -> float:
    """Token-overlap F1 between a response and the reference answer."""
    pred, gold = Counter(words(response)), Counter(words(reference))
    if not pred or not gold:
        return 1.0 if pred == gold else 0.0
    common = sum((pred & gold).values())
    if common == 0:
        return 0.0
    precision = common / sum(pred.values())
    recall = common / sum(gold.values())
    return 2 * precision * recall / (precision + recall)


class OverlapJudge:
    uses_hints = False

    def score(self, response: str, reference: str, guideline: str) -> float:
        return overlap_f1(response, reference)


class HintJudge(OverlapJudge):
    """Trusts an executor-supplied accuracy hint; overlap F1 otherwise."""

    uses_hints = True


class JudgeError(RuntimeError):
    pass


JUDGE_PROMPT = (
    "You are grading an assistant's answer.\n\n"
    "Evaluation guideline: {guideline}\n\n"
    "Reference answer: {reference}\n\n"
    "Assistant answer: {response}\n\n"
    "Score how well the assistant answer satisfies the guideline and agrees with the "
    "reference, from 0 (wrong) to 1 (fully correct). Reply with only the number."
)


class LLMJudge:
    uses_hints = False

    def __init__(self, generator: EndpointGenerator):
        self.generator = generator

    def score(self, response: str, reference: str, guideline: str) -> float:
        prompt = JUDGE_PROMPT.format(guideline=guideline, reference=reference, response=response)
        for _ in range(2):
            text = self.generator.generate(prompt)
            try:
                value = float(text.strip().split()[0].rstrip(".,"))
            except (ValueError, IndexError):
                continue
            if 0.0 <= value <= 1.0:
                return value
        raise JudgeError(f"unparseable judge output {text[:80]!r}")


def judge(response: str, reference_answer: str, guideline: str, judge_client=None) -> float:
    return (judge_client or OverlapJudge()).score(response, reference_answer, guideline)


# -- records ----------------------------------------------------------------------

@dataclass
class EvalRecord:
    build_id: str
    query_id: str
    path_id: str
    accuracy: float
    ttft_ms: float
    cost: float
    cache_hit_stages: list[str] = field(default_factory=list)
    created_at: str = ""
    cold_ttft_ms: float = 0.0  # full-path latency with no cache reuse
    prompt_tokens: int = 0  # prompt size sent to the model stage
    stage_costs: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.cost < 0:
            raise ValueError("cost must be non-negative")
        if not self.cold_ttft_ms:
            self.cold_ttft_ms = self.ttft_ms

    @property
    def key(self) -> tuple[str, str]:
        return (self.query_id, self.path_id)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class RecordStore:
    """Append-only ``records.jsonl``; one writer thread at a time."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[EvalRecord] = []
        self._keys: set[tuple[str, str]] = set()
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            raw = self.path.read_bytes()
            if raw and not raw.endswith(b"\n"):
                # a crash mid-write leaves a partial last line; drop it so appends start clean
                log.warning("dropping torn tail of %s", self.path)
                with open(self.path, "r+b") as fh:
                    fh.truncate(raw.rfind(b"\n") + 1)
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        row = json.loads(line)
                    except json.JSONDecodeError:
                        log.warning("ignoring torn line in %s", self.path)
                        continue
                    self._remember(EvalRecord(**row))

    def _remember(self, rec: EvalRecord) -> bool:
        if rec.key in self._keys:
            return False
        self._keys.add(rec.key)
        self.records.append(rec)
        return True

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._keys

    def __len__(self) -> int:
        return len(self.records)

    def append(self, rec: EvalRecord) -> None:
        with self._lock:
            if not self._remember(rec):
                return
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")

    def for_query(self, query_id: str) -> list[EvalRecord]:
        return [r for r in self.records if r.query_id == query_id]


def load_records(path: str | Path) -> list[EvalRecord]:
    return list(RecordStore(path).records)


def group_by_query(records: Iterable[EvalRecord]) -> dict[str, list[EvalRecord]]:
    grouped: dict[str, list[EvalRecord]] = defaultdict(list)
    for r in records:
        grouped[r.query_id].append(r)
    return dict(grouped)


# -- execution --------------------------------------------------------------------

def execute_path(
    query: TrainingQuery,
    path: PathSpec,
    executors: StageExecutor | Mapping[StageKind, StageExecutor],
    cache: PrefixCache | None = None,
    judge_client=None,
    *,
    build_id: str = "",
    cold_latency: bool = False,
    score: bool = True,
) -> tuple[EvalRecord, StageOutput | None]:
    """Run one path on one query, stages in q, r, c, m order.

    Cache hits skip the stage and reuse its context and cost.  Their latency
    counts toward ``ttft_ms`` only with ``cold_latency``; ``cold_ttft_ms``
    always includes it.
    """
    def executor_for(stage: StageKind) -> StageExecutor:
        if isinstance(executors, Mapping):
            return executors[stage]
        return executors

    ctx = Context(query.text)
    acc_lat, acc_cost = 0.0, 0.0
    stage_lat: list[float] = []
    stage_cost: list[float] = []
    hits: list[str] = []
    warm_lat = 0.0
    final: StageOutput | None = None
    error: str | None = None
    try:
        for stage in STAGES:
            choice = path[stage]
            if stage is not StageKind.MODEL_SELECTION and cache is not None:
                prefix = path_prefix_id(path, stage)
                entry = cache.get(query.id, prefix)
                if entry is not None:
                    ctx = entry.context
                    acc_lat, acc_cost = entry.latency_ms, entry.cost
                    stage_lat, stage_cost = list(entry.stage_latency), list(entry.stage_cost)
                    hits.append(stage.value)
                    continue
            if choice.is_null and stage is not StageKind.MODEL_SELECTION:
                out = StageOutput(ctx.text, 0.0, 0.0)
            else:
                out = executor_for(stage).run(stage, choice.impl, choice.theta, query, ctx)
            acc_lat += out.latency_ms
            acc_cost += out.cost
            warm_lat += out.latency_ms
            stage_lat.append(out.latency_ms)
            stage_cost.append(out.cost)
            ctx = Context(out.text, ctx.trail + (choice,))
            if stage is StageKind.MODEL_SELECTION:
                final = out
            elif cache is not None:
                cache.put(query.id, path_prefix_id(path, stage),
                          CacheEntry(ctx, acc_lat, acc_cost, tuple(stage_lat), tuple(stage_cost)))
    except (BackendError, StageError) as exc:
        error = f"{type(exc).__name__}: {exc}"

    costs = {s.value: c for s, c in zip(STAGES, stage_cost)}
    if final is None:
        rec = EvalRecord(build_id, query.id, path.canonical_id, 0.0, max(acc_lat, 1e-3), acc_cost,
                         hits, _now(), max(acc_lat, 1e-3), 0, costs, error or "no model output")
        return rec, None

    accuracy = 0.0
    if score:
        if final.accuracy_hint is not None and getattr(judge_client, "uses_hints", False):
            accuracy = final.accuracy_hint
        else:
            try:
                accuracy = judge(final.text, query.reference_answer, query.evaluation_guideline, judge_client)
            except (JudgeError, BackendError) as exc:
                error = f"judge: {exc}"
                accuracy = 0.0
    ttft = acc_lat if cold_latency else warm_lat
    rec = EvalRecord(build_id, query.id, path.canonical_id, min(1.0, max(0.0, accuracy)), ttft, acc_cost,
                     hits, _now(), acc_lat, final.prompt_tokens, costs, error)
    return rec, final


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- stratified sampling -------------------------------------------------------------

def largest_remainder(counts: Mapping[Any, int], n: int) -> dict[Any, int]:
    """Split ``n`` across keys proportionally to ``counts`` (Hamilton's method)."""
    total = sum(counts.values())
    if total == 0 or n == 0:
        return {k: 0 for k in counts}
    quotas = {k: n * c / total for k, c in counts.items()}
    alloc = {k: math.floor(q) for k, q in quotas.items()}
    keys = list(counts)
    order = sorted(keys, key=lambda k: (-(quotas[k] - alloc[k]), keys.index(k)))
    for k in order[: n - sum(alloc.values())]:
        alloc[k] += 1
    return alloc


def kmeans_representatives(vectors: np.ndarray, k: int, seed: int) -> list[int]:
    """Indices of the points nearest each of ``k`` Lloyd centroids (25 iterations)."""
    n = len(vectors)
    if k >= n:
        return list(range(n))
    if k <= 0:
        return []
    rng = np.random.default_rng(seed)
    centroids = vectors[rng.choice(n, size=k, replace=False)].copy()
    for _ in range(KMEANS_ITERATIONS):
        d = ((vectors[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        labels = d.argmin(1)
        for j in range(k):
            members = vectors[labels == j]
            if len(members):
                centroids[j] = members.mean(0)
    d = ((vectors[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    chosen: list[int] = []
    for j in range(k):
        for idx in np.argsort(d[:, j], kind="stable"):
            if int(idx) not in chosen:
                chosen.append(int(idx))
                break
    return sorted(chosen)


def representative_count(n_queries: int, budget: float) -> int:
    if budget <= 0:
        raise ValueError("budget factor must be positive")
    if math.isinf(budget):
        return n_queries
    return min(n_queries, round_half_up(budget * math.sqrt(n_queries)))


def stratified_sample(queries: Sequence[TrainingQuery], budget: float, seed: int = 0,
                      embedder=None) -> list[str]:
    n = representative_count(len(queries), budget)
    by_type: dict[QueryType, list[TrainingQuery]] = defaultdict(list)
    for q in queries:
        by_type[q.type].append(q)
    counts = {t: len(by_type[t]) for t in QUERY_TYPES if by_type.get(t)}
    alloc = largest_remainder(counts, n)
    chosen: list[str] = []
    for t, k in alloc.items():
        members = by_type[t]
        if k >= len(members):
            chosen.extend(q.id for q in members)
        elif embedder is None:
            rng = random.Random(f"{seed}:{t.value}")
            chosen.extend(q.id for q in rng.sample(members, k))
        else:
            vecs = embedder.embed_many([q.text for q in members])
            chosen.extend(members[i].id for i in kmeans_representatives(vecs, k, seed))
    order = {q.id: i for i, q in enumerate(queries)}
    return sorted(chosen, key=order.__getitem__)


# -- ranking and planning -----------------------------------------------------------

def rank_paths(records: Iterable[EvalRecord]) -> list[str]:
    acc: dict[str, list[float]] = defaultdict(list)
    lat: dict[str, list[float]] = defaultdict(list)
    for r in records:
        acc[r.path_id].append(r.accuracy)
        lat[r.path_id].append(r.cold_ttft_ms)
    return sorted(acc, key=lambda p: (-float(np.mean(acc[p])), float(np.mean(lat[p])), p))


def rank_paths_by_type(records: Iterable[EvalRecord],
                       query_types: Mapping[str, QueryType]) -> dict[QueryType, list[str]]:
    grouped: dict[QueryType, list[EvalRecord]] = defaultdict(list)
    for r in records:
        if r.query_id in query_types:
            grouped[query_types[r.query_id]].append(r)
    return {t: rank_paths(rs) for t, rs in grouped.items()}


def paths_per_query(n_paths: int, budget: float) -> int:
    if math.isinf(budget):
        return n_paths
    return max(1, math.floor(budget * math.sqrt(n_paths)))


@dataclass
class BudgetPlan:
    budget: float
    representatives: list[str]
    assignments: dict[str, list[str]]  # remaining query id -> path ids
    n_paths: int
    k: int

    @property
    def total(self) -> int:
        return len(self.representatives) * self.n_paths + sum(len(v) for v in self.assignments.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "budget": "exhaustive" if math.isinf(self.budget) else self.budget,
            "k": self.k,
            "n_paths": self.n_paths,
            "representatives": self.representatives,
            "assignments": self.assignments,
            "total": self.total,
        }


def plan_evaluations(
    queries: Sequence[TrainingQuery],
    paths: Sequence[PathSpec] | Sequence[str],
    budget: float,
    representatives: Sequence[str],
    rankings: Mapping[QueryType, Sequence[str]],
    seed: int = 0,
    global_ranking: Sequence[str] | None = None,
) -> BudgetPlan:
    path_ids = [p if isinstance(p, str) else p.canonical_id for p in paths]
    k = paths_per_query(len(path_ids), budget)
    k_eff = min(k, len(path_ids))
    n_top = k_eff - k_eff // 5  # ceil(0.8 k), the rest random
    reps = set(representatives)
    if global_ranking is None:
        merged: list[str] = []
        for ranked in rankings.values():
            merged.extend(p for p in ranked if p not in merged)
        global_ranking = merged
    assignments: dict[str, list[str]] = {}
    warned: set[QueryType] = set()
    for q in queries:
        if q.id in reps:
            continue
        ranked = rankings.get(q.type)
        if ranked is None:
            if q.type not in warned:
                log.warning("no ranking for type %s; using global ranking", q.type.value)
                warned.add(q.type)
            ranked = global_ranking
        top = [p for p in ranked if p in set(path_ids)][:n_top]
        rng = random.Random(f"{seed}:{q.id}")
        pool = [p for p in path_ids if p not in top]
        extra = rng.sample(pool, k_eff - len(top))
        assignments[q.id] = top + extra
    return BudgetPlan(budget, list(representatives), assignments, len(path_ids), k)


def planned_total(n_queries: int, n_paths: int, budget: float) -> int:
    """Closed form of ``BudgetPlan.total``."""
    reps = representative_count(n_queries, budget)
    return reps * n_paths + (n_queries - reps) * min(paths_per_query(n_paths, budget), n_paths)


# -- the full exploration run ----------------------------------------------------------

def run_exploration(
    build_id: str,
    queries: Sequence[TrainingQuery],
    paths: Sequence[PathSpec],
    executors,
    judge_client,
    budget: float = EXHAUSTIVE,
    seed: int = 0,
    *,
    store: RecordStore | None = None,
    out_dir: str | Path | None = None,
    workers: int | None = None,
    cache: PrefixCache | None = None,
    use_cache: bool = True,
    cold_latency: bool = False,
    embedder=None,
) -> tuple[RecordStore, BudgetPlan]:
    """Representative phase then planned phase; skips pairs already stored."""
    if store is None:
        store = RecordStore(Path(out_dir) / "records.jsonl" if out_dir else None)
    if use_cache and cache is None:
        cache = PrefixCache()
    if not use_cache:
        cache = None
    workers = workers or os.cpu_count() or 1
    by_id = {q.id: q for q in queries}

    def run_pairs(pairs: list[tuple[TrainingQuery, PathSpec]]) -> None:
        todo = [(q, p) for q, p in pairs if (q.id, p.canonical_id) not in store]
        if workers <= 1:
            for q, p in todo:
                store.append(execute_path(q, p, executors, cache, judge_client,
                                          build_id=build_id, cold_latency=cold_latency)[0])
            return
        # one task per query: its paths run in order on one thread, so prefix-cache
        # hits (keyed by query) do not depend on thread timing
        batches: dict[str, list[tuple[TrainingQuery, PathSpec]]] = {}
        for q, p in todo:
            batches.setdefault(q.id, []).append((q, p))

        def run_batch(batch):
            return [execute_path(q, p, executors, cache, judge_client,
                                 build_id=build_id, cold_latency=cold_latency)[0] for q, p in batch]

        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_batch, b) for b in batches.values()]
            for fut in futures:  # submission order keeps the store deterministic
                for rec in fut.result():
                    store.append(rec)

    reps = stratified_sample(queries, budget, seed, embedder)
    run_pairs([(by_id[qid], p) for qid in reps for p in paths])

    rep_set = set(reps)
    types = {q.id: q.type for q in queries}
    rep_records = [r for r in store.records if r.query_id in rep_set]
    rankings = rank_paths_by_type(rep_records, types)
    plan = plan_evaluations(queries, paths, budget, reps, rankings, seed, rank_paths(rep_records))
    lookup = {p.canonical_id: p for p in paths}
    run_pairs([(by_id[qid], lookup[pid]) for qid, pids in plan.assignments.items() for pid in pids])

    if out_dir:
        with open(Path(out_dir) / "plan.json", "w", encoding="utf-8") as fh:
            json.dump(plan.to_dict(), fh, indent=2, sort_keys=True)
    return store, plan
