"""Synthetic worlds with planted critical components.

A world fixes, for every query cluster, a few component values whose presence
adds a known amount to accuracy.  Latency and cost come from per-component
tables.  ``WorldExecutors`` replays the surface through the ordinary
emulator so every downstream module can be checked against known answers.
"""
from __future__ import annotations

import hashlib
import json
import math
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .backends import ModelEndpoint, estimate_cost
from .cca import ACCURACY_TOLERANCE, ComponentValue
from .context import QUERY_TYPES, TrainingQuery
from .emulator import Context, StageError, StageOutput
from .paths import STAGES, NULL_ID, PathSpec, StageChoice, StageKind, count_paths, enumerate_paths, load_registry
from .tokens import count_tokens

DEFAULT_OPTIONS: dict[str, list[dict[str, Any]]] = {
    "q": [{"id": NULL_ID}, {"id": "stepback"}],
    "r": [{"id": NULL_ID}, {"id": "rag", "params": [{"name": "top_k", "kind": "sweep", "values": [2, 4]}]}],
    "c": [{"id": NULL_ID}, {"id": "compress"}],
    "m": [{"id": "edge-small"}, {"id": "edge-large"}, {"id": "cloud-a"}, {"id": "cloud-b"}],
}

# (low, high) ranges in ms for non-null implementations
STAGE_LATENCY = {"q": (60.0, 400.0), "r": (20.0, 250.0), "c": (50.0, 300.0)}
MODEL_LATENCY = {"edge": (350.0, 900.0), "cloud": (900.0, 2800.0)}
# per-token price ranges, chosen so a path costs at most roughly $10 per 1k queries
MODEL_PRICE = {"edge": (2e-7, 1e-6), "cloud": (2e-6, 8e-6)}
HELPER_COST = (5e-5, 4e-4)

_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]


class WorldError(ValueError):
    """These world settings would make planted structure unrecoverable."""


@dataclass(frozen=True)
class WorldSpec:
    n_clusters: int = 4
    queries_per_cluster: int = 25
    planted_per_cluster: int = 2
    effect: tuple[float, float] = (0.25, 0.3)
    base: float = 0.3
    noise: float = 0.02
    options: Mapping[str, Sequence[Mapping[str, Any]]] = field(default_factory=lambda: DEFAULT_OPTIONS)
    topic_words: int = 8
    words_per_query: int = 5
    cluster_by: str = "id"  # "type": cluster index taken from the query type

    def __post_init__(self) -> None:
        if self.n_clusters < 1 or self.queries_per_cluster < 0:
            raise WorldError("need at least one cluster")
        if not 0 <= self.planted_per_cluster <= len(STAGES):
            raise WorldError("planted_per_cluster must be between 0 and 4")
        if self.cluster_by not in ("id", "type"):
            raise WorldError("cluster_by must be 'id' or 'type'")
        lo, hi = self.effect
        if lo > hi:
            raise WorldError("effect range is reversed")
        if self.planted_per_cluster and lo <= 2 * self.noise:
            raise WorldError(f"effect {lo} does not exceed twice the noise amplitude {self.noise}")
        if self.base - self.noise < 0 or self.base + self.planted_per_cluster * hi + self.noise > 1:
            raise WorldError("accuracy could leave [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["effect"] = list(self.effect)
        d["options"] = {k: [dict(o) for o in v] for k, v in self.options.items()}
        return d

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "WorldSpec":
        doc = dict(doc)
        if "effect" in doc:
            doc["effect"] = tuple(doc["effect"])
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in doc.items() if k in known})


def _pseudo_word(rng: np.random.Generator) -> str:
    return "".join(_SYLLABLES[i] for i in rng.integers(0, len(_SYLLABLES), 3))


def _unit_noise(seed: int, query_id: str, path_id: str) -> float:
    digest = hashlib.sha256(f"{seed}\x00{query_id}\x00{path_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**64 * 2.0 - 1.0


@dataclass
class World:
    spec: WorldSpec
    seed: int
    registry_doc: dict[str, Any]
    paths: list[PathSpec]
    queries: list[TrainingQuery]
    clusters: dict[str, int]
    planted: list[dict[ComponentValue, float]]  # per cluster: value -> effect
    latency: dict[str, float]  # stage choice token -> ms
    helper_cost: dict[str, float]
    endpoints: dict[str, ModelEndpoint]
    mandatory: frozenset[ComponentValue]

    # -- surface
    def cluster_of(self, query: TrainingQuery) -> int | None:
        if query.id in self.clusters:
            return self.clusters[query.id]
        if self.spec.cluster_by == "type":
            return QUERY_TYPES.index(query.type) % self.spec.n_clusters
        return None

    def expected_accuracy(self, cluster: int, path: PathSpec) -> float:
        return self.spec.base + sum(e for v, e in self.planted[cluster].items() if v.matches(path))

    def accuracy(self, query: TrainingQuery, path: PathSpec) -> float | None:
        cluster = self.cluster_of(query)
        if cluster is None:
            return None
        noise = self.spec.noise * _unit_noise(self.seed, query.id, path.canonical_id)
        return self.expected_accuracy(cluster, path) + noise

    def path_latency(self, path: PathSpec) -> float:
        return sum(self.latency[c.token()] for c in path.choices)

    def planted_critical(self, query: TrainingQuery) -> frozenset[ComponentValue]:
        cluster = self.cluster_of(query)
        return frozenset(self.planted[cluster]) | self.mandatory

    def best_path(self, query: TrainingQuery, noisy: bool = True) -> str:
        """Brute-force oracle: top accuracy within tolerance, then lowest latency.

        ``noisy=False`` ranks on the planted surface alone, which is the best
        path any query of the cluster should get.
        """
        if noisy:
            scored = [(self.accuracy(query, p), p) for p in self.paths]
        else:
            cluster = self.cluster_of(query)
            scored = [(self.expected_accuracy(cluster, p), p) for p in self.paths]
        top = max(a for a, _ in scored)
        candidates = [(self.path_latency(p), p.canonical_id) for a, p in scored if a >= top - ACCURACY_TOLERANCE]
        return min(candidates)[1]

    def by_split(self, split: str) -> list[TrainingQuery]:
        return [q for q in self.queries if q.split == split]

    # -- persistence
    def to_dict(self) -> dict[str, Any]:
        return {
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "registry": self.registry_doc,
            "queries": [q.to_dict() for q in self.queries],
            "clusters": self.clusters,
            "planted": [[{"component": v.to_dict(), "effect": e} for v, e in sorted(p.items())]
                        for p in self.planted],
            "latency_ms": self.latency,
            "helper_cost": self.helper_cost,
            "endpoints": {k: asdict(v) for k, v in self.endpoints.items()},
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "World":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        world = make_world(WorldSpec.from_dict(doc["spec"]), int(doc["seed"]))
        if world.to_dict()["planted"] != doc["planted"]:
            raise WorldError(f"{path} does not match its own spec and seed")
        return world


def make_world(spec: WorldSpec = WorldSpec(), seed: int = 0) -> World:
    rng = np.random.default_rng(seed)
    registry_doc = {"stages": {k: [dict(o) for o in v] for k, v in spec.options.items()}}
    registry = load_registry(registry_doc)
    if count_paths(registry) < 2:
        raise WorldError("a world needs at least two paths")
    paths = enumerate_paths(registry)

    # per-component latency and cost tables
    latency: dict[str, float] = {}
    helper_cost: dict[str, float] = {}
    endpoints: dict[str, ModelEndpoint] = {}
    choices_by_stage: dict[StageKind, list] = {}
    for stage in STAGES:
        seen = []
        for p in paths:
            c = p[stage]
            if c not in seen:
                seen.append(c)
        choices_by_stage[stage] = seen
        for c in seen:
            if stage is StageKind.MODEL_SELECTION:
                tier = "cloud" if c.impl.startswith("cloud") else "edge"
                lat = rng.uniform(*MODEL_LATENCY[tier])
                if c.impl not in endpoints:
                    price = rng.uniform(*MODEL_PRICE[tier])
                    endpoints[c.impl] = ModelEndpoint(c.impl, tier, "mock://world", c.impl,
                                                      round(price, 12), round(price * 2, 12), 256)
            elif c.is_null:
                lat = 0.0
            else:
                lat = rng.uniform(*STAGE_LATENCY[stage.value])
                helper_cost[c.token()] = round(float(rng.uniform(*HELPER_COST)), 9)
            latency[c.token()] = round(float(lat), 3)

    mandatory = frozenset(ComponentValue(s, cs[0].impl, cs[0].params)
                          for s, cs in choices_by_stage.items() if len(cs) == 1)
    open_stages = [s for s in STAGES if len(choices_by_stage[s]) > 1]
    if spec.planted_per_cluster > len(open_stages):
        raise WorldError("more planted components than stages with alternatives")

    planted: list[dict[ComponentValue, float]] = []
    for _ in range(spec.n_clusters):
        stages = rng.choice(len(open_stages), spec.planted_per_cluster, replace=False)
        values: dict[ComponentValue, float] = {}
        for si in sorted(stages):
            stage = open_stages[si]
            options = [c for c in choices_by_stage[stage] if not c.is_null] or choices_by_stage[stage]
            c = options[int(rng.integers(len(options)))]
            values[ComponentValue(stage, c.impl, c.params)] = round(float(rng.uniform(*spec.effect)), 6)
        planted.append(values)

    shared = [_pseudo_word(rng) for _ in range(6)]
    topics = [[_pseudo_word(rng) for _ in range(spec.topic_words)] for _ in range(spec.n_clusters)]
    queries: list[TrainingQuery] = []
    clusters: dict[str, int] = {}
    for c in range(spec.n_clusters):
        qtype = QUERY_TYPES[c % len(QUERY_TYPES)]
        for i in range(spec.queries_per_cluster):
            picked = rng.choice(spec.topic_words, spec.words_per_query, replace=False)
            words = [topics[c][j] for j in picked] + [shared[j] for j in rng.choice(len(shared), 2, replace=False)]
            qid = f"w{c}-{i:03d}"
            text = " ".join(words) + f" item{c}{i:03d}?"
            queries.append(TrainingQuery(qid, text, qtype, f"answer for {qid}", "graded by world surface"))
            clusters[qid] = c
    _assign_splits(queries, clusters, seed)

    return World(spec, seed, registry_doc, paths, queries, clusters, planted, latency, helper_cost,
                 endpoints, mandatory)


def _assign_splits(queries: list[TrainingQuery], clusters: Mapping[str, int], seed: int,
                   holdout: float = 0.25) -> None:
    """Holds out a fixed share of every cluster."""
    rng = np.random.default_rng(seed + 7919)
    by_cluster: dict[int, list[TrainingQuery]] = {}
    for q in queries:
        by_cluster.setdefault(clusters[q.id], []).append(q)
    for members in by_cluster.values():
        n_test = int(math.floor(len(members) * holdout + 0.5))
        for i in rng.permutation(len(members))[:n_test]:
            members[i].split = "test"


class WorldExecutors:
    """Stage executor that replays a world's tables.

    ``sleep`` makes every stage actually wait for its simulated latency
    (scaled by ``time_scale``), for timing tests against the server.
    """

    def __init__(self, world: World, sleep: bool = False, time_scale: float = 1.0):
        self.world = world
        self.sleep = sleep
        self.time_scale = time_scale
        self.executions: Counter[str] = Counter()
        self._lock = threading.Lock()

    @property
    def total_executions(self) -> int:
        return sum(self.executions.values())

    def run(self, stage: StageKind, impl: str, theta: Mapping[str, Any],
            query: TrainingQuery, upstream: Context) -> StageOutput:
        choice = StageChoice(stage, impl, tuple(sorted(theta.items())))
        token = choice.token()
        if token not in self.world.latency:
            raise StageError(f"world has no component {token}")
        with self._lock:
            self.executions[stage.value] += 1
        lat = self.world.latency[token]
        if self.sleep and lat > 0:
            time.sleep(lat * self.time_scale / 1000.0)

        if stage is not StageKind.MODEL_SELECTION:
            text = f"{upstream.text} [{stage.value}:{impl}]"
            return StageOutput(text, lat, self.world.helper_cost.get(token, 0.0))

        full = PathSpec(tuple(upstream.trail) + (choice,))
        ep = self.world.endpoints[impl]
        prompt = upstream.text + "\n\nAnswer:"
        tokens = count_tokens(prompt)
        hint = self.world.accuracy(query, full)
        text = f"{impl} answer to {query.id}: {query.reference_answer}"
        return StageOutput(text, lat, estimate_cost(tokens, ep), tokens, hint)
