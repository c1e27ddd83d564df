"""Runtime path selection under latency and cost SLOs."""
from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .backends import ModelEndpoint, estimate_cost
from .cca import ComponentValue, CriticalComponentMap
from .dsqe import EncoderModel, assign_embedding
from .emulator import EvalRecord
from .paths import STAGES, PathSpec, StageChoice, StageKind, parse_path_id

DEFAULT_K = 5
DEFAULT_TAU_ACC = 0.6
PERCENTILES = {"mean": None, "p50": 50.0, "p90": 90.0, "p99": 99.0}


class Profile(str, Enum):
    LATENCY_FIRST = "latency_first"
    COST_FIRST = "cost_first"

    @property
    def lam(self) -> int:
        return 1 if self is Profile.LATENCY_FIRST else 0


@dataclass(frozen=True)
class SloConstraint:
    max_latency_ms: float | None = None
    max_cost: float | None = None

    def __post_init__(self) -> None:
        for name in ("max_latency_ms", "max_cost"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive when given")

    def admits(self, latency_ms: float, cost: float) -> bool:
        if self.max_latency_ms is not None and latency_ms > self.max_latency_ms:
            return False
        return self.max_cost is None or cost <= self.max_cost

    def to_dict(self) -> dict[str, float | None]:
        return {"max_latency_ms": self.max_latency_ms, "max_cost": self.max_cost}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any] | None) -> "SloConstraint":
        doc = doc or {}
        return cls(doc.get("max_latency_ms"), doc.get("max_cost"))


# -- statistics ----------------------------------------------------------------

@dataclass(frozen=True)
class PathEstimate:
    path_id: str
    n: int
    mean_ttft_ms: float
    latency_ms: float  # the estimator selected by ``basis``
    mean_cost: float
    cost: float
    mean_accuracy: float
    mean_prompt_tokens: float

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class PathStats:
    paths: dict[str, PathEstimate]
    basis: str = "p90"

    def __contains__(self, path_id: str) -> bool:
        return path_id in self.paths

    def __getitem__(self, path_id: str) -> PathEstimate:
        return self.paths[path_id]

    def __len__(self) -> int:
        return len(self.paths)

    def to_dict(self) -> dict[str, Any]:
        return {"basis": self.basis, "paths": {k: v.to_dict() for k, v in sorted(self.paths.items())}}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PathStats":
        return cls({k: PathEstimate(**v) for k, v in doc["paths"].items()}, doc.get("basis", "p90"))


def latency_estimate(values: Sequence[float], basis: str = "p90") -> float:
    if basis not in PERCENTILES:
        raise ValueError(f"unknown latency basis {basis!r}")
    q = PERCENTILES[basis]
    return float(np.mean(values)) if q is None else float(np.percentile(values, q))


def build_path_stats(records: Iterable[EvalRecord], endpoints: Mapping[str, ModelEndpoint] | None = None,
                     basis: str = "p90") -> PathStats:
    """Aggregate training records per path.

    Failed executions are left out.  With ``endpoints`` the cost estimate
    re-applies the model's cost formula at the mean observed prompt size;
    otherwise it is the mean observed cost.
    """
    grouped: dict[str, list[EvalRecord]] = defaultdict(list)
    for r in records:
        if r.error is None:
            grouped[r.path_id].append(r)
    out: dict[str, PathEstimate] = {}
    for pid, recs in grouped.items():
        ttfts = [r.cold_ttft_ms for r in recs]
        mean_cost = float(np.mean([r.cost for r in recs]))
        prompt = float(np.mean([r.prompt_tokens for r in recs]))
        cost = mean_cost
        path = parse_path_id(pid)
        model = path[StageKind.MODEL_SELECTION]
        ep = (endpoints or {}).get(str(model.theta.get("model", model.impl)))
        if ep is not None:
            upstream = float(np.mean([sum(v for s, v in r.stage_costs.items() if s != "m") for r in recs]))
            max_tokens = int(model.theta.get("max_tokens", ep.max_tokens))
            cost = upstream + estimate_cost(prompt, ep, max_tokens)
        out[pid] = PathEstimate(pid, len(recs), float(np.mean(ttfts)), latency_estimate(ttfts, basis),
                                mean_cost, cost, float(np.mean([r.accuracy for r in recs])), prompt)
    return PathStats(out, basis)


@dataclass(frozen=True)
class ComponentEstimate:
    value: ComponentValue
    mean_accuracy: float
    mean_cost: float
    n: int


def component_stats(records: Iterable[EvalRecord]) -> dict[StageKind, list[ComponentEstimate]]:
    """Mean accuracy and mean stage cost of every concrete stage value."""
    acc: dict[ComponentValue, list[float]] = defaultdict(list)
    cost: dict[ComponentValue, list[float]] = defaultdict(list)
    for r in records:
        path = parse_path_id(r.path_id)
        for stage in STAGES:
            c = path[stage]
            v = ComponentValue(stage, c.impl, c.params)
            acc[v].append(r.accuracy)
            cost[v].append(r.stage_costs.get(stage.value, 0.0))
    by_stage: dict[StageKind, list[ComponentEstimate]] = defaultdict(list)
    for v in sorted(acc):
        by_stage[v.stage].append(ComponentEstimate(v, float(np.mean(acc[v])), float(np.mean(cost[v])), len(acc[v])))
    return dict(by_stage)


# -- filtering and scoring --------------------------------------------------------

def contains_all(path: PathSpec, criticals: Iterable[ComponentValue]) -> bool:
    return all(v.matches(path) for v in criticals)


def filter_valid(paths: Iterable[PathSpec], stats: PathStats, slo: SloConstraint,
                 criticals: Iterable[ComponentValue] = ()) -> list[PathSpec]:
    criticals = list(criticals)
    valid = []
    for p in paths:
        est = stats.paths.get(p.canonical_id)
        if est is None:
            continue
        if slo.admits(est.latency_ms, est.cost) and contains_all(p, criticals):
            valid.append(p)
    return valid


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@dataclass(frozen=True)
class Neighbor:
    query_id: str
    best_path: str
    similarity: float
    weight: float


def score_neighbors(neighbors: Iterable[Neighbor], valid_ids: Iterable[str]) -> dict[str, float]:
    """Score(P) = sum over neighbours whose best path is P of weight * similarity."""
    scores = {pid: 0.0 for pid in valid_ids}
    for n in neighbors:
        if n.best_path in scores:
            scores[n.best_path] += n.weight * n.similarity
    return scores


@dataclass
class TrainingIndex:
    query_ids: list[str]
    projected: np.ndarray  # row-normalized projections
    criticals: list[frozenset[ComponentValue]]
    best_paths: list[str]

    @classmethod
    def build(cls, model: EncoderModel, embeddings: np.ndarray, query_ids: Sequence[str],
              phi: CriticalComponentMap) -> "TrainingIndex":
        proj = model.project(np.asarray(embeddings))
        norms = np.linalg.norm(proj, axis=1, keepdims=True)
        proj = np.where(norms > 0, proj / np.where(norms > 0, norms, 1.0), 0.0)
        return cls(list(query_ids), proj, [phi[q] for q in query_ids], [phi.best_paths[q] for q in query_ids])

    def neighbors(self, projected: np.ndarray, criticals: frozenset[ComponentValue], k: int) -> list[Neighbor]:
        if not self.query_ids:
            return []
        k = min(k, len(self.query_ids))
        norm = float(np.linalg.norm(projected))
        sims = self.projected @ (projected / norm) if norm > 0 else np.zeros(len(self.query_ids))
        order = np.argsort(-sims, kind="stable")[:k]
        return [Neighbor(self.query_ids[i], self.best_paths[i], float(sims[i]), jaccard(self.criticals[i], criticals))
                for i in order]

    def to_dict(self) -> dict[str, Any]:
        return {"query_ids": self.query_ids, "projected": self.projected.tolist(),
                "criticals": [[c.to_dict() for c in sorted(s)] for s in self.criticals],
                "best_paths": self.best_paths}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "TrainingIndex":
        ids = list(doc["query_ids"])
        return cls(ids, np.asarray(doc["projected"], dtype=np.float64).reshape(len(ids), -1),
                   [frozenset(ComponentValue.from_dict(c) for c in s) for s in doc["criticals"]],
                   list(doc["best_paths"]))


def score_paths(projected: np.ndarray, valid: Sequence[PathSpec], index: TrainingIndex,
                criticals: frozenset[ComponentValue], k: int = DEFAULT_K) -> tuple[dict[str, float], list[Neighbor]]:
    nbrs = index.neighbors(projected, criticals, k)
    return score_neighbors(nbrs, [p.canonical_id for p in valid]), nbrs


# -- fallback -----------------------------------------------------------------------

def _pick_component(options: Sequence[ComponentEstimate], tau_acc: float) -> ComponentEstimate:
    good = [o for o in options if o.mean_accuracy >= tau_acc]
    if good:
        return min(good, key=lambda o: (o.mean_cost, -o.mean_accuracy, o.value))
    return max(options, key=lambda o: (o.mean_accuracy, -o.mean_cost, o.value))


def _profile_key(est: PathEstimate, profile: Profile) -> tuple[float, float]:
    if profile is Profile.LATENCY_FIRST:
        return (est.latency_ms, est.cost)
    return (est.cost, est.latency_ms)


@dataclass(frozen=True)
class FallbackResult:
    path: PathSpec
    slo_met: bool  # by estimate
    strategy: str  # "components" | "profile-min" | "any-min"


def fallback(criticals: frozenset[ComponentValue], components: Mapping[StageKind, Sequence[ComponentEstimate]],
             stats: PathStats, slo: SloConstraint, tau_acc: float = DEFAULT_TAU_ACC,
             profile: Profile = Profile.LATENCY_FIRST, paths: Iterable[PathSpec] | None = None) -> FallbackResult:
    """Assemble a path from global component statistics.

    Critical stages keep their critical value (the cheapest concrete variant
    when the critical value is implementation-only).  If the assembled path
    has no estimate or breaks the SLO, the best known path containing the
    criticals under the profile is returned instead, flagged as a violation
    when it too breaks the SLO.
    """
    chosen = []
    for stage in STAGES:
        opts = list(components.get(stage, ()))
        crit = [v for v in criticals if v.stage is stage]
        if crit:
            opts = [o for o in opts if all(c.impl == o.value.impl and (c.params is None or c.params == o.value.params)
                                           for c in crit)]
            if not opts:
                c = crit[0]
                opts = [ComponentEstimate(ComponentValue(stage, c.impl, c.params or ()), 0.0, 0.0, 0)]
        if not opts:
            raise ValueError(f"no statistics for stage {stage.value}")
        chosen.append(_pick_component(opts, tau_acc).value)
    path = PathSpec(tuple(StageChoice(v.stage, v.impl, v.params) for v in chosen))
    est = stats.paths.get(path.canonical_id)
    if est is not None and slo.admits(est.latency_ms, est.cost):
        return FallbackResult(path, True, "components")

    known = [parse_path_id(pid) for pid in sorted(stats.paths)] if paths is None else list(paths)
    known = [p for p in known if p.canonical_id in stats.paths]
    pool = [p for p in known if contains_all(p, criticals)]
    strategy = "profile-min"
    if not pool:
        pool, strategy = known, "any-min"
    best = min(pool, key=lambda p: (_profile_key(stats[p.canonical_id], profile), p.canonical_id))
    b = stats[best.canonical_id]
    return FallbackResult(best, slo.admits(b.latency_ms, b.cost), strategy)


# -- selection ------------------------------------------------------------------------

@dataclass
class SelectionResult:
    path: PathSpec
    prototype: int
    criticals: frozenset[ComponentValue]
    scores: dict[str, float]
    fallback: bool
    estimates: dict[str, float]
    basis: str
    valid_count: int
    slo_met_estimate: bool = True
    neighbors: list[Neighbor] = field(default_factory=list)
    fallback_strategy: str | None = None
    degenerate_query: bool = False

    @property
    def path_id(self) -> str:
        return self.path.canonical_id

    def audit(self, query_text: str, slo: SloConstraint, profile: Profile) -> dict[str, Any]:
        top = sorted(self.scores.items(), key=lambda kv: (-kv[1], kv[0]))[:5]
        return {
            "query_digest": hashlib.sha256(query_text.encode("utf-8")).hexdigest()[:16],
            "prototype": self.prototype,
            "criticals": [str(c) for c in sorted(self.criticals)],
            "slo": slo.to_dict(),
            "profile": profile.value,
            "valid_count": self.valid_count,
            "chosen_path": self.path_id,
            "scores_top5": [{"path": p, "score": s} for p, s in top],
            "neighbor_weights": [{"query": n.query_id, "similarity": n.similarity, "weight": n.weight}
                                 for n in self.neighbors],
            "fallback": self.fallback,
            "fallback_strategy": self.fallback_strategy,
            "slo_met_estimate": self.slo_met_estimate,
            "estimates": self.estimates,
            "basis": self.basis,
        }


@dataclass
class Selector:
    """Read-only selection state shared by concurrent requests."""

    model: EncoderModel
    embedder: Any
    stats: PathStats
    index: TrainingIndex
    components: dict[StageKind, list[ComponentEstimate]]
    paths: list[PathSpec]
    k: int = DEFAULT_K
    tau_acc: float = DEFAULT_TAU_ACC

    def select(self, text: str, slo: SloConstraint = SloConstraint(),
               profile: Profile = Profile.LATENCY_FIRST) -> SelectionResult:
        emb = self.embedder.embed(text)
        return select(emb, slo, self.model, self.stats, self.index, self.components, self.paths,
                      profile, self.k, self.tau_acc)


def select(embedding: np.ndarray, slo: SloConstraint, model: EncoderModel, stats: PathStats,
           index: TrainingIndex, components: Mapping[StageKind, Sequence[ComponentEstimate]],
           paths: Sequence[PathSpec], profile: Profile = Profile.LATENCY_FIRST,
           k: int = DEFAULT_K, tau_acc: float = DEFAULT_TAU_ACC) -> SelectionResult:
    assignment = assign_embedding(model, embedding)
    criticals = assignment.components
    projected = model.project(np.atleast_2d(embedding))[0]
    valid = filter_valid(paths, stats, slo, criticals)
    if valid:
        scores, nbrs = score_paths(projected, valid, index, criticals, k)
        best = min(valid, key=lambda p: (-scores[p.canonical_id], _profile_key(stats[p.canonical_id], profile),
                                         p.canonical_id))
        est = stats[best.canonical_id]
        return SelectionResult(best, assignment.index, criticals, scores, False, _estimates(est), stats.basis,
                               len(valid), True, nbrs, None, assignment.fallback)
    fb = fallback(criticals, components, stats, slo, tau_acc, profile, paths)
    est = stats.paths.get(fb.path.canonical_id)
    return SelectionResult(fb.path, assignment.index, criticals, {}, True,
                           _estimates(est) if est else {}, stats.basis, 0, fb.slo_met, [],
                           fb.strategy, assignment.fallback)


def _estimates(est: PathEstimate) -> dict[str, float]:
    return {"latency_ms": est.latency_ms, "cost": est.cost, "accuracy": est.mean_accuracy,
            "mean_ttft_ms": est.mean_ttft_ms}


def dump_stats(stats: PathStats, components: Mapping[StageKind, Sequence[ComponentEstimate]]) -> dict[str, Any]:
    return {
        **stats.to_dict(),
        "components": {s.value: [{"component": c.value.to_dict(), "mean_accuracy": c.mean_accuracy,
                                  "mean_cost": c.mean_cost, "n": c.n} for c in cs]
                       for s, cs in components.items()},
    }


def load_stats(doc: Mapping[str, Any]) -> tuple[PathStats, dict[StageKind, list[ComponentEstimate]]]:
    comps = {StageKind.parse(s): [ComponentEstimate(ComponentValue.from_dict(c["component"]), c["mean_accuracy"],
                                                    c["mean_cost"], c["n"]) for c in cs]
             for s, cs in doc.get("components", {}).items()}
    return PathStats.from_dict(doc), comps
