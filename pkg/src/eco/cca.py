"""Critical component analysis.

For each query, pick its best path (accuracy first, then latency or cost among
near-ties) and keep the components of that path whose marginal impact on
accuracy reaches a threshold.
"""
from __future__ import annotations

import functools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .emulator import EvalRecord, group_by_query
from .paths import STAGES, PathSpec, StageKind, parse_path_id

log = logging.getLogger(__name__)

ACCURACY_TOLERANCE = 0.01
DEFAULT_TAU = 0.1


class _Mandatory:
    def __repr__(self) -> str:
        return "MANDATORY"

    def __reduce__(self):
        return "MANDATORY"


MANDATORY = _Mandatory()


@dataclass(frozen=True, order=True)
class ComponentValue:
    stage: StageKind
    impl: str
    params: tuple[tuple[str, Any], ...] | None = ()  # None: any configuration of impl

    @property
    def theta(self) -> dict[str, Any] | None:
        return None if self.params is None else dict(self.params)

    def matches(self, path: PathSpec) -> bool:
        choice = path[self.stage]
        if choice.impl != self.impl:
            return False
        return self.params is None or choice.params == self.params

    def to_dict(self) -> dict[str, Any]:
        return {"stage": self.stage.value, "impl": self.impl, "theta": self.theta}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ComponentValue":
        theta = doc.get("theta")
        params = None if theta is None else tuple(sorted(theta.items()))
        return cls(StageKind.parse(doc["stage"]), doc["impl"], params)

    def __str__(self) -> str:
        inner = "*" if self.params is None else ",".join(f"{k}={v}" for k, v in self.params)
        return f"{self.stage.value}={self.impl}{{{inner}}}"


def component_of(path: PathSpec, stage: StageKind, coarse: bool = False) -> ComponentValue:
    choice = path[stage]
    return ComponentValue(stage, choice.impl, None if coarse else choice.params)


@functools.lru_cache(maxsize=65536)
def _parse(path_id: str) -> PathSpec:
    return parse_path_id(path_id)


def find_best_path_record(records: Sequence[EvalRecord], lam: int = 1) -> EvalRecord:
    if not records:
        raise ValueError("no records for query")
    best_acc = max(r.accuracy for r in records)
    candidates = [r for r in records if r.accuracy >= best_acc - ACCURACY_TOLERANCE]
    if lam == 1:
        return min(candidates, key=lambda r: (r.cold_ttft_ms, r.path_id))
    return min(candidates, key=lambda r: (r.cost, r.path_id))


def find_best_path(records: Sequence[EvalRecord], lam: int = 1) -> PathSpec:
    """Highest accuracy; among paths within 0.01 of it, lowest latency (lam=1) or cost (lam=0)."""
    return _parse(find_best_path_record(records, lam).path_id)


def impact(records: Sequence[EvalRecord], stage: StageKind | str, value: ComponentValue):
    """Mean accuracy with ``value`` at ``stage`` minus mean accuracy without it.

    Returns MANDATORY when every record uses ``value``.
    """
    stage = StageKind.parse(stage)
    with_v, without_v = [], []
    for r in records:
        (with_v if value.matches(_parse(r.path_id)) else without_v).append(r.accuracy)
    if not with_v:
        raise ValueError(f"component {value} not observed in records")
    if not without_v:
        return MANDATORY
    return float(np.mean(with_v)) - float(np.mean(without_v))


def partition_sizes(records: Sequence[EvalRecord], value: ComponentValue) -> tuple[int, int]:
    n_with = sum(1 for r in records if value.matches(_parse(r.path_id)))
    return n_with, len(records) - n_with


def critical_components(records: Sequence[EvalRecord], tau: float = DEFAULT_TAU, lam: int = 1,
                        coarse: bool = False) -> frozenset[ComponentValue]:
    best = find_best_path(records, lam)
    crit = set()
    for stage in STAGES:
        v = component_of(best, stage, coarse)
        score = impact(records, stage, v)
        if score is MANDATORY or score >= tau:
            crit.add(v)
    return frozenset(crit)


@dataclass
class CriticalComponentMap:
    tau: float
    lam: int
    entries: dict[str, frozenset[ComponentValue]] = field(default_factory=dict)
    best_paths: dict[str, str] = field(default_factory=dict)
    audit: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    build_id: str = ""
    coarse: bool = False

    def __getitem__(self, query_id: str) -> frozenset[ComponentValue]:
        return self.entries[query_id]

    def __contains__(self, query_id: str) -> bool:
        return query_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def distinct_sets(self) -> list[frozenset[ComponentValue]]:
        seen: list[frozenset[ComponentValue]] = []
        for qid in sorted(self.entries):
            s = self.entries[qid]
            if s not in seen:
                seen.append(s)
        return seen

    def to_dict(self) -> dict[str, Any]:
        return {
            "build_id": self.build_id,
            "params": {"tau": self.tau, "lambda": self.lam, "coarse": self.coarse},
            "map": {q: [c.to_dict() for c in sorted(s)] for q, s in sorted(self.entries.items())},
            "best_paths": dict(sorted(self.best_paths.items())),
            "audit": dict(sorted(self.audit.items())),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "CriticalComponentMap":
        params = doc.get("params", {})
        return cls(
            tau=float(params.get("tau", DEFAULT_TAU)),
            lam=int(params.get("lambda", 1)),
            entries={q: frozenset(ComponentValue.from_dict(c) for c in cs) for q, cs in doc["map"].items()},
            best_paths=dict(doc.get("best_paths", {})),
            audit=dict(doc.get("audit", {})),
            build_id=doc.get("build_id", ""),
            coarse=bool(params.get("coarse", False)),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "CriticalComponentMap":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def build_map(records: Iterable[EvalRecord], tau: float = DEFAULT_TAU, lam: int = 1,
              query_ids: Iterable[str] | None = None, coarse: bool = False,
              build_id: str = "") -> CriticalComponentMap:
    grouped = group_by_query(records)
    wanted = sorted(grouped) if query_ids is None else list(query_ids)
    phi = CriticalComponentMap(tau, lam, build_id=build_id, coarse=coarse)
    for qid in wanted:
        recs = grouped.get(qid)
        if not recs:
            log.warning("query %s has no records; omitted from the map", qid)
            continue
        best_rec = find_best_path_record(recs, lam)
        best = _parse(best_rec.path_id)
        crit = set()
        audit = []
        for stage in STAGES:
            v = component_of(best, stage, coarse)
            score = impact(recs, stage, v)
            n_with, n_without = partition_sizes(recs, v)
            mandatory = score is MANDATORY
            if mandatory or score >= tau:
                crit.add(v)
            audit.append({"component": str(v), "impact": None if mandatory else score,
                          "mandatory": mandatory, "n_with": n_with, "n_without": n_without})
        phi.entries[qid] = frozenset(crit)
        phi.best_paths[qid] = best_rec.path_id
        phi.audit[qid] = audit
    return phi
