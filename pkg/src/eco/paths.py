"""Pipeline stages, implementation registries and concrete resolution paths.

A path picks one implementation plus one configuration for each of the four
stages, always in the order query processing, retrieval, context processing,
model.  Paths are identified by a canonical string::

    q=stepback{depth=2}|r=rag{top_k=4}|c=none{}|m=edge-small{}

Parameters inside the braces are sorted by name, so the id is stable and
greppable.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

Scalar = Any  # str | int | float | bool | None


class StageKind(str, Enum):
    QUERY_PROCESSING = "q"
    RETRIEVAL = "r"
    CONTEXT_PROCESSING = "c"
    MODEL_SELECTION = "m"

    @classmethod
    def parse(cls, value: "StageKind | str") -> "StageKind":
        if isinstance(value, StageKind):
            return value
        for stage in cls:
            if value in (stage.value, stage.name, stage.name.lower()):
                return stage
        raise ValueError(f"unknown stage {value!r}")


STAGES: tuple[StageKind, ...] = (
    StageKind.QUERY_PROCESSING,
    StageKind.RETRIEVAL,
    StageKind.CONTEXT_PROCESSING,
    StageKind.MODEL_SELECTION,
)
NULL_ID = "none"

_ID_RE = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9_.\-:/]*$")
_BARE_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-:/]*$")
_RESERVED = {"true", "false", "null", "inf", "nan"}


class RegistryError(ValueError):
    """Invalid registry document or unresolved parameter."""


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str  # "static" | "sweep" | "dynamic"
    values: tuple[Scalar, ...] = ()
    resolver: str | None = None

    def __post_init__(self) -> None:
        if not _ID_RE.match(self.name):
            raise RegistryError(f"bad parameter name {self.name!r}")
        if self.kind == "static" and len(self.values) != 1:
            raise RegistryError(f"static param {self.name!r} needs exactly one value")
        if self.kind == "sweep" and len(self.values) < 1:
            raise RegistryError(f"sweep param {self.name!r} needs at least one value")
        if self.kind == "dynamic" and not self.resolver:
            raise RegistryError(f"dynamic param {self.name!r} needs a resolver id")
        if self.kind not in ("static", "sweep", "dynamic"):
            raise RegistryError(f"param {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class ImplementationSpec:
    id: str
    stage: StageKind
    params: tuple[ParamSpec, ...] = ()
    is_null: bool = False

    def __post_init__(self) -> None:
        if not _ID_RE.match(self.id):
            raise RegistryError(f"bad implementation id {self.id!r}")
        if self.is_null and self.params:
            raise RegistryError(f"null implementation {self.id!r} cannot have params")
        if self.is_null != (self.id == NULL_ID):
            raise RegistryError(f"implementation id {NULL_ID!r} is reserved for the null option")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise RegistryError(f"duplicate param names in {self.id!r}")


@dataclass(frozen=True)
class Registry:
    stages: Mapping[StageKind, tuple[ImplementationSpec, ...]]
    global_settings: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for stage in STAGES:
            impls = self.stages.get(stage, ())
            ids = [impl.id for impl in impls]
            if len(set(ids)) != len(ids):
                raise RegistryError(f"duplicate implementation ids in stage {stage.value}")
            if not self.implementations(stage):
                raise RegistryError(f"stage {stage.value} has no enabled implementation")

    def implementations(self, stage: StageKind) -> tuple[ImplementationSpec, ...]:
        impls = self.stages.get(stage, ())
        enabled = (self.global_settings.get("enabled") or {}).get(stage.value)
        if enabled is None:
            return tuple(impls)
        return tuple(impl for impl in impls if impl.id in enabled)


@dataclass(frozen=True, order=True)
class StageChoice:
    stage: StageKind
    impl: str
    params: tuple[tuple[str, Scalar], ...] = ()

    @property
    def theta(self) -> dict[str, Scalar]:
        return dict(self.params)

    @property
    def is_null(self) -> bool:
        return self.impl == NULL_ID

    def token(self) -> str:
        inner = ",".join(f"{k}={format_value(v)}" for k, v in self.params)
        return f"{self.stage.value}={self.impl}{{{inner}}}"


@dataclass(frozen=True)
class PathSpec:
    choices: tuple[StageChoice, StageChoice, StageChoice, StageChoice]

    def __post_init__(self) -> None:
        if tuple(c.stage for c in self.choices) != STAGES:
            raise ValueError("a path needs exactly one choice per stage, in q,r,c,m order")

    def __getitem__(self, stage: StageKind | str) -> StageChoice:
        return self.choices[STAGES.index(StageKind.parse(stage))]

    @property
    def canonical_id(self) -> str:
        return "|".join(c.token() for c in self.choices)

    def __str__(self) -> str:
        return self.canonical_id


def format_value(value: Scalar) -> str:
    """Serialize a param value so distinct values never share a spelling."""
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)  # shortest round-trip form
    text = str(value)
    if _BARE_RE.match(text) and text not in _RESERVED:
        return text
    return json.dumps(text)


def _make_choice(stage: StageKind, impl: str, theta: Mapping[str, Scalar]) -> StageChoice:
    return StageChoice(stage, impl, tuple(sorted(theta.items())))


# -- registry loading ---------------------------------------------------------

def _load_param(doc: Mapping[str, Any]) -> ParamSpec:
    kind = doc.get("kind", "static")
    values = doc.get("values", ())
    if kind == "static" and "value" in doc:
        values = [doc["value"]]
    if not isinstance(values, (list, tuple)):
        values = [values]
    return ParamSpec(doc["name"], kind, tuple(values), doc.get("resolver"))


def load_registry(doc: Mapping[str, Any]) -> Registry:
    """Build a Registry from its JSON document form."""
    try:
        stage_docs = doc["stages"]
    except (KeyError, TypeError):
        raise RegistryError("registry document needs a 'stages' object") from None
    stages: dict[StageKind, tuple[ImplementationSpec, ...]] = {}
    for key, impl_docs in stage_docs.items():
        stage = StageKind.parse(key)
        impls = []
        for item in impl_docs:
            is_null = bool(item.get("null", False)) or item.get("id") == NULL_ID
            impls.append(
                ImplementationSpec(
                    id=NULL_ID if is_null else item.get("id", ""),
                    stage=stage,
                    params=tuple(_load_param(p) for p in item.get("params", ())),
                    is_null=is_null,
                )
            )
        stages[stage] = tuple(impls)
    return Registry(stages, dict(doc.get("global", {})))


def dump_registry(registry: Registry) -> dict[str, Any]:
    stages: dict[str, list[dict[str, Any]]] = {}
    for stage in STAGES:
        items = []
        for impl in registry.stages.get(stage, ()):
            item: dict[str, Any] = {"id": impl.id}
            if impl.is_null:
                item["null"] = True
            if impl.params:
                params = []
                for p in impl.params:
                    pd: dict[str, Any] = {"name": p.name, "kind": p.kind}
                    if p.kind == "dynamic":
                        pd["resolver"] = p.resolver
                    else:
                        pd["values"] = list(p.values)
                    params.append(pd)
                item["params"] = params
            items.append(item)
        stages[stage.value] = items
    return {"stages": stages, "global": dict(registry.global_settings)}


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def build_id(doc: Mapping[str, Any]) -> str:
    """Content-addressed identifier of a configuration document."""
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()[:16]


# -- dynamic params -----------------------------------------------------------

def resolve_dynamic(registry: Registry, environment: Mapping[str, Sequence[Scalar]]) -> Registry:
    """Replace every dynamic param with a sweep over the environment's values."""
    stages: dict[StageKind, tuple[ImplementationSpec, ...]] = {}
    changed = False
    for stage, impls in registry.stages.items():
        new_impls = []
        for impl in impls:
            params = []
            for p in impl.params:
                if p.kind != "dynamic":
                    params.append(p)
                    continue
                if p.resolver not in environment:
                    raise RegistryError(f"no resolver {p.resolver!r} for param {p.name!r} of {impl.id!r}")
                values = tuple(environment[p.resolver])
                if not values:
                    raise RegistryError(f"resolver {p.resolver!r} returned no values for {impl.id!r}")
                params.append(ParamSpec(p.name, "sweep", values))
                changed = True
            new_impls.append(ImplementationSpec(impl.id, impl.stage, tuple(params), impl.is_null))
        stages[stage] = tuple(new_impls)
    if not changed:
        return registry
    return Registry(stages, registry.global_settings)


# -- counting and enumeration -----------------------------------------------

def config_grid(impl: ImplementationSpec) -> list[dict[str, Scalar]]:
    """Cross product of param value lists, row-major in declared order."""
    for p in impl.params:
        if p.kind == "dynamic":
            raise RegistryError(f"unresolved dynamic param {p.name!r} of {impl.id!r}")
    if not impl.params:
        return [{}]
    names = [p.name for p in impl.params]
    return [dict(zip(names, combo)) for combo in itertools.product(*(p.values for p in impl.params))]


def _grid_size(impl: ImplementationSpec) -> int:
    for p in impl.params:
        if p.kind == "dynamic":
            raise RegistryError(f"unresolved dynamic param {p.name!r} of {impl.id!r}")
    return math.prod(len(p.values) for p in impl.params)


def count_paths(registry: Registry) -> int:
    return math.prod(
        sum(_grid_size(impl) for impl in registry.implementations(stage)) for stage in STAGES
    )


def stage_choices(registry: Registry, stage: StageKind) -> list[StageChoice]:
    return [
        _make_choice(stage, impl.id, theta)
        for impl in registry.implementations(stage)
        for theta in config_grid(impl)
    ]


def enumerate_paths(registry: Registry) -> list[PathSpec]:
    per_stage = [stage_choices(registry, stage) for stage in STAGES]
    return [PathSpec(tuple(combo)) for combo in itertools.product(*per_stage)]


def path_prefix_id(path: PathSpec, upto: StageKind | str) -> str:
    """Identifier of the leading stages of ``path`` up to and including ``upto``."""
    n = STAGES.index(StageKind.parse(upto)) + 1
    return "|".join(c.token() for c in path.choices[:n])


# -- parsing ------------------------------------------------------------------

_TOKEN_RE = re.compile(r'"(?:[^"\\]|\\.)*"|[^,{}|=]+')


def _parse_value(text: str) -> Scalar:
    if text.startswith('"'):
        return json.loads(text)
    if text == "null":
        return None
    if text == "true":
        return True
    if text == "false":
        return False
    if text in ("inf", "-inf", "nan"):
        return float(text)
    if re.fullmatch(r"-?\d+", text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        return text


def parse_path_id(path_id: str) -> PathSpec:
    """Inverse of ``PathSpec.canonical_id``."""
    choices = []
    pos = 0
    for stage in STAGES:
        head = f"{stage.value}="
        if not path_id.startswith(head, pos):
            raise ValueError(f"malformed path id {path_id!r}")
        pos += len(head)
        brace = path_id.index("{", pos)
        impl = path_id[pos:brace]
        pos = brace + 1
        params: list[tuple[str, Scalar]] = []
        while path_id[pos] != "}":
            eq = path_id.index("=", pos)
            name = path_id[pos:eq]
            m = _TOKEN_RE.match(path_id, eq + 1)
            if m is None:
                raise ValueError(f"malformed path id {path_id!r}")
            params.append((name, _parse_value(m.group(0))))
            pos = m.end()
            if path_id[pos] == ",":
                pos += 1
        pos += 1
        if stage is not StageKind.MODEL_SELECTION:
            if path_id[pos] != "|":
                raise ValueError(f"malformed path id {path_id!r}")
            pos += 1
        choices.append(StageChoice(stage, impl, tuple(params)))
    if pos != len(path_id):
        raise ValueError(f"trailing characters in path id {path_id!r}")
    return PathSpec(tuple(choices))


def paths_by_id(paths: Iterable[PathSpec]) -> dict[str, PathSpec]:
    return {p.canonical_id: p for p in paths}
