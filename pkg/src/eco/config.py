"""Global configuration: schema, loading, and the factories built from it."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .backends import EndpointGenerator, HashingEmbedder, MockClient, ModelEndpoint, OpenAIClient, RemoteEmbedder
from .dsqe import DsqeConfig
from .emulator import EXHAUSTIVE, HintJudge, LLMJudge, OverlapJudge
from .paths import Registry, StageKind, build_id, config_grid, load_registry, resolve_dynamic

SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["registry"],
    "additionalProperties": False,
    "properties": {
        "artifact_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "registry": {"type": "object", "required": ["stages"]},
        "environment": {"type": "object", "additionalProperties": {"type": "array"}},
        "endpoints": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "tier": {"enum": ["edge", "cloud"]},
                    "base_url": {"type": "string"},
                    "model": {"type": "string"},
                    "cost_alpha": {"type": "number", "minimum": 0},
                    "cost_beta": {"type": "number", "minimum": 0},
                    "max_tokens": {"type": "integer", "minimum": 1},
                    "timeout_ms": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
        "client": {"enum": ["mock", "openai"]},
        "executor": {"enum": ["backends", "world"]},
        "world": {"type": "object"},
        "docs_dir": {"type": "string"},
        "domain_description": {"type": "string"},
        "generation": {
            "type": "object",
            "properties": {
                "helper": {"type": "string"},
                "per_type_count": {"type": "integer", "minimum": 1},
                "split_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "clean": {"type": "boolean"},
                "probe": {"type": "boolean"},
            },
        },
        "helper": {"type": "string"},
        "local_latency_ms": {"type": "number", "minimum": 0},
        "embedder": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["hashing", "remote"]},
                "dim": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "endpoint": {"type": "string"},
            },
        },
        "judge": {"type": "string", "pattern": "^(hint|overlap|llm:.+)$"},
        "exploration": {
            "type": "object",
            "properties": {
                "budget": {"anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": "exhaustive"}]},
                "workers": {"type": "integer", "minimum": 1},
                "use_cache": {"type": "boolean"},
                "cold_latency": {"type": "boolean"},
                "kmeans": {"type": "boolean"},
            },
        },
        "cca": {
            "type": "object",
            "properties": {
                "tau": {"type": "number"},
                "lambda": {"enum": [0, 1]},
                "coarse": {"type": "boolean"},
            },
        },
        "dsqe": {"type": "object"},
        "rps": {
            "type": "object",
            "properties": {
                "k": {"type": "integer", "minimum": 1},
                "tau_acc": {"type": "number", "minimum": 0, "maximum": 1},
                "basis": {"enum": ["mean", "p50", "p90", "p99"]},
                "profile": {"enum": ["latency_first", "cost_first"]},
            },
        },
        "server": {
            "type": "object",
            "properties": {
                "host": {"type": "string"},
                "port": {"type": "integer", "minimum": 0, "maximum": 65535},
                "token_env": {"type": "string"},
                "prefix_cache": {"type": "boolean"},
            },
        },
    },
}

# sections that decide what a build contains; everything else is operational
BUILD_SECTIONS = ("registry", "environment", "endpoints", "client", "executor", "world", "embedder", "judge", "helper",
                  "local_latency_ms")


class ConfigError(ValueError):
    pass


@dataclass
class GlobalConfig:
    doc: dict[str, Any]
    base_dir: Path

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], base_dir: str | Path = ".") -> "GlobalConfig":
        try:
            jsonschema.validate(doc, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        cfg = cls(copy.deepcopy(dict(doc)), Path(base_dir))
        cfg.registry  # surfaces registry errors up front
        if cfg.executor == "backends":
            missing = {m for m in cfg.model_ids() if m not in cfg.endpoints}
            if missing:
                raise ConfigError(f"model implementations without endpoints: {sorted(missing)}")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "GlobalConfig":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not JSON: {exc}") from None
        return cls.from_dict(doc, path.parent)

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.doc.get(name) or {})

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seed(self) -> int:
        return int(self.doc.get("seed", 0))

    @property
    def artifact_dir(self) -> Path:
        return self.resolve(self.doc.get("artifact_dir", "artifacts"))

    @property
    def executor(self) -> str:
        return self.doc.get("executor", "backends")

    @property
    def registry(self) -> Registry:
        try:
            return resolve_dynamic(load_registry(self.doc["registry"]), self.section("environment"))
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"registry invalid: {exc}") from None

    @property
    def endpoints(self) -> dict[str, ModelEndpoint]:
        try:
            return {e["id"]: ModelEndpoint.from_dict(e) for e in self.doc.get("endpoints", [])}
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_ids(self) -> set[str]:
        ids = set()
        for impl in self.registry.implementations(StageKind.MODEL_SELECTION):
            for theta in config_grid(impl):
                ids.add(str(theta.get("model", impl.id)))
        return ids

    @property
    def budget(self) -> float:
        b = self.section("exploration").get("budget", "exhaustive")
        return EXHAUSTIVE if b == "exhaustive" else float(b)

    @property
    def dsqe(self) -> DsqeConfig:
        try:
            return DsqeConfig.from_dict({"seed": self.seed, **self.section("dsqe")})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"dsqe section invalid: {exc}") from None

    def build_doc(self, seed: int | None = None) -> dict[str, Any]:
        doc = {k: self.doc[k] for k in BUILD_SECTIONS if k in self.doc}
        doc["seed"] = self.seed if seed is None else seed
        return doc

    def build_id(self, seed: int | None = None) -> str:
        return build_id(self.build_doc(seed))

    # -- factories
    def client(self):
        return OpenAIClient() if self.doc.get("client", "mock") == "openai" else MockClient()

    def embedder(self, client=None):
        spec = self.section("embedder")
        if spec.get("kind", "hashing") == "remote":
            name = spec.get("endpoint")
            if name not in self.endpoints:
                raise ConfigError(f"embedder endpoint {name!r} is not configured")
            return RemoteEmbedder(client or self.client(), self.endpoints[name], int(spec.get("dim", 256)))
        return HashingEmbedder(int(spec.get("dim", 256)), int(spec.get("seed", 0)))

    def judge(self, client=None):
        name = self.doc.get("judge", "hint" if self.executor == "world" else "overlap")
        if name == "hint":
            return HintJudge()
        if name == "overlap":
            return OverlapJudge()
        ep_id = name.split(":", 1)[1]
        if ep_id not in self.endpoints:
            raise ConfigError(f"judge endpoint {ep_id!r} is not configured")
        return LLMJudge(EndpointGenerator(client or self.client(), self.endpoints[ep_id]))


def budget_label(budget: float) -> str | float:
    return "exhaustive" if math.isinf(budget) else budget
