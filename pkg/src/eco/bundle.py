"""On-disk build layout and the loaded, read-only bundle served at runtime.

Layout under the artifact directory::

    context/chunks.jsonl  context/queries.jsonl  context/generate.json
    builds/<id>/config.json   world.json (world executor only)
    builds/<id>/records.jsonl plan.json cca.json encoder.json stats.json index.json
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .backends import MockClient, embedder_from_id
from .cca import CriticalComponentMap
from .config import GlobalConfig
from .context import TrainingQuery, load_chunks, load_queries
from .dsqe import EncoderModel
from .emulator import PrefixCache, load_records
from .executors import BackendExecutors, ChunkIndex
from .paths import PathSpec, enumerate_paths
from .rps import Selector, TrainingIndex, load_stats
from .world import World, WorldExecutors, WorldSpec, make_world


class BuildLoadError(RuntimeError):
    pass


def context_dir(cfg: GlobalConfig) -> Path:
    return cfg.artifact_dir / "context"


def build_dir(cfg: GlobalConfig, build: str) -> Path:
    return cfg.artifact_dir / "builds" / build


def write_json(path: Path, doc: Any, indent: int | None = 1) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=indent, sort_keys=True)
        fh.write("\n")
    tmp.replace(path)


def read_json(path: Path) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def world_for(cfg: GlobalConfig, bdir: Path | None = None) -> World:
    if bdir is not None and (bdir / "world.json").exists():
        return World.load(bdir / "world.json")
    doc = cfg.section("world")
    seed = int(doc.pop("seed", cfg.seed))
    doc.setdefault("options", cfg.doc["registry"]["stages"])
    return make_world(WorldSpec.from_dict(doc), seed)


def make_executors(cfg: GlobalConfig, bdir: Path | None = None, client=None):
    """Stage executors for a build, plus the world when one is configured."""
    if cfg.executor == "world":
        world = world_for(cfg, bdir)
        opts = cfg.section("world")
        return WorldExecutors(world, bool(opts.get("sleep", False)), float(opts.get("time_scale", 1.0))), world
    client = client or cfg.client()
    chunks_path = context_dir(cfg) / "chunks.jsonl"
    index = ChunkIndex(load_chunks(chunks_path), cfg.embedder(client)) if chunks_path.exists() else None
    return BackendExecutors(client, cfg.endpoints, index, cfg.doc.get("helper"),
                            cfg.doc.get("local_latency_ms")), None


def training_queries(cfg: GlobalConfig) -> list[TrainingQuery]:
    return load_queries(context_dir(cfg) / "queries.jsonl")


@dataclass
class BuildBundle:
    build_id: str
    root: Path
    config: GlobalConfig
    paths: list[PathSpec]
    model: EncoderModel
    phi: CriticalComponentMap
    selector: Selector
    executors: Any
    endpoints: dict
    cache: PrefixCache | None = None

    def describe(self) -> dict[str, Any]:
        return {"build_id": self.build_id, "dir": str(self.root), "paths": len(self.paths),
                "prototypes": len(self.model.component_sets), "training_queries": len(self.selector.index.query_ids)}


def load_build(build: str, root: str | Path) -> BuildBundle:
    """Load every artifact of a build and check they all carry its id."""
    root = Path(root)
    required = ["config.json", "records.jsonl", "cca.json", "encoder.json", "stats.json", "index.json"]
    missing = [n for n in required if not (root / n).exists()]
    if missing:
        raise BuildLoadError(f"build {build}: missing artifacts {missing} in {root}")
    cfg_doc = read_json(root / "config.json")
    cfg = GlobalConfig.from_dict(cfg_doc["config"], cfg_doc.get("base_dir", root))

    ids = {"config.json": cfg_doc.get("build_id")}
    phi = CriticalComponentMap.load(root / "cca.json")
    ids["cca.json"] = phi.build_id
    model = EncoderModel.load(root / "encoder.json")
    ids["encoder.json"] = model.build_id
    stats_doc = read_json(root / "stats.json")
    ids["stats.json"] = stats_doc.get("build_id")
    index_doc = read_json(root / "index.json")
    ids["index.json"] = index_doc.get("build_id")
    record_ids = {r.build_id for r in load_records(root / "records.jsonl")}
    bad = {name: got for name, got in ids.items() if got != build}
    if record_ids - {build}:
        bad["records.jsonl"] = sorted(record_ids - {build})
    if bad:
        raise BuildLoadError(f"build {build}: artifacts carry other build ids: {bad}")

    stats, components = load_stats(stats_doc)
    index = TrainingIndex.from_dict(index_doc)
    client = MockClient() if cfg.doc.get("client", "mock") == "mock" else None
    if model.embedder_id.startswith("hashing:"):
        embedder: Any = embedder_from_id(model.embedder_id)
    else:
        embedder = cfg.embedder(client)
    executors, _world = make_executors(cfg, root, client)
    rps = cfg.section("rps")
    paths = enumerate_paths(cfg.registry)
    selector = Selector(model, embedder, stats, index, components, paths,
                        int(rps.get("k", 5)), float(rps.get("tau_acc", 0.6)))
    cache = PrefixCache() if cfg.section("server").get("prefix_cache", False) else None
    return BuildBundle(build, root, cfg, paths, model, phi, selector, executors, cfg.endpoints, cache)

