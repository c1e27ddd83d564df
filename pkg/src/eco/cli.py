"""``eco`` command line: generate, explore, analyze, train, serve, report.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import socket
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .backends import BackendError, EndpointGenerator
from .bundle import build_dir, context_dir, make_executors, training_queries, world_for, write_json
from .cca import CriticalComponentMap, build_map, find_best_path_record
from .config import ConfigError, GlobalConfig, budget_label
from .context import (GenerationAborted, chunk_documents, clean_content, generate_queries, load_documents,
                      save_chunks, save_queries, split_train_test)
from .dsqe import assign_prototype, train_from_map
from .emulator import EXHAUSTIVE, EvalRecord, group_by_query, load_records, run_exploration
from .paths import enumerate_paths
from .rps import TrainingIndex, build_path_stats, component_stats, dump_stats

log = logging.getLogger("eco")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad input: reported with exit code 2."""


def _emit(args: argparse.Namespace, doc: Any) -> None:
    text = doc if isinstance(doc, str) else json.dumps(doc, indent=2, sort_keys=True)
    if getattr(args, "out", None):
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + ("" if text.endswith("\n") else "\n"), encoding="utf-8")
    else:
        print(text)


def _config(args: argparse.Namespace) -> GlobalConfig:
    cfg = GlobalConfig.load(args.config)
    if args.seed is not None:
        cfg.doc["seed"] = args.seed
    return cfg


def _existing_build(cfg: GlobalConfig, args: argparse.Namespace) -> tuple[str, Path]:
    build = args.build or cfg.build_id()
    bdir = build_dir(cfg, build)
    if not bdir.is_dir():
        raise InputError(f"no build {build} under {cfg.artifact_dir / 'builds'}; run `eco explore` first")
    return build, bdir


# -- generate ---------------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = context_dir(cfg)
    ratio = float(cfg.section("generation").get("split_ratio", 0.75))
    if cfg.executor == "world" and "docs_dir" not in cfg.doc:
        world = world_for(cfg)
        queries, chunks, n_docs = world.queries, [], 0
    else:
        if "docs_dir" not in cfg.doc:
            raise InputError("config has no docs_dir")
        docs_path = cfg.resolve(cfg.doc["docs_dir"])
        if not docs_path.is_dir():
            raise InputError(f"docs directory {docs_path} does not exist")
        docs = load_documents(docs_path)
        if not docs:
            raise InputError(f"docs directory {docs_path} holds no .md or .txt documents")
        gen = cfg.section("generation")
        helper = gen.get("helper") or cfg.doc.get("helper") or next(iter(cfg.endpoints), None)
        if helper not in cfg.endpoints:
            raise InputError(f"generation helper endpoint {helper!r} is not configured")
        generator = EndpointGenerator(cfg.client(), cfg.endpoints[helper])
        chunks = chunk_documents(docs)
        if gen.get("clean", False):
            chunks = [dataclasses.replace(c, text=clean_content(c.text, generator, c.id)) for c in chunks]
        try:
            queries = generate_queries(chunks, cfg.doc.get("domain_description", ""), generator,
                                       int(gen.get("per_type_count", 1)),
                                       probe=generator if gen.get("probe", False) else None)
        except GenerationAborted as exc:
            save_queries(out / "queries.partial.jsonl", exc.partial)
            raise
        if not queries:
            raise InputError("no queries were generated; documents may be too short")
        split_train_test(queries, ratio, cfg.seed)  # marks q.split in place
        n_docs = len(docs)
    out.mkdir(parents=True, exist_ok=True)
    save_chunks(out / "chunks.jsonl", chunks)
    save_queries(out / "queries.jsonl", queries)
    summary = {"documents": n_docs, "chunks": len(chunks), "queries": len(queries),
               "train": sum(q.split == "train" for q in queries), "test": sum(q.split == "test" for q in queries)}
    write_json(out / "generate.json", summary)
    _emit(args, summary)
    return EXIT_OK


# -- explore ---------------------------------------------------------------------

def cmd_explore(args: argparse.Namespace) -> int:
    cfg = _config(args)
    build = cfg.build_id()
    if args.build and args.build != build:
        raise InputError(f"build id {args.build} does not match this config (expected {build})")
    qpath = context_dir(cfg) / "queries.jsonl"
    if not qpath.exists():
        raise InputError(f"{qpath} missing; run `eco generate` first")
    queries = [q for q in training_queries(cfg) if q.split == "train"]
    if not queries:
        raise InputError("no training queries")
    exp = cfg.section("exploration")
    budget = EXHAUSTIVE if args.exhaustive else (args.budget if args.budget is not None else cfg.budget)
    if budget <= 0:
        raise InputError("budget must be positive")
    bdir = build_dir(cfg, build)
    bdir.mkdir(parents=True, exist_ok=True)
    write_json(bdir / "config.json", {"build_id": build, "config": cfg.doc, "base_dir": str(cfg.base_dir.resolve())})
    executors, world = make_executors(cfg)
    if world is not None:
        world.save(bdir / "world.json")
    paths = enumerate_paths(cfg.registry)
    client = getattr(executors, "client", None)
    embedder = cfg.embedder(client) if exp.get("kmeans", True) else None
    store, plan = run_exploration(
        build, queries, paths, executors, cfg.judge(client), budget, cfg.seed,
        out_dir=bdir, workers=args.workers or int(exp.get("workers", 4)),
        use_cache=not args.no_cache and bool(exp.get("use_cache", True)),
        cold_latency=args.cold_latency or bool(exp.get("cold_latency", False)), embedder=embedder,
    )
    failed = sum(1 for r in store.records if r.error)
    _emit(args, {"build_id": build, "budget": budget_label(budget), "paths": len(paths), "queries": len(queries),
                 "planned": plan.total, "records": len(store), "failed": failed})
    return EXIT_OK


# -- analyze ---------------------------------------------------------------------

def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = _config(args)
    build, bdir = _existing_build(cfg, args)
    rpath = bdir / "records.jsonl"
    records = load_records(rpath) if rpath.exists() else []
    if not records:
        raise InputError(f"no records in {rpath}")
    opts = cfg.section("cca")
    tau = args.tau if args.tau is not None else float(opts.get("tau", 0.1))
    lam = args.lam if args.lam is not None else int(opts.get("lambda", 1))
    coarse = args.coarse or bool(opts.get("coarse", False))
    phi = build_map(records, tau, lam, coarse=coarse, build_id=build)
    phi.save(bdir / "cca.json")
    sizes = [len(s) for s in phi.entries.values()]
    _emit(args, {"build_id": build, "queries": len(phi), "distinct_sets": len(phi.distinct_sets()),
                 "mean_critical": float(np.mean(sizes)) if sizes else 0.0, "tau": tau, "lambda": lam})
    return EXIT_OK


# -- train -----------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    build, bdir = _existing_build(cfg, args)
    if not (bdir / "cca.json").exists():
        raise InputError("cca.json missing; run `eco analyze` first")
    phi = CriticalComponentMap.load(bdir / "cca.json")
    if len(phi) == 0:
        raise InputError("critical component map is empty")
    queries = [q for q in training_queries(cfg) if q.id in phi]
    if not queries:
        raise InputError("no training query has a critical component entry")
    executors, world = make_executors(cfg, bdir)
    embedder = cfg.embedder(getattr(executors, "client", None))
    dcfg = cfg.dsqe
    if args.epochs is not None:
        dcfg = dataclasses.replace(dcfg, epochs=args.epochs)
    texts, ids = [q.text for q in queries], [q.id for q in queries]
    model = train_from_map(texts, ids, phi, embedder, dcfg, build)
    model.save(bdir / "encoder.json")

    records = load_records(bdir / "records.jsonl")
    basis = cfg.section("rps").get("basis", "p90")
    stats = build_path_stats(records, cfg.endpoints if world is None else world.endpoints, basis)
    write_json(bdir / "stats.json", {"build_id": build, **dump_stats(stats, component_stats(records))}, None)
    index = TrainingIndex.build(model, embedder.embed_many(texts), ids, phi)
    write_json(bdir / "index.json", {"build_id": build, **index.to_dict()}, None)

    summary: dict[str, Any] = {"build_id": build, "prototypes": len(model.component_sets), "queries": len(queries),
                               "loss_first": model.loss_history[0], "loss_last": model.loss_history[-1]}
    if world is not None:
        test = [q for q in training_queries(cfg) if q.split == "test" and world.cluster_of(q) is not None]
        if test:
            hits = sum(assign_prototype(model, q.text, embedder).components == world.planted_critical(q) for q in test)
            summary["holdout_prototype_accuracy"] = hits / len(test)
    _emit(args, summary)
    return EXIT_OK


# -- serve -----------------------------------------------------------------------

def _port_free(host: str, port: int) -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        try:
            s.bind((host, port))
        except OSError:
            return False
    return True


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .server import EcoService, create_app

    cfg = _config(args)
    opts = cfg.section("server")
    host = args.host or opts.get("host", "127.0.0.1")
    port = args.port if args.port is not None else int(opts.get("port", 8000))
    service = EcoService(cfg.artifact_dir, cfg.artifact_dir / "logs")
    builds = args.build_list or [cfg.build_id()]
    for b in builds:
        if not build_dir(cfg, b).is_dir():
            raise InputError(f"no build {b}")
        service.load(b)
    if not _port_free(host, port):
        log.error("port %s:%d is already in use", host, port)
        return EXIT_RUNTIME
    token = os.environ.get(opts.get("token_env", "ECO_SERVER_TOKEN")) or None
    app = create_app(service, token)
    print(json.dumps({"serving": sorted(service.builds), "host": host, "port": port}), flush=True)
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return EXIT_OK


# -- report ----------------------------------------------------------------------

def pareto_front(rows: Sequence[dict[str, Any]]) -> list[str]:
    """Paths no other path beats on accuracy, TTFT and cost at once."""
    def dominates(a, b) -> bool:
        ge = a["accuracy"] >= b["accuracy"] and a["ttft_ms"] <= b["ttft_ms"] and a["usd_per_1k"] <= b["usd_per_1k"]
        gt = a["accuracy"] > b["accuracy"] or a["ttft_ms"] < b["ttft_ms"] or a["usd_per_1k"] < b["usd_per_1k"]
        return ge and gt

    return sorted(r["path_id"] for r in rows if not any(dominates(o, r) for o in rows if o is not r))


def report_tables(records: Sequence[EvalRecord]) -> dict[str, Any]:
    by_path: dict[str, list[EvalRecord]] = {}
    for r in records:
        by_path.setdefault(r.path_id, []).append(r)
    rows = [{"path_id": pid, "n": len(rs), "accuracy": float(np.mean([r.accuracy for r in rs])),
             "ttft_ms": float(np.mean([r.cold_ttft_ms for r in rs])),
             "usd_per_1k": float(np.mean([r.cost for r in rs])) * 1000.0}
            for pid, rs in sorted(by_path.items())]
    front = set(pareto_front(rows))
    for row in rows:
        row["pareto"] = row["path_id"] in front
    profiles = []
    grouped = group_by_query(records)
    for name, lam in (("latency_first", 1), ("cost_first", 0)):
        best = [find_best_path_record(rs, lam) for _, rs in sorted(grouped.items())]
        profiles.append({"profile": name, "queries": len(best),
                         "accuracy": float(np.mean([b.accuracy for b in best])),
                         "ttft_ms": float(np.mean([b.cold_ttft_ms for b in best])),
                         "usd_per_1k": float(np.mean([b.cost for b in best])) * 1000.0})
    return {"paths": rows, "profiles": profiles, "pareto": sorted(front)}


def _format_table(rows: Sequence[dict[str, Any]]) -> str:
    if not rows:
        return "(empty)\n"
    cols = list(rows[0])
    cells = [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in (r[c] for c in cols)] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def _format_csv(tables: dict[str, Any]) -> str:
    buf = io.StringIO()
    for name in ("paths", "profiles"):
        rows = tables[name]
        if not rows:
            continue
        buf.write(f"# {name}\n")
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def cmd_report(args: argparse.Namespace) -> int:
    if args.records:
        rpath = Path(args.records)
    else:
        cfg = _config(args)
        _, bdir = _existing_build(cfg, args)
        rpath = bdir / "records.jsonl"
    if not rpath.exists():
        raise InputError(f"record store {rpath} not found")
    records = load_records(rpath)
    if not records:
        raise InputError(f"record store {rpath} is empty")
    tables = report_tables(records)
    if args.format == "json":
        _emit(args, tables)
    elif args.format == "csv":
        _emit(args, _format_csv(tables))
    else:
        text = "paths\n" + _format_table(tables["paths"]) + "\nprofiles\n" + _format_table(tables["profiles"])
        text += "\npareto\n" + "".join(f"  {p}\n" for p in tables["pareto"])
        _emit(args, text)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="global config JSON")
    common.add_argument("--build", help="build id (default: derived from the config)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="write the report or summary here instead of stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="eco", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"eco {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="chunk documents and generate training queries")

    p = sub.add_parser("explore", parents=[common], help="evaluate (query, path) pairs")
    p.add_argument("--budget", type=float, help="budget factor B")
    p.add_argument("--exhaustive", action="store_true", help="evaluate every pair")
    p.add_argument("--workers", type=int)
    p.add_argument("--no-cache", action="store_true", help="disable prefix caching")
    p.add_argument("--cold-latency", action="store_true", help="count cached stage latency in ttft_ms")

    p = sub.add_parser("analyze", parents=[common], help="critical component analysis")
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda", dest="lam", type=int, choices=(0, 1))
    p.add_argument("--coarse", action="store_true", help="match components on implementation only")

    p = sub.add_parser("train", parents=[common], help="train the query encoder")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("serve", parents=[common], help="run the completion server")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--load", dest="build_list", action="append", metavar="BUILD", help="extra build to load")

    p = sub.add_parser("report", parents=[common], help="accuracy, latency and cost tables")
    p.add_argument("--records", help="record store path (instead of --config/--build)")
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    return parser


COMMANDS = {"generate": cmd_generate, "explore": cmd_explore, "analyze": cmd_analyze, "train": cmd_train,
            "serve": cmd_serve, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "serve" and args.build and not args.build_list:
        args.build_list = [args.build]
    elif args.command == "serve" and args.build:
        args.build_list = [args.build, *args.build_list]
    if args.config is None and not (args.command == "report" and args.records):
        print("eco: --config is required", file=sys.stderr)
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except (InputError, ConfigError) as exc:
        print(f"eco {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (GenerationAborted, BackendError, OSError, RuntimeError, ValueError) as exc:
        print(f"eco {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
