"""OpenAI-compatible completion service over loaded builds.

Requests may carry a top-level ``eco`` object::

    {"build_id": "...", "slo": {"max_latency_ms": 800, "max_cost": 0.002},
     "profile": "latency_first" | "cost_first"}

Responses carry the same key with the selection outcome.  Streaming is
emulated: the chosen path runs to completion, then the answer is emitted as
server-sent chunks, so the measured time to first token is the time to the
first emitted chunk.
"""
from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterator, Mapping

from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse, StreamingResponse

from .bundle import BuildBundle, BuildLoadError, load_build
from .context import QueryType, TrainingQuery
from .emulator import execute_path
from .paths import StageKind
from .rps import Profile, SloConstraint
from .tokens import count_tokens

log = logging.getLogger(__name__)


class RequestError(ValueError):
    pass


class AuditLog:
    """Append-only jsonl file with a lock; a no-op without a path."""

    def __init__(self, path: Path | None):
        self.path = path
        self._lock = threading.Lock()
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, row: Mapping[str, Any]) -> None:
        if self.path is None:
            return
        line = json.dumps(row, sort_keys=True)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


class EcoService:
    """Transport-independent request handling; the FastAPI app is a thin shell."""

    def __init__(self, artifact_dir: str | Path | None = None, log_dir: str | Path | None = None):
        self.artifact_dir = Path(artifact_dir) if artifact_dir else None
        self.builds: dict[str, BuildBundle] = {}
        self.default_build: str | None = None
        self.counters: Counter[str] = Counter()
        self.per_build: dict[str, Counter[str]] = {}
        self._lock = threading.Lock()
        log_dir = Path(log_dir) if log_dir else None
        self.selections = AuditLog(log_dir / "selections.jsonl" if log_dir else None)
        self.errors = AuditLog(log_dir / "errors.jsonl" if log_dir else None)

    # -- builds
    def add_build(self, bundle: BuildBundle) -> None:
        with self._lock:
            self.builds[bundle.build_id] = bundle
            self.per_build.setdefault(bundle.build_id, Counter())
            if self.default_build is None:
                self.default_build = bundle.build_id

    def load(self, build: str, root: str | Path | None = None) -> BuildBundle:
        if root is None:
            if self.artifact_dir is None:
                raise BuildLoadError("no artifact directory configured")
            root = self.artifact_dir / "builds" / build
        if not Path(root).is_dir():
            raise FileNotFoundError(f"no build directory {root}")
        bundle = load_build(build, root)
        self.add_build(bundle)
        return bundle

    def _bump(self, build: str | None, *keys: str) -> None:
        with self._lock:
            for k in keys:
                self.counters[k] += 1
                if build in self.per_build:
                    self.per_build[build][k] += 1

    def report_state(self) -> dict[str, Any]:
        with self._lock:
            return {
                "builds": {b: bundle.describe() for b, bundle in sorted(self.builds.items())},
                "default_build": self.default_build,
                "counters": {k: self.counters.get(k, 0) for k in _COUNTERS},
                "per_build": {b: {k: c.get(k, 0) for k in _COUNTERS} for b, c in sorted(self.per_build.items())},
                "cache": {b: (bundle.cache.stats() if bundle.cache else {"enabled": False})
                          for b, bundle in sorted(self.builds.items())},
            }

    # -- completions
    def handle_completion(self, body: Mapping[str, Any]) -> dict[str, Any]:
        """Select and run a path; returns the OpenAI-shaped response body.

        Raises LookupError (unknown build), RequestError (bad body) or
        UpstreamFailure (execution failed).
        """
        ext = body.get("eco") or {}
        if not isinstance(ext, Mapping):
            raise RequestError("'eco' must be an object")
        text = _query_text(body)
        build = ext.get("build_id") or self.default_build
        bundle = self.builds.get(build) if build else None
        if bundle is None:
            raise LookupError(f"unknown build {build!r}")
        try:
            slo = SloConstraint.from_dict(ext.get("slo"))
            profile = Profile(ext.get("profile") or bundle.config.section("rps").get("profile", "latency_first"))
        except (ValueError, TypeError) as exc:
            raise RequestError(str(exc)) from None

        self._bump(build, "requests")
        selection = bundle.selector.select(text, slo, profile)
        digest = hashlib.sha256(f"{build}\x00{text}".encode()).hexdigest()
        query = TrainingQuery(f"req-{digest[:16]}", text, QueryType.RETRIEVAL, "-", "-")
        started = time.perf_counter()
        record, final = execute_path(query, selection.path, bundle.executors, bundle.cache,
                                     build_id=build, score=False)
        wall_ms = (time.perf_counter() - started) * 1000.0
        audit = selection.audit(text, slo, profile)
        audit.update({"build_id": build, "created_at": _now(), "wall_ms": wall_ms})

        if final is None:
            self._bump(build, "errors")
            audit.update({"error": record.error, "measured": None})
            self.selections.write(audit)
            self.errors.write({"created_at": _now(), "build_id": build, "path_id": selection.path_id,
                               "error": record.error, "query_digest": audit["query_digest"]})
            raise UpstreamFailure(selection.path_id, record.error or "execution failed")

        measured_violation = not slo.admits(record.ttft_ms, record.cost)
        counters = ["served"]
        if selection.fallback:
            counters.append("fallbacks")
        if not selection.slo_met_estimate:
            counters.append("slo_violations_estimate")
        if measured_violation:
            counters.append("slo_violations_measured")
        self._bump(build, *counters)
        audit.update({"error": None, "measured": {"ttft_ms": record.ttft_ms, "cost": record.cost},
                      "slo_violated_measured": measured_violation})
        self.selections.write(audit)

        model_choice = selection.path[StageKind.MODEL_SELECTION]
        completion_tokens = count_tokens(final.text)
        return {
            "id": f"chatcmpl-{digest[:24]}",
            "object": "chat.completion",
            "created": int(time.time()),
            "model": str(model_choice.theta.get("model", model_choice.impl)),
            "choices": [{"index": 0, "message": {"role": "assistant", "content": final.text},
                         "finish_reason": "stop", "logprobs": None}],
            "usage": {"prompt_tokens": record.prompt_tokens, "completion_tokens": completion_tokens,
                      "total_tokens": record.prompt_tokens + completion_tokens},
            "eco": {
                "build_id": build,
                "path_id": selection.path_id,
                "fallback": selection.fallback,
                "fallback_strategy": selection.fallback_strategy,
                "prototype": selection.prototype,
                "criticals": [str(c) for c in sorted(selection.criticals)],
                "estimates": selection.estimates,
                "estimate_basis": selection.basis,
                "slo": slo.to_dict(),
                "profile": profile.value,
                "slo_met_estimate": selection.slo_met_estimate,
                "slo_violated_measured": measured_violation,
                "ttft_ms": record.ttft_ms,
                "cost": record.cost,
                "cache_hit_stages": record.cache_hit_stages,
            },
        }


_COUNTERS = ("requests", "served", "errors", "fallbacks", "slo_violations_estimate", "slo_violations_measured")


class UpstreamFailure(RuntimeError):
    def __init__(self, path_id: str, message: str):
        super().__init__(message)
        self.path_id = path_id


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def _query_text(body: Mapping[str, Any]) -> str:
    messages = body.get("messages")
    if not isinstance(messages, list) or not messages:
        raise RequestError("'messages' must be a non-empty list")
    for msg in reversed(messages):
        if isinstance(msg, Mapping) and msg.get("role") == "user":
            content = msg.get("content")
            if isinstance(content, list):  # content parts
                content = " ".join(p.get("text", "") for p in content if isinstance(p, Mapping))
            if isinstance(content, str) and content.strip():
                return content
    raise RequestError("no user message with text content")


def _stream(response: dict[str, Any]) -> Iterator[str]:
    base = {k: response[k] for k in ("id", "created", "model")}
    base["object"] = "chat.completion.chunk"
    content = response["choices"][0]["message"]["content"]
    first = {**base, "choices": [{"index": 0, "delta": {"role": "assistant", "content": ""}, "finish_reason": None}]}
    yield f"data: {json.dumps(first)}\n\n"
    for i, word in enumerate(content.split(" ")):
        piece = word if i == 0 else " " + word
        chunk = {**base, "choices": [{"index": 0, "delta": {"content": piece}, "finish_reason": None}]}
        yield f"data: {json.dumps(chunk)}\n\n"
    last = {**base, "choices": [{"index": 0, "delta": {}, "finish_reason": "stop"}],
            "usage": response["usage"], "eco": response["eco"]}
    yield f"data: {json.dumps(last)}\n\n"
    yield "data: [DONE]\n\n"


def _error(status: int, message: str, kind: str, **extra: Any) -> JSONResponse:
    return JSONResponse({"error": {"message": message, "type": kind, **extra}}, status_code=status)


def create_app(service: EcoService | None = None, token: str | None = None) -> FastAPI:
    service = service or EcoService()
    app = FastAPI(title="eco runtime", version="0.1.0")
    app.state.service = service

    @app.middleware("http")
    async def bearer(request: Request, call_next):
        if token and request.url.path != "/health":
            if request.headers.get("authorization") != f"Bearer {token}":
                return _error(401, "missing or invalid bearer token", "authentication_error")
        return await call_next(request)

    @app.get("/health")
    def health() -> dict[str, Any]:
        return {"status": "ok", "builds": sorted(service.builds)}

    @app.get("/eco/state")
    def state() -> dict[str, Any]:
        return service.report_state()

    @app.post("/eco/builds/{build}/load")
    async def load(build: str, request: Request):
        raw = await request.body()
        doc = json.loads(raw) if raw.strip() else {}
        try:
            bundle = await run_in_threadpool(service.load, build, doc.get("artifact_dir"))
        except FileNotFoundError as exc:
            return _error(404, str(exc), "not_found")
        except BuildLoadError as exc:
            return _error(409, str(exc), "build_conflict")
        return {"loaded": bundle.describe()}

    @app.post("/v1/chat/completions")
    async def completions(request: Request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return _error(400, "body is not JSON", "invalid_request_error")
        if not isinstance(body, dict):
            return _error(400, "body must be an object", "invalid_request_error")
        try:
            response = await run_in_threadpool(service.handle_completion, body)
        except RequestError as exc:
            return _error(400, str(exc), "invalid_request_error")
        except LookupError as exc:
            return _error(404, str(exc), "not_found")
        except UpstreamFailure as exc:
            return _error(502, str(exc), "upstream_error", path_id=exc.path_id)
        if body.get("stream"):
            return StreamingResponse(_stream(response), media_type="text/event-stream")
        return response

    return app

