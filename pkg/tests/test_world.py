import json
import time

import pytest

from eco.cca import ComponentValue
from eco.context import QueryType, TrainingQuery
from eco.emulator import EXHAUSTIVE, Context, HintJudge, PrefixCache, StageError, execute_path, run_exploration
from eco.paths import StageKind, format_value
from eco.world import World, WorldError, WorldExecutors, WorldSpec, make_world

SIXTEEN = {
    "q": [{"id": "none"}, {"id": "stepback"}],
    "r": [{"id": "none"}, {"id": "rag", "params": [{"name": "top_k", "kind": "static", "value": 3}]}],
    "c": [{"id": "none"}, {"id": "compress"}],
    "m": [{"id": "edge-small"}, {"id": "cloud-a"}],
}


def test_surface_cells_match_planted_arithmetic():
    world = make_world(WorldSpec(n_clusters=4, queries_per_cluster=3, options=SIXTEEN, noise=0.0), seed=5)
    assert len(world.paths) == 16
    cells = {(c, p.canonical_id): world.expected_accuracy(c, p) for c in range(4) for p in world.paths}
    assert len(cells) == 64
    for (c, path_id), acc in cells.items():
        tokens = set(path_id.split("|"))
        spelled = {f"{v.stage.value}={v.impl}{{" + ",".join(f"{k}={format_value(x)}" for k, x in v.params) + "}": e
                   for v, e in world.planted[c].items()}
        oracle = 0.3 + sum(e for t, e in spelled.items() if t in tokens)
        assert acc == pytest.approx(oracle, abs=1e-12)
    for planted in world.planted:
        assert len({v.stage for v in planted}) == 2
        assert all(0.25 <= e <= 0.3 for e in planted.values())


def test_noise_free_emulator_reproduces_surface():
    world = make_world(WorldSpec(n_clusters=2, queries_per_cluster=4, options=SIXTEEN, noise=0.0), seed=1)
    store, _ = run_exploration("w", world.queries, world.paths, WorldExecutors(world), HintJudge(), EXHAUSTIVE,
                               workers=1)
    assert len(store) == 8 * 16
    by_id = {p.canonical_id: p for p in world.paths}
    for r in store.records:
        q = next(q for q in world.queries if q.id == r.query_id)
        assert r.accuracy == world.expected_accuracy(world.cluster_of(q), by_id[r.path_id])
        assert r.cold_ttft_ms == pytest.approx(world.path_latency(by_id[r.path_id]))


def test_same_seed_byte_identical(tmp_path):
    spec = WorldSpec(n_clusters=3, queries_per_cluster=5)
    make_world(spec, 9).save(tmp_path / "a.json")
    make_world(spec, 9).save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    make_world(spec, 10).save(tmp_path / "c.json")
    assert (tmp_path / "a.json").read_bytes() != (tmp_path / "c.json").read_bytes()


def test_load_round_trip_and_tamper_check(tmp_path):
    world = make_world(WorldSpec(n_clusters=2, queries_per_cluster=4), 2)
    world.save(tmp_path / "world.json")
    back = World.load(tmp_path / "world.json")
    assert back.to_dict() == world.to_dict()
    doc = json.loads((tmp_path / "world.json").read_text())
    doc["planted"][0][0]["effect"] = 0.99
    (tmp_path / "world.json").write_text(json.dumps(doc))
    with pytest.raises(WorldError):
        World.load(tmp_path / "world.json")


def test_spec_refusals():
    with pytest.raises(WorldError, match="twice the noise"):
        WorldSpec(effect=(0.05, 0.1), noise=0.03)
    with pytest.raises(WorldError, match=r"\[0, 1\]"):
        WorldSpec(base=0.6, effect=(0.25, 0.3))
    with pytest.raises(WorldError):
        WorldSpec(cluster_by="colour")
    only_m = {"q": [{"id": "none"}], "r": [{"id": "none"}], "c": [{"id": "none"}], "m": [{"id": "a"}, {"id": "b"}]}
    with pytest.raises(WorldError, match="more planted"):
        make_world(WorldSpec(options=only_m, planted_per_cluster=2), 0)


def test_mandatory_components_join_planted_sets():
    opts = {**SIXTEEN, "q": [{"id": "none"}]}
    world = make_world(WorldSpec(n_clusters=2, queries_per_cluster=2, options=opts), 0)
    mandatory = ComponentValue(StageKind.QUERY_PROCESSING, "none")
    assert world.mandatory == {mandatory}
    assert all(mandatory in world.planted_critical(q) for q in world.queries)


def test_holdout_quarter_per_cluster():
    world = make_world(WorldSpec(n_clusters=4, queries_per_cluster=20), 3)
    for c in range(4):
        members = [q for q in world.queries if world.clusters[q.id] == c]
        assert sum(q.split == "test" for q in members) == 5


def test_cluster_by_type_for_unknown_queries():
    world = make_world(WorldSpec(n_clusters=2, queries_per_cluster=2, cluster_by="type"), 0)
    q = TrainingQuery("new", "text", QueryType.EXPLANATION, "a", "g")
    assert world.cluster_of(q) == 1
    by_id = make_world(WorldSpec(n_clusters=2, queries_per_cluster=2), 0)
    assert by_id.cluster_of(q) is None and by_id.accuracy(q, by_id.paths[0]) is None


def test_best_path_oracles_agree_without_noise():
    world = make_world(WorldSpec(n_clusters=3, queries_per_cluster=4, noise=0.0), 4)
    for q in world.queries:
        best = world.best_path(q)
        assert best == world.best_path(q, noisy=False)
        path = next(p for p in world.paths if p.canonical_id == best)
        assert all(v.matches(path) for v in world.planted_critical(q))


def test_executor_rejects_unknown_component_and_counts():
    world = make_world(WorldSpec(n_clusters=1, queries_per_cluster=1), 0)
    ex = WorldExecutors(world)
    with pytest.raises(StageError):
        ex.run(StageKind.RETRIEVAL, "bm25", {}, world.queries[0], Context("x"))
    rec, final = execute_path(world.queries[0], world.paths[-1], ex, PrefixCache(), HintJudge())
    assert final is not None and rec.cost > 0
    assert ex.total_executions == sum(1 for c in world.paths[-1].choices if not c.is_null)


def test_sleep_mode_waits():
    world = make_world(WorldSpec(n_clusters=1, queries_per_cluster=1), 0)
    path = world.paths[0]
    ex = WorldExecutors(world, sleep=True, time_scale=0.05)
    started = time.perf_counter()
    execute_path(world.queries[0], path, ex, None, HintJudge())
    elapsed_ms = (time.perf_counter() - started) * 1000
    assert elapsed_ms >= 0.05 * world.path_latency(path) * 0.9
