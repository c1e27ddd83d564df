import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eco.backends import ModelEndpoint, estimate_cost
from eco.cca import ComponentValue
from eco.dsqe import DsqeConfig, EncoderModel, ProjectionNetwork
from eco.emulator import EvalRecord
from eco.paths import STAGES, StageKind, parse_path_id
from eco.rps import (
    ComponentEstimate, Neighbor, PathEstimate, PathStats, Profile, SloConstraint, TrainingIndex, build_path_stats,
    component_stats, dump_stats, fallback, filter_valid, jaccard, latency_estimate, load_stats, score_neighbors,
    select,
)
from eco.world import WorldSpec, make_world

from helpers import pid, world_pipeline

M = StageKind.MODEL_SELECTION


def est(path_id, lat, cost, acc=0.5):
    return PathEstimate(path_id, 1, lat, lat, cost, cost, acc, 10)


def stats_of(*rows) -> PathStats:
    return PathStats({p: est(p, lat, cost, acc) for p, lat, cost, acc in rows})


def comp(stage, impl, acc, cost):
    return ComponentEstimate(ComponentValue(stage, impl), acc, cost, 3)


@pytest.fixture(scope="module")
def world_selector():
    # noise below half the best-path tolerance keeps each query's best path identifiable
    world = make_world(WorldSpec(n_clusters=4, queries_per_cluster=24, noise=0.004), seed=3)
    selector, phi, recs = world_pipeline(world, seed=3)
    return world, selector, phi, recs


# -- SLO

def test_slo_validation_and_admits():
    with pytest.raises(ValueError):
        SloConstraint(max_latency_ms=0)
    with pytest.raises(ValueError):
        SloConstraint(max_cost=-1)
    slo = SloConstraint(500, None)
    assert slo.admits(500, 1e9) and not slo.admits(500.1, 0)
    assert SloConstraint.from_dict(slo.to_dict()) == slo
    assert Profile("cost_first").lam == 0 and Profile.LATENCY_FIRST.lam == 1


# -- stats

def test_p90_interpolated():
    recs = [EvalRecord("b", f"q{i}", pid(), 0.5, t, 0.01) for i, t in enumerate((100.0, 200.0, 300.0))]
    s = build_path_stats(recs)[pid()]
    assert s.mean_ttft_ms == 200.0 and s.latency_ms == pytest.approx(280.0)
    assert s.n == 3 and latency_estimate([100, 200, 300], "mean") == 200
    with pytest.raises(ValueError):
        latency_estimate([1.0], "p42")


def test_single_record_and_failed_excluded():
    ok = EvalRecord("b", "q", pid(m="a"), 0.7, 120.0, 0.02)
    bad = EvalRecord("b", "q", pid(m="b"), 0.0, 10.0, 0.0, error="StageError: x")
    stats = build_path_stats([ok, bad])
    assert pid(m="b") not in stats
    s = stats[pid(m="a")]
    assert (s.latency_ms, s.mean_ttft_ms, s.cost, s.mean_accuracy) == (120.0, 120.0, 0.02, 0.7)


def test_cost_estimate_uses_formula_at_mean_prompt():
    ep = ModelEndpoint("a", cost_alpha=1e-4, cost_beta=2e-4, max_tokens=50)
    recs = [EvalRecord("b", f"q{i}", pid(m="a"), 0.5, 100.0, 1.0, prompt_tokens=n, stage_costs={"r": 0.5, "m": 0.5})
            for i, n in enumerate((10, 30))]
    s = build_path_stats(recs, {"a": ep})[pid(m="a")]
    assert s.cost == pytest.approx(0.5 + estimate_cost(20, ep, 50))
    assert s.mean_cost == 1.0


def test_stats_round_trip():
    recs = [EvalRecord("b", "q", pid(m=m), 0.5, 100.0, 0.1, stage_costs={"m": 0.1}) for m in ("a", "b")]
    stats, comps = build_path_stats(recs), component_stats(recs)
    back_stats, back_comps = load_stats(json.loads(json.dumps(dump_stats(stats, comps))))
    assert back_stats.paths == stats.paths and back_comps == comps


# -- filtering

def test_filter_examples():
    paths = [parse_path_id(pid(m=m)) for m in ("cloud-A", "edge", "cloud-B")]
    stats = stats_of(*((p.canonical_id, 100.0 * (i + 1), 0.1, 0.5) for i, p in enumerate(paths)))
    assert filter_valid(paths, stats, SloConstraint(max_latency_ms=50)) == []
    assert filter_valid(paths, stats, SloConstraint()) == paths
    crit = {ComponentValue(M, "cloud-A")}
    assert filter_valid(paths, stats, SloConstraint(), crit) == [p for p in paths if p[M].impl == "cloud-A"]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(1, 5000), st.floats(0, 0.01)), min_size=1, max_size=20),
       st.floats(1, 5000), st.floats(0, 3000), st.floats(1e-6, 0.01), st.floats(0, 0.01))
def test_relaxing_slo_never_shrinks_valid_set(rows, lat, dlat, cost, dcost):
    paths = [parse_path_id(pid(m=f"m{i}")) for i in range(len(rows))]
    stats = stats_of(*((p.canonical_id, a, b, 0.5) for p, (a, b) in zip(paths, rows)))
    tight = {p.canonical_id for p in filter_valid(paths, stats, SloConstraint(lat, cost))}
    loose = {p.canonical_id for p in filter_valid(paths, stats, SloConstraint(lat + dlat, cost + dcost))}
    unbounded = {p.canonical_id for p in filter_valid(paths, stats, SloConstraint(lat + dlat, None))}
    assert tight <= loose <= unbounded


# -- scoring

def test_score_worked_example():
    nbrs = [Neighbor("a", "P1", 0.9, 1.0), Neighbor("b", "P1", 0.8, 1.0), Neighbor("c", "P2", 0.7, 0.5)]
    scores = score_neighbors(nbrs, ["P1", "P2", "P3"])
    assert scores["P1"] == pytest.approx(1.7) and scores["P2"] == pytest.approx(0.35) and scores["P3"] == 0
    assert score_neighbors(nbrs, ["P9"]) == {"P9": 0.0}


def test_jaccard():
    a, b = ComponentValue(M, "a"), ComponentValue(M, "b")
    assert jaccard(frozenset(), frozenset()) == 1.0
    assert jaccard(frozenset({a}), frozenset({a, b})) == 0.5
    assert jaccard(frozenset({a}), frozenset()) == 0.0


def test_index_self_neighbor_and_clamp():
    sets = [frozenset({ComponentValue(M, "a")}), frozenset({ComponentValue(M, "b")})]
    idx = TrainingIndex(["x", "y"], np.eye(2), sets, ["P1", "P2"])
    nbrs = idx.neighbors(np.array([0.0, 3.0]), sets[1], 10)
    assert len(nbrs) == 2 and nbrs[0].query_id == "y" and nbrs[0].similarity == pytest.approx(1.0)
    assert nbrs[0].weight == 1.0 and nbrs[1].weight == 0.0
    back = TrainingIndex.from_dict(json.loads(json.dumps(idx.to_dict())))
    assert back.query_ids == idx.query_ids and np.array_equal(back.projected, idx.projected)
    assert back.criticals == idx.criticals


# -- fallback

def full_components(**m):
    comps = {s: [comp(s, "none", 0.5, 0.0)] for s in STAGES if s is not M}
    comps[M] = [comp(M, k, acc, cost) for k, (acc, cost) in m.items()]
    return comps


def test_fallback_constrained_argmin():
    comps = full_components(cheap=(0.7, 1.0), rich=(0.9, 10.0))
    stats = stats_of((pid(m="cheap"), 100, 1.0, 0.7), (pid(m="rich"), 100, 10.0, 0.9))
    fb = fallback(frozenset(), comps, stats, SloConstraint(), tau_acc=0.65)
    assert fb.path[M].impl == "cheap" and fb.strategy == "components" and fb.slo_met


def test_fallback_relaxes_to_max_accuracy():
    comps = full_components(cheap=(0.3, 1.0), rich=(0.5, 10.0))
    stats = stats_of((pid(m="cheap"), 100, 1.0, 0.3), (pid(m="rich"), 100, 10.0, 0.5))
    assert fallback(frozenset(), comps, stats, SloConstraint(), tau_acc=0.65).path[M].impl == "rich"


def test_fallback_all_critical_verbatim():
    crit = frozenset(ComponentValue(s, f"x{s.value}") for s in STAGES)
    comps = full_components(cheap=(0.9, 1.0))
    path_id = "q=xq{}|r=xr{}|c=xc{}|m=xm{}"
    fb = fallback(crit, comps, stats_of((path_id, 100, 1.0, 0.5)), SloConstraint())
    assert fb.path.canonical_id == path_id


def test_fallback_profile_min_when_slo_still_broken():
    comps = full_components(cheap=(0.7, 1.0), fast=(0.7, 5.0))
    stats = stats_of((pid(m="cheap"), 900, 1.0, 0.7), (pid(m="fast"), 300, 5.0, 0.7))
    fb = fallback(frozenset(), comps, stats, SloConstraint(max_latency_ms=100))
    assert fb.path[M].impl == "fast" and fb.strategy == "profile-min" and not fb.slo_met
    fb = fallback(frozenset(), comps, stats, SloConstraint(max_latency_ms=100), profile=Profile.COST_FIRST)
    assert fb.path[M].impl == "cheap"


# -- select

def tiny_model(k=1):
    net = ProjectionNetwork([np.eye(2)], [np.zeros(2)], 0.0)
    sets = [frozenset()] + [frozenset({ComponentValue(M, f"c{i}")}) for i in range(1, k)]
    return EncoderModel("e", net, np.eye(2)[:k], sets, DsqeConfig())


def test_single_valid_path_chosen_and_zero_score_tie_break():
    paths = [parse_path_id(pid(m=m)) for m in ("slow", "fast", "pricey")]
    stats = stats_of((paths[0].canonical_id, 900, 0.1, 0.5), (paths[1].canonical_id, 200, 0.5, 0.5),
                     (paths[2].canonical_id, 100, 9.0, 0.5))
    idx = TrainingIndex(["t"], np.array([[1.0, 0.0]]), [frozenset()], ["elsewhere"])
    emb = np.array([1.0, 0.0])
    res = select(emb, SloConstraint(max_latency_ms=250, max_cost=1.0), tiny_model(), stats, idx, {}, paths)
    assert res.path == paths[1] and not res.fallback and res.valid_count == 1
    res = select(emb, SloConstraint(), tiny_model(), stats, idx, {}, paths)
    assert set(res.scores.values()) == {0.0} and res.path == paths[2]
    res = select(emb, SloConstraint(), tiny_model(), stats, idx, {}, paths, Profile.COST_FIRST)
    assert res.path == paths[0]


def test_selection_deterministic_and_audited(world_selector):
    world, selector, _, _ = world_selector
    q = world.by_split("test")[0]
    a = selector.select(q.text, SloConstraint(3000, 0.01))
    b = selector.select(q.text, SloConstraint(3000, 0.01))
    assert a.path_id == b.path_id and a.scores == b.scores
    audit = a.audit(q.text, SloConstraint(3000, 0.01), Profile.LATENCY_FIRST)
    for key in ("query_digest", "prototype", "criticals", "slo", "valid_count", "chosen_path", "scores_top5",
                "fallback", "estimates"):
        assert key in audit
    assert len(audit["scores_top5"]) <= 5


def test_slo_safety_and_containment_over_sweep(world_selector):
    world, selector, _, _ = world_selector
    checked = 0
    for q in world.queries[::3]:
        for lat in (500, 1000, 2000, 3500, 5000):
            for per_1k in (0.5, 2, 5, 10):
                slo = SloConstraint(lat, per_1k / 1000)
                res = selector.select(q.text, slo)
                assert res.path is not None
                if not res.fallback:
                    e = res.estimates
                    assert e["latency_ms"] <= lat and e["cost"] <= per_1k / 1000
                    assert all(c.matches(res.path) for c in res.criticals)
                    checked += 1
    assert checked > 0


def test_holdout_quality_with_generous_slo(world_selector):
    world, selector, _, _ = world_selector
    test = world.by_split("test")
    assert all(world.best_path(q) == world.best_path(q, noisy=False) for q in test)
    hits = sum(selector.select(q.text, SloConstraint()).path_id == world.best_path(q, noisy=False) for q in test)
    assert hits / len(test) >= 0.8


def test_infeasible_slo_falls_back_with_criticals(world_selector):
    world, selector, _, _ = world_selector
    for q in world.by_split("test"):
        res = selector.select(q.text, SloConstraint(max_latency_ms=1.0))
        assert res.fallback and res.valid_count == 0
        assert all(c.matches(res.path) for c in res.criticals)
        assert not res.slo_met_estimate
