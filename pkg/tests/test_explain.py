import csv
from dataclasses import replace

import numpy as np
import pytest
from graphs import random_parts

import hiurnet.autodiff as ad
from hiurnet.explain import (
    AttributionRequest,
    integrated_gradients,
    path_integrated_gradients,
    regional_summary,
    select_target_edges,
)
from hiurnet.model import ModelConfig, init_params
from hiurnet.training import TrainConfig, train
from hiurnet.urban_graph import (
    FEATURE_CATEGORIES,
    DataError,
    FlowRecord,
    InclusionMap,
    build_graph,
    city,
    mesh,
    split_edges,
    training_graph,
)

TINY = ModelConfig(embed_dim=8, heads=2, layers=2, decoder_hidden=8)


@pytest.fixture(scope="module")
def trained():
    table, inclusion, records = random_parts(np.random.default_rng(11), n_mesh=16, n_city=3, n_m2m=60, n_m2c=20, n_c2m=20)
    split = split_edges(records, seed=0)
    graph = training_graph(table, inclusion, split)
    params, _ = train(graph, split, TINY, TrainConfig(learning_rate=1e-2, max_epochs=30, patience=30))
    return params, graph, split


# --- target selection ------------------------------------------------------


def test_selection_truncates_and_orders():
    recs = [
        FlowRecord(mesh(0), city(1), 5.0),
        FlowRecord(city(1), mesh(2), 9.0),
        FlowRecord(mesh(3), city(1), 5.0),
        FlowRecord(mesh(4), city(0), 99.0),
        FlowRecord(mesh(0), mesh(1), 50.0),
    ]
    graph = build_graph(*random_parts(np.random.default_rng(0), n_mesh=6, n_city=2)[:2], [])
    got = select_target_edges(graph, recs, city(1), 10)
    assert got == [recs[1], recs[0], recs[2]]
    assert select_target_edges(graph, recs, city(1), 1) == [recs[1]]


def test_selection_errors():
    graph = build_graph(*random_parts(np.random.default_rng(0), n_mesh=6, n_city=2)[:2], [])
    with pytest.raises(DataError):
        select_target_edges(graph, [FlowRecord(mesh(0), mesh(1), 1.0)], city(0), 3)
    with pytest.raises(ValueError):
        select_target_edges(graph, [], mesh(0), 3)
    with pytest.raises(DataError):
        select_target_edges(graph, [], city(7), 3)


def test_request_validation():
    with pytest.raises(ValueError):
        AttributionRequest(city(0), k=0)
    with pytest.raises(ValueError):
        AttributionRequest(city(0), steps=1)
    with pytest.raises(ValueError):
        AttributionRequest(mesh(0))


# --- integrated gradients --------------------------------------------------


def test_linear_function_closed_form():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(5, 3))
    v = rng.normal(size=4)
    x = {"a": rng.normal(size=(5, 3)), "b": rng.normal(size=4)}

    def f(t):
        return ad.add(ad.sum_(ad.mul(t["a"], ad.tensor(w))), ad.sum_(ad.mul(t["b"], ad.tensor(v))))

    attr = path_integrated_gradients(f, x, steps=7)
    np.testing.assert_allclose(attr["a"], w * x["a"], rtol=0, atol=1e-12)
    np.testing.assert_allclose(attr["b"], v * x["b"], rtol=0, atol=1e-12)


def test_input_equal_to_baseline_gives_zero():
    x = {"a": np.array([1.0, -2.0])}
    attr = path_integrated_gradients(lambda t: ad.sum_(ad.sigmoid(t["a"])), x, baselines=x, steps=16)
    np.testing.assert_array_equal(attr["a"], 0.0)


def test_zero_valued_feature_gets_exactly_zero(trained):
    params, graph, split = trained
    values = graph.features.values.copy()
    values[::3, 5] = 0.0
    values[:, 40] = 0.0
    graph = replace(graph, features=replace(graph.features, values=values))
    rec = select_target_edges(graph, split, city(0), 1)[0]
    res = integrated_gradients(params, graph, rec, steps=4)
    assert (res.features[values == 0.0] == 0.0).all()
    assert (res.features[values != 0.0] != 0.0).any()


def test_gap_shrinks_when_steps_double(trained):
    params, graph, split = trained
    for rec in select_target_edges(graph, split, city(1), 2):
        a = integrated_gradients(params, graph, rec, steps=128)
        b = integrated_gradients(params, graph, rec, steps=256)
        assert b.completeness_gap <= a.completeness_gap


def test_parameters_stay_trainable_after_attribution(trained):
    params, graph, split = trained
    integrated_gradients(params, graph, select_target_edges(graph, split, city(0), 1)[0], steps=2)
    assert all(t.requires_grad for t in params.parameters())


def test_unstandardized_graph_rejected(trained):
    params, graph, split = trained
    raw = replace(graph, features=replace(graph.features, means=None, stdevs=None))
    with pytest.raises(DataError):
        integrated_gradients(params, raw, split.records("train")[0], steps=2)


# --- regional summary -----------------------------------------------------


def test_summary_rollup_and_csv(trained, tmp_path):
    params, graph, split = trained
    rep = regional_summary(params, graph, AttributionRequest(city(2), k=3, steps=8), split)
    assert 1 <= len(rep.target_edges) <= 3
    assert len(rep.completeness_gap) == len(rep.target_edges) == len(rep.relative_gap)
    assert set(rep.category_rollup) == set(FEATURE_CATEGORIES)
    total = sum(float(v.sum()) for v in rep.node_feature_attributions.values())
    assert abs(sum(rep.category_rollup.values()) - total) <= 1e-9
    assert max(rep.normalized_rollup.values()) == 1.0
    members = set(graph.edges["includes"].dst[graph.edges["includes"].src == 2].tolist())
    assert {g for g, _ in rep.grid_ranking} == members
    assert abs(sum(s for _, s in rep.grid_ranking) - 1.0) <= 1e-12
    shares = [s for _, s in rep.grid_ranking]
    assert shares == sorted(shares, reverse=True)
    rep.write_csv(tmp_path / "a.csv")
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows[0] == ["grid_id", "category", "attribution"]
    assert len(rows) - 1 == 4 * len(members)
    assert "[category_rollup]" in rep.format_text()


def test_summary_is_deterministic_and_worker_independent(trained):
    params, graph, split = trained
    req = AttributionRequest(city(0), k=2, steps=4)
    a = regional_summary(params, graph, req, split)
    b = regional_summary(params, graph, req, split, workers=2)
    assert a.as_dict() == b.as_dict()
    for g in a.node_feature_attributions:
        np.testing.assert_array_equal(a.node_feature_attributions[g], b.node_feature_attributions[g])


def test_single_grid_city_takes_all_mass():
    table, _, records = random_parts(np.random.default_rng(5), n_mesh=7, n_city=2, n_m2m=10, n_m2c=4, n_c2m=4)
    owner = [0] * 7
    owner[3] = 1
    inclusion = InclusionMap.from_assignment(owner)
    records = [r for r in records if r.flow_type.value == "m2m"] + [FlowRecord(mesh(0), city(1), 4.0), FlowRecord(city(1), mesh(5), 2.0)]
    graph = build_graph(table, inclusion, records)
    params = init_params(TINY, graph.metadata(), 0)
    rep = regional_summary(params, graph, AttributionRequest(city(1), k=10, steps=4), records)
    assert rep.grid_ranking == [(3, 1.0)]
