import numpy as np
import pytest
from graphs import random_parts
from hypothesis import given, settings
from hypothesis import strategies as st

from hiurnet.urban_graph import (
    DEFAULT_FEATURE_NAMES,
    EDGE_TYPES,
    FEATURE_CATEGORIES,
    DataError,
    FlowRecord,
    FlowType,
    GraphOptions,
    IndicatorTable,
    InclusionMap,
    UnitKind,
    build_graph,
    city,
    feature_category,
    leaked_records,
    load_coords,
    load_flows,
    load_grid_indicators,
    load_inclusion,
    load_split,
    mesh,
    split_edges,
    standardize_features,
    training_graph,
    write_coords,
    write_flows,
    write_inclusion,
    write_indicators,
    write_split,
)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# --- domain types ----------------------------------------------------------


def test_flow_type_inferred_from_endpoint_kinds():
    assert FlowRecord(mesh(0), mesh(1), 1.0).flow_type is FlowType.M2M
    assert FlowRecord(mesh(0), city(1), 1.0).flow_type is FlowType.M2C
    assert FlowRecord(city(0), mesh(1), 1.0).flow_type is FlowType.C2M


@pytest.mark.parametrize("volume", [-1.0, float("nan"), float("inf")])
def test_flow_record_rejects_bad_volume(volume):
    with pytest.raises(DataError):
        FlowRecord(mesh(0), mesh(1), volume)


def test_city_to_city_flows_have_no_type():
    with pytest.raises(DataError):
        FlowRecord(city(0), city(1), 1.0)


def test_inconsistent_declared_type_rejected():
    with pytest.raises(DataError):
        FlowRecord(mesh(0), mesh(1), 1.0, FlowType.M2C)


def test_feature_taxonomy_covers_43_columns():
    assert sum(FEATURE_CATEGORIES.values()) == 43 == len(DEFAULT_FEATURE_NAMES)
    counts = {c: 0 for c in FEATURE_CATEGORIES}
    for name in DEFAULT_FEATURE_NAMES:
        counts[feature_category(name)] += 1
    assert counts == FEATURE_CATEGORIES


def test_edge_type_schema():
    assert EDGE_TYPES["includes"] == (UnitKind.CITY, UnitKind.MESH)
    assert EDGE_TYPES["in"] == (UnitKind.MESH, UnitKind.CITY)
    assert EDGE_TYPES["m2c"] == (UnitKind.MESH, UnitKind.CITY)


# --- CSV ingestion -------------------------------------------------------


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.gamma(2.0, 1.0, size=(6, 43))
    table = IndicatorTable(DEFAULT_FEATURE_NAMES, raw)
    inclusion = InclusionMap.from_assignment([0, 0, 1, 1, 1, 0])
    flows = [FlowRecord(mesh(0), mesh(3), 2.5), FlowRecord(mesh(1), city(1), 0.1), FlowRecord(city(0), mesh(4), 7.0)]
    coords = rng.random((6, 2))
    write_indicators(tmp_path / "i.csv", table)
    write_inclusion(tmp_path / "c.csv", inclusion)
    write_flows(tmp_path / "f.csv", flows)
    write_coords(tmp_path / "xy.csv", coords)
    back = load_grid_indicators(tmp_path / "i.csv")
    assert back.feature_names == DEFAULT_FEATURE_NAMES
    np.testing.assert_array_equal(back.values, raw)
    assert load_inclusion(tmp_path / "c.csv").pairs == inclusion.pairs
    assert load_flows(tmp_path / "f.csv") == flows
    np.testing.assert_array_equal(load_coords(tmp_path / "xy.csv", 6), coords)


def test_indicator_rows_may_come_in_any_order(tmp_path):
    p = _write(tmp_path / "i.csv", "grid_id,a,b\n1,3,4\n0,1,2\n")
    np.testing.assert_array_equal(load_grid_indicators(p).values, [[1, 2], [3, 4]])


@pytest.mark.parametrize(
    "body, fragment",
    [
        ("grid_id,a\n0,1\n0,2\n", "row 3: duplicate grid id 0"),
        ("grid_id,a\n0,1\n2,2\n", "dense range"),
        ("grid_id,a\n0,-1\n", "row 2, column 'a': negative value"),
        ("grid_id,a\n0,x\n", "row 2, column 'a': non-numeric"),
        ("grid_id,a\n0,1,2\n", "row 2: expected 2 columns"),
        ("a,grid_id\n1,0\n", "first column must be grid_id"),
        ("", "header row required"),
    ],
)
def test_indicator_errors_name_row_and_column(tmp_path, body, fragment):
    with pytest.raises(DataError, match=fragment):
        load_grid_indicators(_write(tmp_path / "i.csv", body))


def test_flow_file_errors(tmp_path):
    head = "origin_id,origin_kind,dest_id,dest_kind,volume\n"
    with pytest.raises(DataError, match="row 3: duplicate flow"):
        load_flows(_write(tmp_path / "a.csv", head + "0,mesh,1,mesh,1\n0,mesh,1,mesh,2\n"))
    with pytest.raises(DataError, match="row 2: negative volume"):
        load_flows(_write(tmp_path / "b.csv", head + "0,mesh,1,mesh,-1\n"))
    with pytest.raises(DataError, match="unknown kind"):
        load_flows(_write(tmp_path / "c.csv", head + "0,block,1,mesh,1\n"))
    with pytest.raises(DataError, match="header must start"):
        load_flows(_write(tmp_path / "d.csv", "o,ok,d,dk,v\n"))
    with pytest.raises(DataError, match="file not found"):
        load_flows(tmp_path / "missing.csv")


# --- graph construction -------------------------------------------------


def test_build_graph_edge_sets():
    table, inclusion, records = random_parts(np.random.default_rng(1))
    g = build_graph(table, inclusion, records)
    counts = g.edge_counts()
    assert counts["m2m"] == sum(r.flow_type is FlowType.M2M for r in records)
    assert counts["m2c"] == sum(r.flow_type is FlowType.M2C for r in records)
    assert counts["includes"] == counts["in"] == table.grid_count
    inc, back = g.edges["includes"], g.edges["in"]
    assert sorted(zip(inc.src, inc.dst)) == sorted(zip(back.dst, back.src))
    assert "geo" not in g.edges


def test_inclusion_must_partition_grids():
    table, _, records = random_parts(np.random.default_rng(2), n_mesh=4, n_city=2, n_m2m=2, n_m2c=1, n_c2m=1)
    with pytest.raises(DataError, match="appears more than once"):
        build_graph(table, InclusionMap(((city(0), mesh(0)), (city(1), mesh(0)), (city(1), mesh(1)), (city(0), mesh(2)), (city(0), mesh(3)))), [])
    with pytest.raises(DataError, match="has no city"):
        build_graph(table, InclusionMap(((city(0), mesh(0)), (city(1), mesh(1)))), [])


def test_unknown_unit_rejected():
    table, inclusion, _ = random_parts(np.random.default_rng(3), n_mesh=4, n_city=2, n_m2m=2, n_m2c=1, n_c2m=1)
    with pytest.raises(DataError, match="unknown unit"):
        build_graph(table, inclusion, [FlowRecord(mesh(0), mesh(99), 1.0)])


def test_geo_edges_on_lattice():
    xs, ys = np.meshgrid(np.arange(3.0), np.arange(3.0))
    coords = np.column_stack([xs.ravel(), ys.ravel()])
    table = standardize_features(IndicatorTable(("a",), np.arange(9.0).reshape(9, 1)))
    g = build_graph(table, InclusionMap.from_assignment([0] * 9), [], GraphOptions(geo=True), coords)
    deg = np.bincount(g.edges["geo"].src, minlength=9)
    assert deg[4] == 8  # centre
    assert deg[0] == 3  # corner
    assert deg[1] == 5  # side


def test_geo_needs_coordinates():
    table, inclusion, records = random_parts(np.random.default_rng(4))
    with pytest.raises(DataError):
        build_graph(table, inclusion, records, GraphOptions(geo=True))


# --- standardization ---------------------------------------------------


def test_standardize_zero_mean_unit_variance_and_constant_column():
    raw = np.column_stack([np.arange(5.0), np.full(5, 3.0)])
    z = standardize_features(IndicatorTable(("a", "b"), raw))
    np.testing.assert_allclose(z.values[:, 0].mean(), 0.0, atol=1e-15)
    np.testing.assert_allclose(z.values[:, 0].std(), 1.0)
    np.testing.assert_array_equal(z.values[:, 1], 0.0)
    assert standardize_features(z) is z


# --- splitting ----------------------------------------------------------


def test_split_is_8_1_1_per_type_and_partitions():
    table, inclusion, records = random_parts(np.random.default_rng(5), n_mesh=20, n_city=3, n_m2m=100, n_m2c=30, n_c2m=30)
    split = split_edges(records, seed=3)
    for ft, n in ((FlowType.M2M, 100), (FlowType.M2C, 30), (FlowType.C2M, 30)):
        assert (len(split.train[ft]), len(split.val[ft]), len(split.test[ft])) == (round(0.8 * n), round(0.1 * n), n - round(0.8 * n) - round(0.1 * n))
    keys = [r.key for r in split.all_records()]
    assert sorted(keys) == sorted(r.key for r in records)


def test_split_deterministic_per_seed():
    _, _, records = random_parts(np.random.default_rng(6), n_mesh=20, n_city=3, n_m2m=60)
    assert split_edges(records, seed=1) == split_edges(records, seed=1)
    assert split_edges(records, seed=1).records("test") != split_edges(records, seed=2).records("test")


def test_split_rejects_bad_ratios():
    with pytest.raises(ValueError):
        split_edges([], (0.5, 0.5, 0.5))


def test_split_file_round_trip(tmp_path):
    _, _, records = random_parts(np.random.default_rng(7), n_mesh=12, n_city=3, n_m2m=30)
    split = split_edges(records, seed=0)
    write_split(tmp_path / "s.csv", split)
    assert load_split(tmp_path / "s.csv") == split


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_training_graph_never_contains_held_out_flows(seed):
    rng = np.random.default_rng(seed)
    table, inclusion, records = random_parts(rng, n_mesh=10, n_city=3, n_m2m=30, n_m2c=10, n_c2m=10)
    split = split_edges(records, seed=seed)
    g = training_graph(table, inclusion, split)
    assert leaked_records(g, split.records("val") + split.records("test")) == []
    assert len(leaked_records(g, split.records("train"))) == len(split.records("train"))


def test_permuted_graph_relabels_consistently():
    table, inclusion, records = random_parts(np.random.default_rng(8))
    g = build_graph(table, inclusion, records)
    perm = np.random.default_rng(0).permutation(g.n_mesh)
    h = g.permuted(perm)
    np.testing.assert_array_equal(h.features.values[perm], g.features.values)
    np.testing.assert_array_equal(h.edges["m2m"].src, perm[g.edges["m2m"].src])
