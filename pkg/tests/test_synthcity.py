import json
import math
from collections import defaultdict

import numpy as np
import pytest
from scipy.stats import skew

from hiurnet.synthcity import WorldConfig, generate_world, write_world
from hiurnet.urban_graph import FlowType, build_graph, load_flows, load_grid_indicators, load_inclusion, standardize_features


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig())


def test_default_world_shape(world):
    assert world.indicators.values.shape == (392, 43)
    owners = world.inclusion.city_of_grid(392)
    assert sorted(set(owners.tolist())) == list(range(8))
    assert np.bincount(owners).tolist() == [49] * 8
    # partition check happens inside graph construction
    build_graph(standardize_features(world.indicators), world.inclusion, world.flows)


def test_volumes_non_negative_and_m2m_density(world):
    assert all(r.volume >= 0 for r in world.flows)
    n_m2m = sum(r.flow_type is FlowType.M2M for r in world.flows)
    assert n_m2m == round(0.05 * 392 * 391)


def test_inter_level_flows_are_sums_of_grid_flows(world):
    owner = world.inclusion.city_of_grid(392)
    into, out_of = defaultdict(list), defaultdict(list)
    for r in world.flows:
        if r.flow_type is FlowType.M2M and owner[r.origin.index] != owner[r.destination.index]:
            into[(r.origin.index, int(owner[r.destination.index]))].append(r.volume)
            out_of[(int(owner[r.origin.index]), r.destination.index)].append(r.volume)
    m2c = {(r.origin.index, r.destination.index): r.volume for r in world.flows if r.flow_type is FlowType.M2C}
    c2m = {(r.origin.index, r.destination.index): r.volume for r in world.flows if r.flow_type is FlowType.C2M}
    assert set(m2c) == set(into) and set(c2m) == set(out_of)
    assert all(m2c[k] == math.fsum(v) for k, v in into.items())
    assert all(c2m[k] == math.fsum(v) for k, v in out_of.items())


def test_volumes_right_skewed(world):
    for ft in FlowType:
        vols = [r.volume for r in world.flows if r.flow_type is ft]
        assert skew(vols) > 1, ft


def test_same_seed_gives_identical_files(tmp_path):
    cfg = WorldConfig(n_cities=3, grid_side=4, seed=9)
    a = write_world(generate_world(cfg), tmp_path / "a", cfg)
    b = write_world(generate_world(cfg), tmp_path / "b", cfg)
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes(), key
    c = write_world(generate_world(WorldConfig(n_cities=3, grid_side=4, seed=10)), tmp_path / "c")
    assert a["flows"].read_bytes() != c["flows"].read_bytes()


def test_written_files_load_back(tmp_path, world):
    paths = write_world(world, tmp_path, WorldConfig())
    np.testing.assert_array_equal(load_grid_indicators(paths["indicators"]).values, world.indicators.values)
    assert load_inclusion(paths["inclusion"]).pairs == world.inclusion.pairs
    assert load_flows(paths["flows"]) == world.flows
    manifest = json.loads(paths["manifest"].read_text())
    assert manifest["seed"] == 0
    assert len(manifest["process"]["road_columns"]) == 3


def test_zero_noise_volumes_follow_process_exactly():
    w = generate_world(WorldConfig(n_cities=2, grid_side=3, noise_sd=0.0, flow_density=0.5))
    p = w.process
    for r in w.flows:
        if r.flow_type is FlowType.M2M:
            o, d = r.origin.index, r.destination.index
            dist = np.linalg.norm(w.coords[o] - w.coords[d])
            want = p.volume_scale * p.attractiveness[o] * p.attractiveness[d] * math.exp(-dist / p.decay_length)
            assert r.volume == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize(
    "kwargs",
    [dict(n_cities=1), dict(grid_side=1), dict(flow_density=0.0), dict(flow_density=1.5), dict(noise_sd=-1.0), dict(attractiveness="random")],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        WorldConfig(**kwargs)
