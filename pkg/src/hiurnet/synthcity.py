"""Seeded synthetic hierarchical worlds with a known flow-generating process.

Cities tile the unit square; each owns a ``grid_side x grid_side`` lattice of
grids.  Grid-to-grid volumes follow an attractiveness-product times
exponential-distance-decay rule; inter-level volumes are exact sums of the
grid-level flows they aggregate.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

from .urban_graph import (
    DEFAULT_FEATURE_NAMES,
    N_FEATURES,
    FlowRecord,
    IndicatorTable,
    InclusionMap,
    city,
    mesh,
    write_coords,
    write_flows,
    write_inclusion,
    write_indicators,
)


@dataclass(frozen=True)
class WorldConfig:
    n_cities: int = 8
    grid_side: int = 7
    flow_density: float = 0.05
    noise_sd: float = 0.1
    seed: int = 0
    decay_length: float = 0.25
    mean_volume: float = 20.0
    # "indicators": attractiveness from road x POI interaction; "population": pure gravity
    attractiveness: str = "indicators"

    def __post_init__(self):
        if self.n_cities < 2:
            raise ValueError("n_cities must be >= 2")
        if self.grid_side < 2:
            raise ValueError("grid_side must be >= 2")
        if not 0 < self.flow_density <= 1:
            raise ValueError("flow_density must be in (0, 1]")
        if self.noise_sd < 0 or self.decay_length <= 0 or self.mean_volume <= 0:
            raise ValueError("noise_sd >= 0, decay_length > 0 and mean_volume > 0 required")
        if self.attractiveness not in ("indicators", "population"):
            raise ValueError(f"unknown attractiveness mode {self.attractiveness!r}")

    @property
    def feature_dim(self) -> int:
        return N_FEATURES

    @property
    def n_grids(self) -> int:
        return self.n_cities * self.grid_side**2


@dataclass(frozen=True)
class GroundTruthProcess:
    road_columns: tuple[int, ...]
    poi_columns: tuple[int, ...]
    attractiveness: np.ndarray
    decay_length: float
    volume_scale: float
    noise_sd: float

    def manifest(self) -> dict:
        return {
            "road_columns": list(self.road_columns),
            "poi_columns": list(self.poi_columns),
            "decay_length": self.decay_length,
            "volume_scale": self.volume_scale,
            "noise_sd": self.noise_sd,
        }


class World(NamedTuple):
    indicators: IndicatorTable
    inclusion: InclusionMap
    flows: list[FlowRecord]
    coords: np.ndarray
    process: GroundTruthProcess


def _layout(cfg: WorldConfig, rng: np.random.Generator):
    cols = math.ceil(math.sqrt(cfg.n_cities))
    rows = math.ceil(cfg.n_cities / cols)
    bw, bh = 1.0 / cols, 1.0 / rows
    side = cfg.grid_side
    coords = np.empty((cfg.n_grids, 2))
    owner = np.empty(cfg.n_grids, dtype=np.int64)
    cores = np.empty((cfg.n_cities, 2))
    for c in range(cfg.n_cities):
        cx, cy = c % cols, c // cols
        cores[c] = ((cx + rng.uniform(0.3, 0.7)) * bw, (cy + rng.uniform(0.3, 0.7)) * bh)
        for b in range(side):
            for a in range(side):
                g = c * side * side + b * side + a
                coords[g] = ((cx + (a + 0.5) / side) * bw, (cy + (b + 0.5) / side) * bh)
                owner[g] = c
    return coords, owner, cores, min(bw, bh)


def _indicators(cfg: WorldConfig, rng, coords, owner, cores, block) -> np.ndarray:
    n = cfg.n_grids
    city_scale = rng.lognormal(0.0, 0.5, size=cfg.n_cities)
    d_core = np.linalg.norm(coords - cores[owner], axis=1)
    urban = city_scale[owner] * np.exp(-(d_core**2) / (2 * (0.3 * block) ** 2)) + 0.05
    business = rng.lognormal(0.0, 0.8, size=n)
    resident = rng.lognormal(0.0, 0.5, size=n)

    X = np.empty((n, N_FEATURES))
    # 24 road columns: 12 link counts, 12 densities, per width class
    for j in range(24):
        load = rng.uniform(0.5, 1.5)
        base = rng.uniform(0.5, 3.0)
        m = base * urban**load
        if j < 12:
            X[:, j] = rng.poisson(5.0 * m)
        else:
            X[:, j] = rng.gamma(4.0, m / 4.0)
    # 17 facility/employee counts
    for j in range(17):
        lam = rng.uniform(1.0, 20.0)
        expo = rng.uniform(0.5, 1.5)
        X[:, 24 + j] = rng.poisson(lam * urban**expo * business)
    X[:, 41] = rng.poisson(300.0 * urban * resident)
    station = rng.random(n) < 0.08 * urban / urban.max()
    X[:, 42] = np.where(station, rng.lognormal(8.0, 0.8, size=n), 0.0)
    return X


def generate_world(config: WorldConfig = WorldConfig()) -> World:
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    coords, owner, cores, block = _layout(cfg, rng)
    X = _indicators(cfg, rng, coords, owner, cores, block)
    n = cfg.n_grids

    road_cols = tuple(sorted(int(i) for i in rng.choice(24, size=3, replace=False)))
    poi_cols = tuple(sorted(24 + int(i) for i in rng.choice(17, size=3, replace=False)))
    if cfg.attractiveness == "population":
        attr = X[:, 41] / max(X[:, 41].mean(), 1e-12) + 0.05
    else:
        road = (X[:, road_cols] / np.maximum(X[:, road_cols].mean(axis=0), 1e-12)).mean(axis=1)
        poi = (X[:, poi_cols] / np.maximum(X[:, poi_cols].mean(axis=0), 1e-12)).mean(axis=1)
        attr = np.sqrt((0.05 + road) * (0.05 + poi))

    dist = cdist(coords, coords)
    w = np.outer(attr, attr) * np.exp(-dist / cfg.decay_length)
    np.fill_diagonal(w, 0.0)

    # weighted sampling of k distinct ordered pairs (Gumbel top-k)
    k = int(round(cfg.flow_density * n * (n - 1)))
    off = ~np.eye(n, dtype=bool)
    cand = np.flatnonzero(off.reshape(-1))
    keys = np.log(w.reshape(-1)[cand]) + rng.gumbel(size=cand.size)
    chosen = np.sort(cand[np.argpartition(-keys, k - 1)[:k]])
    o_idx, d_idx = np.divmod(chosen, n)
    w_sel = w[o_idx, d_idx]
    scale = cfg.mean_volume / w_sel.mean()
    noise = np.exp(rng.normal(0.0, cfg.noise_sd, size=k)) if cfg.noise_sd > 0 else np.ones(k)
    vol = scale * w_sel * noise

    flows = [FlowRecord(mesh(o), mesh(d), float(v)) for o, d, v in zip(o_idx, d_idx, vol)]

    m2c: dict[tuple[int, int], list[float]] = defaultdict(list)
    c2m: dict[tuple[int, int], list[float]] = defaultdict(list)
    for o, d, v in zip(o_idx.tolist(), d_idx.tolist(), vol.tolist()):
        co, cd = int(owner[o]), int(owner[d])
        if co != cd:
            m2c[(o, cd)].append(v)
            c2m[(co, d)].append(v)
    for (g, c), vs in sorted(m2c.items()):
        flows.append(FlowRecord(mesh(g), city(c), math.fsum(vs)))
    for (c, g), vs in sorted(c2m.items()):
        flows.append(FlowRecord(city(c), mesh(g), math.fsum(vs)))

    table = IndicatorTable(DEFAULT_FEATURE_NAMES, X)
    inclusion = InclusionMap.from_assignment(owner.tolist())
    process = GroundTruthProcess(road_cols, poi_cols, attr, cfg.decay_length, float(scale), cfg.noise_sd)
    return World(table, inclusion, flows, coords, process)


def write_world(world: World, out_dir: str | Path, config: WorldConfig | None = None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "indicators": out / "indicators.csv",
        "inclusion": out / "inclusion.csv",
        "flows": out / "flows.csv",
        "coords": out / "coords.csv",
        "manifest": out / "manifest.json",
    }
    write_indicators(paths["indicators"], world.indicators)
    write_inclusion(paths["inclusion"], world.inclusion)
    write_flows(paths["flows"], world.flows)
    write_coords(paths["coords"], world.coords)
    manifest = {"generator": "hiurnet.synthcity", "process": world.process.manifest()}
    if config is not None:
        manifest["config"] = asdict(config)
        manifest["seed"] = config.seed
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
