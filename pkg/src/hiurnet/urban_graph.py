"""Hierarchical urban data model: grids (mesh), cities, flows, and the typed graph.

Node ids are dense per kind: grids are ``0..N_m-1`` and cities ``0..N_c-1``.
CSV inputs must use those dense ids directly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree


class DataError(ValueError):
    """Bad input data (malformed file, unknown id, broken invariant)."""


class UnitKind(str, Enum):
    MESH = "mesh"
    CITY = "city"


class FlowType(str, Enum):
    M2M = "m2m"
    M2C = "m2c"
    C2M = "c2m"

    @property
    def kinds(self) -> tuple[UnitKind, UnitKind]:
        return _FLOW_KINDS[self]

    @classmethod
    def from_kinds(cls, origin: UnitKind, destination: UnitKind) -> "FlowType":
        for ft, kinds in _FLOW_KINDS.items():
            if kinds == (origin, destination):
                return ft
        raise DataError(f"no flow type for {origin.value} -> {destination.value}")


_FLOW_KINDS = {
    FlowType.M2M: (UnitKind.MESH, UnitKind.MESH),
    FlowType.M2C: (UnitKind.MESH, UnitKind.CITY),
    FlowType.C2M: (UnitKind.CITY, UnitKind.MESH),
}

# Task slot order used everywhere weights are given as a triple.
TASK_ORDER = (FlowType.C2M, FlowType.M2C, FlowType.M2M)

# edge type -> (source kind, target kind)
EDGE_TYPES: dict[str, tuple[UnitKind, UnitKind]] = {
    "m2m": (UnitKind.MESH, UnitKind.MESH),
    "m2c": (UnitKind.MESH, UnitKind.CITY),
    "c2m": (UnitKind.CITY, UnitKind.MESH),
    "includes": (UnitKind.CITY, UnitKind.MESH),
    "in": (UnitKind.MESH, UnitKind.CITY),
    "geo": (UnitKind.MESH, UnitKind.MESH),
}
FLOW_EDGE_TYPES = ("m2m", "m2c", "c2m")

N_FEATURES = 43
FEATURE_CATEGORIES: dict[str, int] = {"roads": 24, "pois": 17, "population": 1, "railway": 1}
DEFAULT_FEATURE_NAMES: tuple[str, ...] = (
    tuple(f"road_{i:02d}" for i in range(24))
    + tuple(f"poi_{i:02d}" for i in range(17))
    + ("population", "railway_users")
)
POPULATION_COLUMN = "population"


def feature_category(name: str) -> str:
    if name.startswith("road"):
        return "roads"
    if name.startswith("poi"):
        return "pois"
    if name.startswith("pop"):
        return "population"
    if name.startswith("rail"):
        return "railway"
    return "other"


class UrbanUnitId(NamedTuple):
    kind: UnitKind
    index: int

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.index}"


def mesh(i: int) -> UrbanUnitId:
    return UrbanUnitId(UnitKind.MESH, int(i))


def city(i: int) -> UrbanUnitId:
    return UrbanUnitId(UnitKind.CITY, int(i))


@dataclass(frozen=True)
class FlowRecord:
    origin: UrbanUnitId
    destination: UrbanUnitId
    volume: float
    flow_type: FlowType | None = None

    def __post_init__(self):
        ft = FlowType.from_kinds(self.origin.kind, self.destination.kind)
        if self.flow_type is None:
            object.__setattr__(self, "flow_type", ft)
        elif FlowType(self.flow_type) is not ft:
            raise DataError(f"flow type {self.flow_type} inconsistent with {self.origin} -> {self.destination}")
        if not (self.volume >= 0 and math.isfinite(self.volume)):
            raise DataError(f"invalid volume {self.volume} for {self.origin} -> {self.destination}")

    @property
    def key(self) -> tuple:
        return (self.flow_type, self.origin.index, self.destination.index)


@dataclass(frozen=True)
class IndicatorTable:
    """Per-grid indicator matrix; ``means``/``stdevs`` are set once standardized."""

    feature_names: tuple[str, ...]
    values: np.ndarray
    means: np.ndarray | None = None
    stdevs: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(self.feature_names):
            raise DataError(
                f"indicator matrix shape {values.shape} does not match {len(self.feature_names)} feature names"
            )
        object.__setattr__(self, "values", values)

    @property
    def grid_count(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def standardized(self) -> bool:
        return self.means is not None and self.stdevs is not None

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.feature_names.index(name)]
        except ValueError:
            raise DataError(f"missing indicator column {name!r}") from None


@dataclass(frozen=True)
class InclusionMap:
    pairs: tuple[tuple[UrbanUnitId, UrbanUnitId], ...]

    @classmethod
    def from_assignment(cls, city_of_grid: Sequence[int]) -> "InclusionMap":
        return cls(tuple((city(c), mesh(g)) for g, c in enumerate(city_of_grid)))

    def city_of_grid(self, n_grids: int) -> np.ndarray:
        out = np.full(n_grids, -1, dtype=np.int64)
        for c, g in self.pairs:
            out[g.index] = c.index
        return out

    def members(self, city_index: int) -> list[int]:
        return [g.index for c, g in self.pairs if c.index == city_index]


@dataclass(frozen=True)
class EdgeList:
    src: np.ndarray
    dst: np.ndarray
    volume: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.src)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))


@dataclass(frozen=True)
class GraphOptions:
    flows: bool = True
    inclusion: bool = True
    geo: bool = False


@dataclass(frozen=True)
class HeteroGraph:
    node_counts: dict[UnitKind, int]
    edges: dict[str, EdgeList]
    features: IndicatorTable | None = None
    grid_coords: np.ndarray | None = None
    city_of_grid: np.ndarray | None = None

    @property
    def n_mesh(self) -> int:
        return self.node_counts[UnitKind.MESH]

    @property
    def n_city(self) -> int:
        return self.node_counts[UnitKind.CITY]

    def edge_counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.edges.items()}

    def metadata(self) -> dict:
        return {
            "node_counts": {k.value: v for k, v in self.node_counts.items()},
            "edge_types": sorted(self.edges),
            "n_features": None if self.features is None else self.features.n_features,
        }

    def permuted(self, grid_perm: np.ndarray, city_perm: np.ndarray | None = None) -> "HeteroGraph":
        """Relabel nodes: new index of old grid ``g`` is ``grid_perm[g]``."""
        grid_perm = np.asarray(grid_perm)
        city_perm = np.arange(self.n_city) if city_perm is None else np.asarray(city_perm)
        perm = {UnitKind.MESH: grid_perm, UnitKind.CITY: city_perm}
        edges = {}
        for name, el in self.edges.items():
            sk, tk = EDGE_TYPES[name]
            edges[name] = EdgeList(perm[sk][el.src], perm[tk][el.dst], el.volume)
        inv = np.argsort(grid_perm)
        features = None
        if self.features is not None:
            features = replace(self.features, values=self.features.values[inv])
        coords = None if self.grid_coords is None else self.grid_coords[inv]
        cog = None if self.city_of_grid is None else city_perm[self.city_of_grid[inv]]
        return HeteroGraph(dict(self.node_counts), edges, features, coords, cog)


@dataclass(frozen=True)
class EdgeSplit:
    train: dict[FlowType, list[FlowRecord]]
    val: dict[FlowType, list[FlowRecord]]
    test: dict[FlowType, list[FlowRecord]]
    seed: int = 0

    def subset(self, name: str) -> dict[FlowType, list[FlowRecord]]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown subset {name!r}")
        return getattr(self, name)

    def records(self, name: str) -> list[FlowRecord]:
        return [r for ft in FlowType for r in self.subset(name).get(ft, [])]

    def all_records(self) -> list[FlowRecord]:
        return self.records("train") + self.records("val") + self.records("test")


# ---------------------------------------------------------------------------
# CSV input


def _read_rows(path: str | Path, required: Sequence[str] | None = None) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file (header row required)") from None
        rows = [row for row in reader if row]
    if required is not None and header[: len(required)] != list(required):
        raise DataError(f"{path}: header must start with {','.join(required)}, got {','.join(header)}")
    return header, rows


def _parse_float(s: str, path, row: int, col: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise DataError(f"{path}: row {row}, column {col!r}: non-numeric value {s!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{path}: row {row}, column {col!r}: non-finite value {s!r}")
    return v


def _parse_id(s: str, path, row: int, col: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise DataError(f"{path}: row {row}, column {col!r}: invalid id {s!r}") from None
    if v < 0:
        raise DataError(f"{path}: row {row}, column {col!r}: negative id {v}")
    return v


def load_grid_indicators(path: str | Path) -> IndicatorTable:
    header, rows = _read_rows(path)
    if not header or header[0] != "grid_id":
        raise DataError(f"{path}: first column must be grid_id")
    names = tuple(header[1:])
    by_id: dict[int, list[float]] = {}
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r}: expected {len(header)} columns, got {len(row)}")
        gid = _parse_id(row[0], path, r, "grid_id")
        if gid in by_id:
            raise DataError(f"{path}: row {r}: duplicate grid id {gid}")
        vals = [_parse_float(s, path, r, names[j]) for j, s in enumerate(row[1:])]
        for j, v in enumerate(vals):
            if v < 0:
                raise DataError(f"{path}: row {r}, column {names[j]!r}: negative value {v}")
        by_id[gid] = vals
    n = len(by_id)
    if sorted(by_id) != list(range(n)):
        raise DataError(f"{path}: grid ids must be the dense range 0..{n - 1}")
    values = np.array([by_id[i] for i in range(n)], dtype=np.float64).reshape(n, len(names))
    return IndicatorTable(names, values)


def load_inclusion(path: str | Path) -> InclusionMap:
    _, rows = _read_rows(path, ["city_id", "grid_id"])
    pairs = []
    for r, row in enumerate(rows, start=2):
        pairs.append((city(_parse_id(row[0], path, r, "city_id")), mesh(_parse_id(row[1], path, r, "grid_id"))))
    return InclusionMap(tuple(pairs))


def _parse_kind(s: str, path, row: int, col: str) -> UnitKind:
    try:
        return UnitKind(s.strip().lower())
    except ValueError:
        raise DataError(f"{path}: row {row}, column {col!r}: unknown kind {s!r} (mesh|city)") from None


def load_flows(path: str | Path) -> list[FlowRecord]:
    _, rows = _read_rows(path, ["origin_id", "origin_kind", "dest_id", "dest_kind", "volume"])
    out = []
    seen = set()
    for r, row in enumerate(rows, start=2):
        o = UrbanUnitId(_parse_kind(row[1], path, r, "origin_kind"), _parse_id(row[0], path, r, "origin_id"))
        d = UrbanUnitId(_parse_kind(row[3], path, r, "dest_kind"), _parse_id(row[2], path, r, "dest_id"))
        v = _parse_float(row[4], path, r, "volume")
        if v < 0:
            raise DataError(f"{path}: row {r}: negative volume {v}")
        rec = FlowRecord(o, d, v)
        if rec.key in seen:
            raise DataError(f"{path}: row {r}: duplicate flow {o} -> {d}")
        seen.add(rec.key)
        out.append(rec)
    return out


def load_coords(path: str | Path, n_grids: int | None = None) -> np.ndarray:
    _, rows = _read_rows(path, ["grid_id", "x", "y"])
    by_id = {}
    for r, row in enumerate(rows, start=2):
        gid = _parse_id(row[0], path, r, "grid_id")
        if gid in by_id:
            raise DataError(f"{path}: row {r}: duplicate grid id {gid}")
        by_id[gid] = (_parse_float(row[1], path, r, "x"), _parse_float(row[2], path, r, "y"))
    n = len(by_id) if n_grids is None else n_grids
    if sorted(by_id) != list(range(n)):
        raise DataError(f"{path}: coordinates must cover grid ids 0..{n - 1}")
    return np.array([by_id[i] for i in range(n)], dtype=np.float64).reshape(n, 2)


# ---------------------------------------------------------------------------
# CSV output (same schemas as the loaders)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_indicators(path: str | Path, table: IndicatorTable) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid_id", *table.feature_names])
        for i, row in enumerate(table.values):
            w.writerow([i, *(_fmt(v) for v in row)])


def write_inclusion(path: str | Path, inclusion: InclusionMap) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["city_id", "grid_id"])
        for c, g in inclusion.pairs:
            w.writerow([c.index, g.index])


def write_flows(path: str | Path, records: Iterable[FlowRecord], subset: Sequence[str] | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["origin_id", "origin_kind", "dest_id", "dest_kind", "volume"]
        w.writerow(header + (["subset"] if subset is not None else []))
        for i, rec in enumerate(records):
            row = [rec.origin.index, rec.origin.kind.value, rec.destination.index, rec.destination.kind.value, _fmt(rec.volume)]
            w.writerow(row + ([subset[i]] if subset is not None else []))


def write_coords(path: str | Path, coords: np.ndarray) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid_id", "x", "y"])
        for i, (x, y) in enumerate(coords):
            w.writerow([i, _fmt(x), _fmt(y)])


def write_split(path: str | Path, split: EdgeSplit) -> None:
    records, labels = [], []
    for name in ("train", "val", "test"):
        recs = split.records(name)
        records += recs
        labels += [name] * len(recs)
    write_flows(path, records, labels)


def load_split(path: str | Path, seed: int = 0) -> EdgeSplit:
    _, rows = _read_rows(path, ["origin_id", "origin_kind", "dest_id", "dest_kind", "volume", "subset"])
    parts: dict[str, dict[FlowType, list[FlowRecord]]] = {n: {ft: [] for ft in FlowType} for n in ("train", "val", "test")}
    for r, row in enumerate(rows, start=2):
        o = UrbanUnitId(_parse_kind(row[1], path, r, "origin_kind"), _parse_id(row[0], path, r, "origin_id"))
        d = UrbanUnitId(_parse_kind(row[3], path, r, "dest_kind"), _parse_id(row[2], path, r, "dest_id"))
        rec = FlowRecord(o, d, _parse_float(row[4], path, r, "volume"))
        if row[5] not in parts:
            raise DataError(f"{path}: row {r}: unknown subset {row[5]!r}")
        parts[row[5]][rec.flow_type].append(rec)
    return EdgeSplit(parts["train"], parts["val"], parts["test"], seed)


# ---------------------------------------------------------------------------
# operations


def standardize_features(
    table: IndicatorTable,
    means: np.ndarray | None = None,
    stdevs: np.ndarray | None = None,
    rows: np.ndarray | None = None,
) -> IndicatorTable:
    """Column z-scores (population stdev).  Constant columns map to 0.

    Statistics come from ``rows`` (default: every grid) unless ``means`` and
    ``stdevs`` are given.  An already standardized table is returned as is.
    """
    if table.standardized:
        return table
    x = table.values
    if means is None or stdevs is None:
        ref = x if rows is None else x[rows]
        means = ref.mean(axis=0)
        stdevs = ref.std(axis=0)
    means = np.asarray(means, dtype=np.float64)
    stdevs = np.asarray(stdevs, dtype=np.float64)
    safe = np.where(stdevs > 0, stdevs, 1.0)
    z = np.where(stdevs > 0, (x - means) / safe, 0.0)
    return IndicatorTable(table.feature_names, z, means.copy(), stdevs.copy())


def _geo_edges(coords: np.ndarray) -> EdgeList:
    n = len(coords)
    if n < 2:
        return EdgeList(np.zeros(0, np.int64), np.zeros(0, np.int64))
    tree = cKDTree(coords)
    d, _ = tree.query(coords, k=2)
    spacing = float(np.min(d[:, 1][d[:, 1] > 0])) if np.any(d[:, 1] > 0) else 0.0
    radius = spacing * math.sqrt(2.0) * (1.0 + 1e-6)
    src, dst = [], []
    for i, nbrs in enumerate(tree.query_ball_point(coords, radius)):
        nbrs = [j for j in nbrs if j != i]
        nbrs.sort(key=lambda j: (float(np.hypot(*(coords[j] - coords[i]))), j))
        for j in nbrs[:8]:
            src.append(i)
            dst.append(j)
    return EdgeList(np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64))


def build_graph(
    indicators: IndicatorTable,
    inclusion: InclusionMap,
    flows: Sequence[FlowRecord],
    options: GraphOptions = GraphOptions(),
    coords: np.ndarray | None = None,
) -> HeteroGraph:
    n_m = indicators.grid_count
    n_c = 1 + max((c.index for c, _ in inclusion.pairs), default=-1)
    counts = {UnitKind.MESH: n_m, UnitKind.CITY: n_c}

    owner = np.full(n_m, -1, dtype=np.int64)
    for c, g in inclusion.pairs:
        if c.kind is not UnitKind.CITY or g.kind is not UnitKind.MESH:
            raise DataError(f"inclusion pair ({c}, {g}) must be (city, mesh)")
        if not 0 <= g.index < n_m:
            raise DataError(f"inclusion references unknown grid {g.index}")
        if owner[g.index] >= 0:
            raise DataError(f"inclusion is not a partition: grid {g.index} appears more than once")
        owner[g.index] = c.index
    if np.any(owner < 0):
        raise DataError(f"inclusion is not a partition: grid {int(np.argmin(owner))} has no city")
    empty = sorted(set(range(n_c)) - set(owner.tolist()))
    if empty:
        raise DataError(f"inclusion is not a partition: city {empty[0]} owns no grid")

    edges: dict[str, EdgeList] = {}
    if options.flows:
        buckets: dict[FlowType, list[FlowRecord]] = {ft: [] for ft in FlowType}
        for rec in flows:
            for unit in (rec.origin, rec.destination):
                if not 0 <= unit.index < counts[unit.kind]:
                    raise DataError(f"flow references unknown unit {unit}")
            if rec.volume < 0:
                raise DataError(f"negative volume on {rec.origin} -> {rec.destination}")
            buckets[rec.flow_type].append(rec)
        for ft in FlowType:
            recs = buckets[ft]
            edges[ft.value] = EdgeList(
                np.array([r.origin.index for r in recs], dtype=np.int64),
                np.array([r.destination.index for r in recs], dtype=np.int64),
                np.array([r.volume for r in recs], dtype=np.float64),
            )
    if options.inclusion:
        cities = np.array([c.index for c, _ in inclusion.pairs], dtype=np.int64)
        grids = np.array([g.index for _, g in inclusion.pairs], dtype=np.int64)
        edges["includes"] = EdgeList(cities, grids)
        edges["in"] = EdgeList(grids.copy(), cities.copy())
    if options.geo:
        if coords is None:
            raise DataError("geo edges need grid coordinates")
        edges["geo"] = _geo_edges(np.asarray(coords, dtype=np.float64))

    return HeteroGraph(counts, edges, indicators, None if coords is None else np.asarray(coords, np.float64), owner)


def split_edges(
    flows: Sequence[FlowRecord], ratios: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> EdgeSplit:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    parts: list[dict[FlowType, list[FlowRecord]]] = [{}, {}, {}]
    children = np.random.SeedSequence(seed).spawn(len(FlowType))
    for ft, ss in zip(FlowType, children):
        recs = [r for r in flows if r.flow_type is ft]
        n = len(recs)
        order = np.random.default_rng(ss).permutation(n)
        n_train = int(round(n * ratios[0]))
        n_val = min(int(round(n * ratios[1])), n - n_train)
        bounds = (0, n_train, n_train + n_val, n)
        for k in range(3):
            parts[k][ft] = [recs[i] for i in sorted(order[bounds[k]: bounds[k + 1]])]
    return EdgeSplit(parts[0], parts[1], parts[2], seed)


def training_graph(
    indicators: IndicatorTable,
    inclusion: InclusionMap,
    split: EdgeSplit,
    options: GraphOptions = GraphOptions(),
    coords: np.ndarray | None = None,
) -> HeteroGraph:
    """Message-passing graph whose flow edges come from the training split only."""
    return build_graph(indicators, inclusion, split.records("train"), options, coords)


def leaked_records(graph: HeteroGraph, records: Iterable[FlowRecord]) -> list[FlowRecord]:
    """Records that also appear as message-passing flow edges of ``graph``."""
    edge_sets = {ft: graph.edges[ft.value].pairs() for ft in FlowType if ft.value in graph.edges}
    return [
        r for r in records
        if (r.origin.index, r.destination.index) in edge_sets.get(r.flow_type, ())
    ]
