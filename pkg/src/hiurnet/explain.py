"""Integrated-gradients attribution and the per-city regional summary.

Inputs to the attributed function are every grid's standardized indicator row
and a multiplicative mask on every message-passing edge.  The baseline is the
all-zero point for both: the average grid with no edges carrying messages.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .model import ModelParams, decode_indices, encode
from .urban_graph import (
    FEATURE_CATEGORIES,
    DataError,
    EdgeSplit,
    FlowRecord,
    FlowType,
    HeteroGraph,
    UnitKind,
    UrbanUnitId,
    feature_category,
)

INTER_LEVEL = (FlowType.M2C, FlowType.C2M)


class Baseline(str, Enum):
    ZERO_FEATURES = "zero_features"


@dataclass(frozen=True)
class AttributionRequest:
    target_city: UrbanUnitId
    k: int = 10
    steps: int = 128
    baseline: Baseline = Baseline.ZERO_FEATURES

    def __post_init__(self):
        if self.target_city.kind is not UnitKind.CITY:
            raise ValueError(f"target must be a city, got {self.target_city}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.steps < 2:
            raise ValueError("steps must be >= 2")
        object.__setattr__(self, "baseline", Baseline(self.baseline))


def select_target_edges(graph: HeteroGraph, split: EdgeSplit | Sequence[FlowRecord], city: UrbanUnitId, k: int) -> list[FlowRecord]:
    """The ``k`` largest inter-level records with ``city`` as an endpoint.

    Ties go by volume descending, then origin index, then destination index.
    """
    if city.kind is not UnitKind.CITY:
        raise ValueError(f"{city} is not a city")
    if not 0 <= city.index < graph.n_city:
        raise DataError(f"{city} is not in the graph ({graph.n_city} cities)")
    if k < 1:
        raise ValueError("k must be >= 1")
    records = split.all_records() if isinstance(split, EdgeSplit) else list(split)
    touching = [r for r in records if r.flow_type in INTER_LEVEL and city in (r.origin, r.destination)]
    if not touching:
        raise DataError(f"{city} has no inter-level flow records")
    touching.sort(key=lambda r: (-r.volume, r.origin.index, r.destination.index))
    return touching[:k]


# ---------------------------------------------------------------------------
# integrated gradients


def path_integrated_gradients(
    fn: Callable[[dict[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    baselines: Mapping[str, np.ndarray] | None = None,
    steps: int = 128,
) -> dict[str, np.ndarray]:
    """Right-endpoint Riemann approximation of integrated gradients.

    ``fn`` maps named input tensors to a scalar.  Returns, per input,
    ``(x - x') * mean_s dF/dx`` at ``x' + (s/steps)(x - x')``, s = 1..steps.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    xs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    bs = {k: np.zeros_like(v) for k, v in xs.items()}
    if baselines is not None:
        for k, v in baselines.items():
            bs[k] = np.broadcast_to(np.asarray(v, dtype=np.float64), xs[k].shape).copy()
    total = {k: np.zeros_like(v) for k, v in xs.items()}
    for s in range(1, steps + 1):
        alpha = s / steps
        point = {k: Tensor(bs[k] + alpha * (xs[k] - bs[k]), requires_grad=True) for k in xs}
        with Tape() as tape:
            out = fn(point)
            if out.data.size != 1:
                raise ValueError("attributed function must return a scalar")
            if out._tape is tape:
                tape.backward(ad.reshape(out, ()))
        for k, t in point.items():
            if t.grad is None:
                continue
            if not np.isfinite(t.grad).all():
                raise NonFiniteError(f"non-finite gradient for input {k!r} at step {s}")
            total[k] += t.grad
    return {k: (xs[k] - bs[k]) * total[k] / steps for k in xs}


@contextmanager
def _frozen(params: ModelParams):
    flags = {k: t.requires_grad for k, t in params.tensors.items()}
    try:
        for t in params.tensors.values():
            t.requires_grad = False
        yield params
    finally:
        for k, t in params.tensors.items():
            t.requires_grad = flags[k]


def _edge_types(params: ModelParams, graph: HeteroGraph) -> list[str]:
    return [et for et in params.config.edge_types if et in graph.edges and len(graph.edges[et])]


def _edge_fn(params: ModelParams, graph: HeteroGraph, record: FlowRecord):
    task = record.flow_type
    o = np.array([record.origin.index])
    d = np.array([record.destination.index])
    ets = _edge_types(params, graph)

    def fn(x: dict[str, Tensor]) -> Tensor:
        masks = {et: x[f"mask/{et}"] for et in ets}
        emb = encode(graph, params, x["features"], masks)
        return ad.reshape(decode_indices(emb, o, d, task, params), ())

    return fn


@dataclass
class EdgeAttribution:
    """Integrated gradients for one target flow."""

    record: FlowRecord
    features: np.ndarray  # (n_grids, n_features)
    edges: dict[str, np.ndarray]  # edge type -> per-edge attribution
    prediction: float
    baseline_prediction: float

    @property
    def total(self) -> float:
        return math.fsum(self.features.ravel()) + math.fsum(math.fsum(v) for v in self.edges.values())

    @property
    def completeness_gap(self) -> float:
        """|sum of attributions - (F(x) - F(x'))|."""
        return abs(self.total - (self.prediction - self.baseline_prediction))

    @property
    def relative_gap(self) -> float:
        delta = abs(self.prediction - self.baseline_prediction)
        return self.completeness_gap / delta if delta > 0 else (0.0 if self.completeness_gap == 0 else math.inf)


def integrated_gradients(
    params: ModelParams,
    graph: HeteroGraph,
    target_edge: FlowRecord,
    steps: int = 128,
    baseline: Baseline = Baseline.ZERO_FEATURES,
) -> EdgeAttribution:
    if Baseline(baseline) is not Baseline.ZERO_FEATURES:
        raise ValueError(f"unsupported baseline {baseline!r}")
    if not graph.features.standardized:
        raise DataError("attribution needs standardized features (the zero baseline is the mean grid)")
    ets = _edge_types(params, graph)
    inputs = {"features": graph.features.values}
    inputs.update({f"mask/{et}": np.ones(len(graph.edges[et])) for et in ets})
    with _frozen(params):
        fn = _edge_fn(params, graph, target_edge)
        attr = path_integrated_gradients(fn, inputs, None, steps)
        f_x = float(fn({k: Tensor(v) for k, v in inputs.items()}).data)
        f_b = float(fn({k: Tensor(np.zeros_like(v)) for k, v in inputs.items()}).data)
    return EdgeAttribution(
        target_edge,
        attr["features"],
        {et: attr[f"mask/{et}"] for et in ets},
        f_x,
        f_b,
    )


# ---------------------------------------------------------------------------
# regional summary


@dataclass
class AttributionReport:
    target_city: UrbanUnitId
    target_edges: list[FlowRecord]
    feature_names: tuple[str, ...]
    node_feature_attributions: dict[int, np.ndarray]
    edge_attributions: dict[tuple[str, int, int], float]
    completeness_gap: list[float]
    relative_gap: list[float]
    category_rollup: dict[str, float]
    grid_ranking: list[tuple[int, float]] = field(default_factory=list)  # (grid, share), included grids only

    @property
    def normalized_rollup(self) -> dict[str, float]:
        """Category rollup scaled so the largest category is 1."""
        top = max(self.category_rollup.values(), default=0.0)
        return {c: (v / top if top > 0 else 0.0) for c, v in self.category_rollup.items()}

    def grid_categories(self, grid: int) -> dict[str, float]:
        vec = self.node_feature_attributions[grid]
        out = {c: 0.0 for c in FEATURE_CATEGORIES}
        for name, v in zip(self.feature_names, vec):
            out[feature_category(name)] += float(v)
        return out

    def csv_rows(self) -> list[tuple[int, str, float]]:
        return [(g, c, v) for g, _ in self.grid_ranking for c, v in self.grid_categories(g).items()]

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["grid_id", "category", "attribution"])
            for g, c, v in self.csv_rows():
                w.writerow([g, c, repr(v)])

    def as_dict(self) -> dict:
        return {
            "target_city": self.target_city.index,
            "target_edges": [
                {
                    "flow_type": r.flow_type.value,
                    "origin": str(r.origin),
                    "destination": str(r.destination),
                    "volume": r.volume,
                    "completeness_gap": gap,
                    "relative_gap": rel,
                }
                for r, gap, rel in zip(self.target_edges, self.completeness_gap, self.relative_gap)
            ],
            "category_rollup": dict(self.category_rollup),
            "normalized_rollup": self.normalized_rollup,
            "grid_ranking": [{"grid": g, "share": s} for g, s in self.grid_ranking],
        }

    def format_text(self) -> str:
        lines = [f"[report]", f"city = {self.target_city.index}", f"target_edges = {len(self.target_edges)}", ""]
        for i, e in enumerate(self.as_dict()["target_edges"]):
            lines += [
                f"[edge.{i}]",
                f"flow_type = {e['flow_type']}",
                f"origin = {e['origin']}",
                f"destination = {e['destination']}",
                f"volume = {e['volume']!r}",
                f"completeness_gap = {e['completeness_gap']!r}",
                f"relative_gap = {e['relative_gap']!r}",
                "",
            ]
        lines.append("[category_rollup]")
        lines += [f"{c} = {v!r}" for c, v in self.category_rollup.items()]
        lines += ["", "[normalized_rollup]"]
        lines += [f"{c} = {v!r}" for c, v in self.normalized_rollup.items()]
        lines += ["", "[grid_ranking]"]
        lines += [f"grid_{g} = {s!r}" for g, s in self.grid_ranking]
        return "\n".join(lines) + "\n"


def _run_ig(args):
    params, graph, record, steps, baseline = args
    return integrated_gradients(params, graph, record, steps, baseline)


def regional_summary(
    params: ModelParams,
    graph: HeteroGraph,
    request: AttributionRequest,
    records: EdgeSplit | Sequence[FlowRecord],
    workers: int = 1,
) -> AttributionReport:
    """Attribute the city's largest inter-level flows back to grids and edges.

    Scores are summed absolute attributions over the target edges.  Each edge
    is an independent run, so ``workers > 1`` fans them out to processes; the
    result does not depend on the worker count.
    """
    targets = select_target_edges(graph, records, request.target_city, request.k)
    jobs = [(params, graph, r, request.steps, request.baseline) for r in targets]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_ig, jobs))
    else:
        results = [_run_ig(j) for j in jobs]

    names = tuple(graph.features.feature_names)
    per_grid = np.zeros_like(graph.features.values)
    per_edge: dict[str, np.ndarray] = {}
    for res in results:
        per_grid += np.abs(res.features)
        for et, v in res.edges.items():
            per_edge[et] = per_edge.get(et, 0.0) + np.abs(v)

    node_attr = {g: per_grid[g].copy() for g in range(graph.n_mesh)}
    edge_attr = {}
    for et, v in per_edge.items():
        el = graph.edges[et]
        for s, d, a in zip(el.src.tolist(), el.dst.tolist(), v.tolist()):
            edge_attr[(et, s, d)] = a

    cats = np.array([feature_category(n) for n in names])
    rollup = {c: math.fsum(per_grid[:, cats == c].ravel()) for c in FEATURE_CATEGORIES}

    inc = graph.edges.get("includes")
    members = sorted(set(inc.dst[inc.src == request.target_city.index].tolist())) if inc is not None else []
    mass = {g: math.fsum(per_grid[g]) for g in members}
    total = math.fsum(mass.values())
    if total > 0:
        shares = {g: m / total for g, m in mass.items()}
    else:
        shares = {g: 1.0 / len(members) for g in members}
    ranking = sorted(shares.items(), key=lambda gs: (-gs[1], gs[0]))

    return AttributionReport(
        request.target_city,
        targets,
        names,
        node_attr,
        edge_attr,
        [r.completeness_gap for r in results],
        [r.relative_gap for r in results],
        rollup,
        ranking,
    )
