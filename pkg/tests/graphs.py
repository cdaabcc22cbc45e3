"""Small random hierarchical graphs for tests."""
from __future__ import annotations

import numpy as np

from hiurnet.urban_graph import (
    DEFAULT_FEATURE_NAMES,
    FlowRecord,
    IndicatorTable,
    InclusionMap,
    build_graph,
    city,
    mesh,
    standardize_features,
)


def random_parts(rng: np.random.Generator, n_mesh: int = 8, n_city: int = 2, n_m2m: int = 10, n_m2c: int = 4, n_c2m: int = 4):
    """Standardized table, inclusion map and flow records with distinct pairs."""
    owner = np.concatenate([np.arange(n_city), rng.integers(0, n_city, n_mesh - n_city)])
    rng.shuffle(owner)
    raw = rng.gamma(2.0, 1.0, size=(n_mesh, len(DEFAULT_FEATURE_NAMES)))
    table = standardize_features(IndicatorTable(DEFAULT_FEATURE_NAMES, raw))
    inclusion = InclusionMap.from_assignment(owner.tolist())

    def pick(n_src, n_dst, k, allow_self):
        pairs = [(a, b) for a in range(n_src) for b in range(n_dst) if allow_self or a != b]
        idx = rng.choice(len(pairs), size=min(k, len(pairs)), replace=False)
        return [pairs[i] for i in sorted(idx)]

    records = [FlowRecord(mesh(a), mesh(b), float(rng.gamma(2.0, 5.0))) for a, b in pick(n_mesh, n_mesh, n_m2m, False)]
    records += [FlowRecord(mesh(a), city(b), float(rng.gamma(2.0, 5.0))) for a, b in pick(n_mesh, n_city, n_m2c, True)]
    records += [FlowRecord(city(a), mesh(b), float(rng.gamma(2.0, 5.0))) for a, b in pick(n_city, n_mesh, n_c2m, True)]
    return table, inclusion, records


def random_graph(rng: np.random.Generator, **kw):
    table, inclusion, records = random_parts(rng, **kw)
    return build_graph(table, inclusion, records), records
