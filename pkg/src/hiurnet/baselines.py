"""Learned generalized gravity model: T = f_i(P_origin) * f_j(P_dest) * f_d(distance).

Each f is a 1 -> 16 -> 1 perceptron with a softplus output, so predictions are
strictly positive.  One set of functions is fitted per flow task.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .metrics import MetricsReport, report, rmse
from .model import load_checkpoint, save_checkpoint
from .training import Adam, TrainConfig, TrainingDiverged, focal_l2
from .urban_graph import (
    POPULATION_COLUMN,
    TASK_ORDER,
    DataError,
    FlowRecord,
    FlowType,
    IndicatorTable,
    InclusionMap,
    UnitKind,
)

HIDDEN = 16
NETS = ("origin", "dest", "distance")

# The gravity nets are tiny; a larger step and longer budget than the GNN
# defaults is needed to converge in comparable wall time.
GRAVITY_TRAIN_DEFAULTS = TrainConfig(learning_rate=1e-2, max_epochs=2000, patience=100)


@dataclass
class GravityParams:
    nets: dict[str, dict[str, Tensor]]
    pop_scale: float = 1.0
    dist_scale: float = 1.0
    tie_weights: bool = False

    def net(self, which: str) -> dict[str, Tensor]:
        if self.tie_weights and which == "dest":
            which = "origin"
        return self.nets[which]

    def parameters(self) -> list[Tensor]:
        return [t for name in sorted(self.nets) for _, t in sorted(self.nets[name].items())]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {f"{n}/{k}": t.data for n in sorted(self.nets) for k, t in sorted(self.nets[n].items())}


def _mlp(x: Tensor, net: dict[str, Tensor]) -> Tensor:
    hidden = ad.relu(ad.linear(x, net["w1"], net["b1"]))
    return ad.softplus(ad.linear(hidden, net["w2"], net["b2"]))


def init_gravity(seed: int = 0, tie_weights: bool = False, output_bias: float = 0.0) -> GravityParams:
    rng = np.random.default_rng(seed)
    nets = {}
    for name in NETS:
        if tie_weights and name == "dest":
            continue
        b1 = math.sqrt(6.0 / (1 + HIDDEN))
        nets[name] = {
            "w1": Tensor(rng.uniform(-b1, b1, (1, HIDDEN)), requires_grad=True),
            "b1": Tensor(rng.uniform(0.0, 1.0, HIDDEN), requires_grad=True),
            "w2": Tensor(rng.uniform(-b1, b1, (HIDDEN, 1)), requires_grad=True),
            "b2": Tensor(np.full(1, output_bias), requires_grad=True),
        }
    return GravityParams(nets, tie_weights=tie_weights)


def _forward(params: GravityParams, pop_o: np.ndarray, pop_d: np.ndarray, dist: np.ndarray) -> Tensor:
    n = len(pop_o)
    fi = _mlp(Tensor(np.reshape(pop_o, (n, 1)) / params.pop_scale), params.net("origin"))
    fj = _mlp(Tensor(np.reshape(pop_d, (n, 1)) / params.pop_scale), params.net("dest"))
    fd = _mlp(Tensor(np.reshape(dist, (n, 1)) / params.dist_scale), params.net("distance"))
    return ad.reshape(ad.mul(ad.mul(fi, fj), fd), (n,))


def gravity_predict(params: GravityParams, pop_origin, pop_dest, distance):
    """Predicted volume(s); scalars in, float out, arrays in, array out."""
    scalar = np.ndim(pop_origin) == 0
    po, pd_, d = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (pop_origin, pop_dest, distance))
    if (po < 0).any() or (pd_ < 0).any() or (d < 0).any():
        raise ValueError("populations and distances must be non-negative")
    out = _forward(params, po, pd_, d).data
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# inputs


def unit_populations(table: IndicatorTable, inclusion: InclusionMap) -> dict[UnitKind, np.ndarray]:
    """Grid population column (raw, not standardized) and per-city sums."""
    if table.standardized:
        raise DataError("gravity inputs need the raw (unstandardized) indicator table")
    grid_pop = table.column(POPULATION_COLUMN)
    owner = inclusion.city_of_grid(table.grid_count)
    city_pop = np.bincount(owner, weights=grid_pop, minlength=owner.max() + 1)
    return {UnitKind.MESH: grid_pop.copy(), UnitKind.CITY: city_pop}


def unit_centroids(coords: np.ndarray, inclusion: InclusionMap) -> dict[UnitKind, np.ndarray]:
    """Grid centroids and per-city mean of member-grid centroids."""
    coords = np.asarray(coords, dtype=np.float64)
    owner = inclusion.city_of_grid(len(coords))
    n_c = owner.max() + 1
    counts = np.bincount(owner, minlength=n_c)
    cx = np.bincount(owner, weights=coords[:, 0], minlength=n_c) / counts
    cy = np.bincount(owner, weights=coords[:, 1], minlength=n_c) / counts
    return {UnitKind.MESH: coords, UnitKind.CITY: np.column_stack([cx, cy])}


def _inputs(records: Sequence[FlowRecord], populations, centroids):
    po = np.array([populations[r.origin.kind][r.origin.index] for r in records], dtype=np.float64)
    pd_ = np.array([populations[r.destination.kind][r.destination.index] for r in records], dtype=np.float64)
    a = np.array([centroids[r.origin.kind][r.origin.index] for r in records], dtype=np.float64).reshape(-1, 2)
    b = np.array([centroids[r.destination.kind][r.destination.index] for r in records], dtype=np.float64).reshape(-1, 2)
    y = np.array([r.volume for r in records], dtype=np.float64)
    return po, pd_, np.linalg.norm(a - b, axis=1), y


# ---------------------------------------------------------------------------
# training


def _fit_task(records, val_records, populations, centroids, config: TrainConfig, seed: int, tie_weights: bool):
    po, pd_, d, y = _inputs(records, populations, centroids)
    # start the product near the mean target so Adam does not spend its budget on scale
    per_net = max(float(np.mean(y)), 1e-6) ** (1.0 / 3.0)
    params = init_gravity(seed, tie_weights, output_bias=float(np.log(np.expm1(per_net))))
    params.pop_scale = float(max(np.mean(np.concatenate([po, pd_])), 1e-12))
    params.dist_scale = float(max(np.mean(d), 1e-12))
    val = _inputs(val_records, populations, centroids) if val_records else None

    opt = Adam(params.parameters(), config.learning_rate, config.adam_betas, config.adam_eps)
    best, best_epoch, best_arrays = math.inf, 0, None
    losses = []
    for epoch in range(1, config.max_epochs + 1):
        for p in params.parameters():
            p.grad = None
        try:
            with Tape() as tape:
                loss = focal_l2(_forward(params, po, pd_, d), y, config.beta, config.gamma)
                tape.backward(loss)
            opt.step()
        except NonFiniteError as exc:
            raise TrainingDiverged(epoch, str(exc)) from exc
        losses.append(float(loss.data))
        score = rmse(_forward(params, *val[:3]).data, val[3]) if val else losses[-1]
        if score < best:
            best, best_epoch = score, epoch
            best_arrays = [p.data.copy() for p in params.parameters()]
        elif epoch - best_epoch >= config.patience:
            break
    for p, arr in zip(params.parameters(), best_arrays):
        p.data = arr
    return params, losses


def train_gravity(
    records: Sequence[FlowRecord],
    populations: dict[UnitKind, np.ndarray],
    centroids: dict[UnitKind, np.ndarray],
    config: TrainConfig = GRAVITY_TRAIN_DEFAULTS,
    val_records: Sequence[FlowRecord] | None = None,
    tie_weights: bool = False,
) -> dict[FlowType, GravityParams]:
    """Fit one gravity model per flow task present in ``records``."""
    if populations is None or UnitKind.MESH not in populations:
        raise DataError("missing population column")
    model = {}
    for k, task in enumerate(TASK_ORDER):
        recs = [r for r in records if r.flow_type is task]
        if not recs:
            continue
        val = [r for r in (val_records or []) if r.flow_type is task]
        model[task], _ = _fit_task(recs, val, populations, centroids, config, config.seed + k, tie_weights)
    return model


def training_losses(records, populations, centroids, config: TrainConfig, seed: int = 0) -> list[float]:
    """Per-epoch training loss of a single-task fit (no early stopping)."""
    cfg = replace(config, patience=config.max_epochs + 1)
    return _fit_task(records, None, populations, centroids, cfg, seed, False)[1]


def predict_gravity(model: dict[FlowType, GravityParams], records, populations, centroids) -> dict[FlowType, tuple[np.ndarray, np.ndarray]]:
    out = {}
    for task in TASK_ORDER:
        recs = [r for r in records if r.flow_type is task]
        if not recs or task not in model:
            continue
        po, pd_, d, y = _inputs(recs, populations, centroids)
        out[task] = (_forward(model[task], po, pd_, d).data, y)
    return out


def evaluate_gravity(model, records, populations, centroids) -> dict[FlowType, MetricsReport]:
    return {t: report(p, y) for t, (p, y) in predict_gravity(model, records, populations, centroids).items()}


def save_gravity(path: str | Path, model: dict[FlowType, GravityParams], extra: dict | None = None) -> None:
    arrays, meta = {}, {}
    for task, params in model.items():
        for k, v in params.named_arrays().items():
            arrays[f"gravity/{task.value}/{k}"] = v
        meta[task.value] = {
            "pop_scale": params.pop_scale,
            "dist_scale": params.dist_scale,
            "tie_weights": params.tie_weights,
        }
    manifest = {"gravity": meta}
    if extra:
        manifest.update(extra)
    save_checkpoint(path, manifest, arrays)


def load_gravity(path: str | Path) -> dict[FlowType, GravityParams]:
    manifest, arrays = load_checkpoint(path)
    if "gravity" not in manifest:
        raise ValueError(f"{path}: no gravity section")
    model = {}
    for task_name, meta in manifest["gravity"].items():
        nets: dict[str, dict[str, Tensor]] = {}
        prefix = f"gravity/{task_name}/"
        for key, arr in arrays.items():
            if key.startswith(prefix):
                net, name = key[len(prefix):].split("/")
                nets.setdefault(net, {})[name] = Tensor(arr, requires_grad=True)
        model[FlowType(task_name)] = GravityParams(nets, meta["pop_scale"], meta["dist_scale"], meta["tie_weights"])
    return model
