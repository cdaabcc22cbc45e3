"""Multi-task training: focal L2 per task, weighted sum, full-batch Adam."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .metrics import MetricsReport, report, rmse
from .model import ModelConfig, ModelParams, decode_indices, encode, init_params
from .urban_graph import TASK_ORDER, DataError, EdgeSplit, FlowRecord, FlowType, HeteroGraph, leaked_records

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


class LeakageError(DataError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # weights in TASK_ORDER: (c2m, m2c, m2m)
    task_weights: tuple[float, float, float] = (0.1, 0.1, 0.8)
    beta: float = 0.2
    gamma: float = 1.0
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    log_targets: bool = False
    init_output_bias: bool = False

    def __post_init__(self):
        if len(self.task_weights) != 3 or any(w < 0 for w in self.task_weights):
            raise ValueError(f"task_weights must be three non-negative numbers, got {self.task_weights}")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        object.__setattr__(self, "task_weights", tuple(float(w) for w in self.task_weights))

    def weight(self, task: FlowType) -> float:
        return self.task_weights[TASK_ORDER.index(task)]


def _focal_terms(e: np.ndarray, beta: float, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-element loss and its derivative in e.  2*sigmoid(x) - 1 == tanh(x / 2)."""
    g = np.tanh(0.5 * beta * np.abs(e))
    gg = g**gamma
    terms = gg * e * e
    deriv = 2.0 * e * gg
    if gamma != 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            dg = 0.5 * beta * (1.0 - g * g) * np.sign(e)
            extra = np.where(g > 0, gamma * gg / np.where(g > 0, g, 1.0) * dg * e * e, 0.0)
        deriv = deriv + extra
    return terms, deriv


def focal_l2(predictions, targets, beta: float = 0.2, gamma: float = 1.0):
    """Mean of (2*sigmoid(|beta*e|) - 1)**gamma * e**2 with e = prediction - target.

    Returns a Tensor when ``predictions`` is a Tensor, else a float.
    """
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    p = predictions.data.reshape(-1) if isinstance(predictions, Tensor) else np.asarray(predictions, np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValueError("focal_l2 needs at least one pair")
    terms, deriv = _focal_terms(p - t, beta, gamma)
    value = terms.mean()
    if not isinstance(predictions, Tensor):
        return float(value)
    n = p.size
    shape = predictions.shape
    return ad.custom(np.asarray(value), [predictions], lambda g: ((g * deriv / n).reshape(shape),), "focal_l2")


def multitask_loss(task_losses: Sequence, weights: Sequence[float]):
    """Weighted sum of per-task losses."""
    if len(task_losses) != len(weights):
        raise ValueError("one weight per task loss required")
    if any(w < 0 for w in weights):
        raise ValueError(f"negative task weight in {tuple(weights)}")
    if not any(isinstance(l, Tensor) for l in task_losses):
        return float(sum(w * float(l) for w, l in zip(weights, task_losses)))
    total = None
    for w, l in zip(weights, task_losses):
        term = ad.scale(l if isinstance(l, Tensor) else Tensor(l), float(w))
        total = term if total is None else ad.add(total, term)
    return total


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def total_loss(self) -> list[float]:
        return [r["total_loss"] for r in self.rows]

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path: str | Path) -> None:
        cols = ["epoch"] + [f"loss_{t.value}" for t in TASK_ORDER] + ["total_loss"]
        cols += [f"val_rmse_{t.value}" for t in TASK_ORDER] + ["val_weighted_rmse"]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r["epoch"]] + [_csv_num(r.get(c)) for c in cols[1:]])


def _csv_num(v) -> str:
    return "" if v is None else repr(float(v))


def _task_arrays(records: Sequence[FlowRecord], task: FlowType):
    recs = [r for r in records if r.flow_type is task]
    o = np.array([r.origin.index for r in recs], dtype=np.int64)
    d = np.array([r.destination.index for r in recs], dtype=np.int64)
    y = np.array([r.volume for r in recs], dtype=np.float64)
    return o, d, y


def _weighted_rmse(per_task: dict[FlowType, float], weights: dict[FlowType, float]) -> float:
    tasks = [t for t in per_task if weights[t] > 0] or list(per_task)
    total_w = sum(weights[t] for t in tasks)
    if total_w == 0:
        return float(np.mean([per_task[t] for t in tasks]))
    return sum(weights[t] * per_task[t] for t in tasks) / total_w


def check_no_leakage(graph: HeteroGraph, split: EdgeSplit) -> None:
    leaked = leaked_records(graph, split.records("val") + split.records("test"))
    if leaked:
        r = leaked[0]
        raise LeakageError(
            f"{len(leaked)} held-out records are message-passing edges (first: {r.origin} -> {r.destination})"
        )


def train(
    graph: HeteroGraph,
    split: EdgeSplit,
    model_config: ModelConfig = ModelConfig(),
    train_config: TrainConfig = TrainConfig(),
    on_epoch: Callable[[dict], None] | None = None,
    params: ModelParams | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Full-batch training with early stopping on weighted validation RMSE.

    Returns the parameters of the best validation epoch.
    """
    check_no_leakage(graph, split)
    cfg = train_config
    fresh = params is None
    if fresh:
        params = init_params(model_config, graph.metadata(), cfg.seed)
    weights = {t: cfg.weight(t) for t in TASK_ORDER}
    train_sets = {t: _task_arrays(split.records("train"), t) for t in TASK_ORDER}
    val_sets = {t: _task_arrays(split.records("val"), t) for t in TASK_ORDER}
    train_sets = {t: a for t, a in train_sets.items() if len(a[2])}
    val_sets = {t: a for t, a in val_sets.items() if len(a[2])}
    if not train_sets:
        raise DataError("no training records")

    def fit_target(y):
        return np.log1p(y) if cfg.log_targets else y

    if cfg.init_output_bias and fresh:
        # start each softplus head at its task's mean target instead of softplus(0)
        for t, (_, _, y) in train_sets.items():
            m = max(float(np.mean(fit_target(y))), 1e-6)
            params[f"decoder.{t.value}.b2"].data = np.full(1, m + np.log(-np.expm1(-m)))

    opt = Adam(params.parameters(), cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
    history = TrainHistory()
    best_score = math.inf
    best_arrays = None

    for epoch in range(1, cfg.max_epochs + 1):
        params.zero_grad()
        row: dict = {"epoch": epoch}
        try:
            with Tape() as tape:
                emb = encode(graph, params)
                losses, ws = [], []
                for t in TASK_ORDER:
                    if t not in train_sets:
                        continue
                    o, d, y = train_sets[t]
                    loss = focal_l2(decode_indices(emb, o, d, t, params), fit_target(y), cfg.beta, cfg.gamma)
                    row[f"loss_{t.value}"] = float(loss.data)
                    losses.append(loss)
                    ws.append(weights[t])
                total = multitask_loss(losses, ws)
                row["total_loss"] = float(total.data)
                tape.backward(total)
            opt.step()
        except NonFiniteError as exc:
            raise TrainingDiverged(epoch, str(exc)) from exc
        if not all(np.isfinite(p.data).all() for p in params.parameters()):
            raise TrainingDiverged(epoch, "non-finite parameters after update")

        if val_sets:
            emb = encode(graph, params)
            per_task = {}
            for t, (o, d, y) in val_sets.items():
                pred = decode_indices(emb, o, d, t, params).data
                if cfg.log_targets:
                    pred = np.expm1(pred)
                per_task[t] = rmse(pred, y)
                row[f"val_rmse_{t.value}"] = per_task[t]
            score = _weighted_rmse(per_task, weights)
            row["val_weighted_rmse"] = score
        else:
            score = row["total_loss"]
        history.rows.append(row)
        if on_epoch is not None:
            on_epoch(row)

        if score < best_score:
            best_score = score
            history.best_epoch = epoch
            best_arrays = {k: v.copy() for k, v in params.named_arrays().items()}
        elif epoch - history.best_epoch >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
            break

    if best_arrays is not None:
        params.load_arrays(best_arrays)
    return params, history


def predict_records(
    params: ModelParams, graph: HeteroGraph, records: Sequence[FlowRecord], log_targets: bool = False
) -> dict[FlowType, tuple[np.ndarray, np.ndarray]]:
    """Per task: (predictions, truths) for the given records."""
    emb = encode(graph, params)
    out = {}
    for t in TASK_ORDER:
        o, d, y = _task_arrays(records, t)
        if not len(y):
            continue
        pred = decode_indices(emb, o, d, t, params).data
        if log_targets:
            pred = np.expm1(pred)
        out[t] = (pred, y)
    return out


def evaluate_model(
    params: ModelParams, graph: HeteroGraph, records: Sequence[FlowRecord], log_targets: bool = False
) -> dict[FlowType, MetricsReport]:
    """Metrics per task on raw volumes; tasks without records are absent."""
    return {t: report(p, y) for t, (p, y) in predict_records(params, graph, records, log_targets).items()}
