"""HiUrNet encoder (relation-parameterised multi-head attention) and flow decoders."""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .urban_graph import EDGE_TYPES, TASK_ORDER, DataError, FlowType, HeteroGraph, UnitKind, UrbanUnitId

DEFAULT_EDGE_TYPES = ("m2m", "m2c", "c2m", "includes", "in")
NODE_KINDS = (UnitKind.MESH, UnitKind.CITY)
LEAKY_SLOPE = 0.2

CHECKPOINT_FORMAT = "hiurnet-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 128
    heads: int = 8
    layers: int = 3
    edge_types: tuple[str, ...] = DEFAULT_EDGE_TYPES
    decoder_hidden: int = 128

    def __post_init__(self):
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        unknown = set(self.edge_types) - set(EDGE_TYPES)
        if unknown:
            raise ValueError(f"unknown edge types: {sorted(unknown)}")
        # canonical order keeps parameter naming and summation order stable
        object.__setattr__(self, "edge_types", tuple(e for e in EDGE_TYPES if e in self.edge_types))

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    n_features: int = 0
    n_city: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: self.tensors[k].data for k in sorted(self.tensors)}

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()}
        return ModelParams(self.config, tensors, self.n_features, self.n_city)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.tensors[k].data = np.array(v, dtype=np.float64)


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, metadata: dict, seed: int = 0) -> ModelParams:
    """Fresh parameters; ``metadata`` is ``HeteroGraph.metadata()`` or the same keys."""
    if config.embed_dim % config.heads:
        raise ValueError(f"embed_dim {config.embed_dim} is not divisible by heads {config.heads}")
    n_features = int(metadata["n_features"])
    n_city = int(metadata["node_counts"]["city"])
    rng = np.random.default_rng(seed)
    D, h, dk, H = config.embed_dim, config.heads, config.head_dim, config.decoder_hidden
    arrays: dict[str, np.ndarray] = {}

    arrays["input.weight"] = _glorot(rng, (n_features, D), n_features, D)
    arrays["input.bias"] = np.zeros(D)
    arrays["city_table"] = _glorot(rng, (n_city, D), n_city, D)
    for layer in range(config.layers):
        for kind in NODE_KINDS:
            for proj in ("k", "q", "m", "a"):
                arrays[f"layer{layer}.{kind.value}.{proj}.weight"] = _glorot(rng, (D, D), D, D)
                arrays[f"layer{layer}.{kind.value}.{proj}.bias"] = np.zeros(D)
        for et in config.edge_types:
            arrays[f"layer{layer}.{et}.att"] = _glorot(rng, (h, dk, dk), dk, dk)
            arrays[f"layer{layer}.{et}.msg"] = _glorot(rng, (h, dk, dk), dk, dk)
            arrays[f"layer{layer}.{et}.mu"] = np.ones(())
    for task in TASK_ORDER:
        arrays[f"decoder.{task.value}.w1"] = _glorot(rng, (2 * D, H), 2 * D, H)
        arrays[f"decoder.{task.value}.b1"] = np.zeros(H)
        arrays[f"decoder.{task.value}.w2"] = _glorot(rng, (H, 1), H, 1)
        arrays[f"decoder.{task.value}.b2"] = np.zeros(1)

    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return ModelParams(config, tensors, n_features, n_city)


def _offsets(graph: HeteroGraph) -> dict[UnitKind, int]:
    return {UnitKind.MESH: 0, UnitKind.CITY: graph.n_mesh}


def layer_forward(
    H: dict[UnitKind, Tensor],
    graph: HeteroGraph,
    params: ModelParams,
    layer: int,
    edge_mask: dict[str, Tensor] | None = None,
    capture: dict | None = None,
) -> dict[UnitKind, Tensor]:
    """One attention layer.  Softmax normalises over every incoming edge of a
    target, across all edge types at once.

    ``edge_mask`` scales each edge's message (used for attribution);
    ``capture`` receives the raw scores and attention weights per edge type.
    """
    cfg = params.config
    h, dk = cfg.heads, cfg.head_dim
    for kind in NODE_KINDS:
        if H[kind].shape != (graph.node_counts[kind], cfg.embed_dim):
            raise ValueError(f"{kind.value} embeddings have shape {H[kind].shape}, graph has {graph.node_counts[kind]} nodes")
    for et in graph.edges:
        if et not in EDGE_TYPES:
            raise ValueError(f"unknown edge type {et!r}")
        if len(graph.edges[et]) and et not in cfg.edge_types:
            raise ValueError(f"graph has {et!r} edges but the model has no parameters for them")

    p = f"layer{layer}"

    def proj(kind, name):
        x = ad.linear(H[kind], params[f"{p}.{kind.value}.{name}.weight"], params[f"{p}.{kind.value}.{name}.bias"])
        return ad.split_heads(x, h)

    K = {k: proj(k, "k") for k in NODE_KINDS}
    Q = {k: proj(k, "q") for k in NODE_KINDS}
    M = {k: proj(k, "m") for k in NODE_KINDS}

    offset = _offsets(graph)
    total = graph.n_mesh + graph.n_city
    scores, messages, targets, spans = [], [], [], []
    inv_sqrt = 1.0 / math.sqrt(dk)
    for et in cfg.edge_types:
        el = graph.edges.get(et)
        if el is None or len(el) == 0:
            continue
        sk, tk = EDGE_TYPES[et]
        # relation matrices act on node rows before the per-edge gather (same result, fewer rows)
        key = ad.gather_rows(ad.head_matmul(K[sk], params[f"{p}.{et}.att"]), el.src)
        raw = ad.rowdot(key, ad.gather_rows(Q[tk], el.dst))
        s = ad.scale(ad.mul(raw, params[f"{p}.{et}.mu"]), inv_sqrt)
        msg = ad.gather_rows(ad.head_matmul(M[sk], params[f"{p}.{et}.msg"]), el.src)
        if edge_mask is not None and et in edge_mask:
            msg = ad.mul(msg, ad.reshape(edge_mask[et], (len(el), 1, 1)))
        start = sum(len(t) for t in targets)
        spans.append((et, start, start + len(el)))
        scores.append(s)
        messages.append(msg)
        targets.append(el.dst + offset[tk])

    if scores:
        tgt = np.concatenate(targets)
        attn = ad.segment_softmax(ad.concat(scores, 0), tgt, total)
        weighted = ad.mul(ad.concat(messages, 0), ad.reshape(attn, (len(tgt), h, 1)))
        agg = ad.scatter_sum(ad.merge_heads(weighted), tgt, total)
        if capture is not None:
            for et, a, b in spans:
                capture.setdefault(layer, {})[et] = {
                    "scores": np.concatenate([s.data for s in scores])[a:b],
                    "attention": attn.data[a:b],
                    "targets": tgt[a:b],
                }
    else:
        agg = Tensor(np.zeros((total, cfg.embed_dim)))

    out = {}
    for kind in NODE_KINDS:
        n = graph.node_counts[kind]
        rows = np.arange(offset[kind], offset[kind] + n)
        tilde = ad.gather_rows(agg, rows)
        z = ad.add(ad.leaky_relu(tilde, LEAKY_SLOPE), H[kind])
        out[kind] = ad.linear(z, params[f"{p}.{kind.value}.a.weight"], params[f"{p}.{kind.value}.a.bias"])
    return out


def initial_embeddings(graph: HeteroGraph, params: ModelParams, features: Tensor | None = None) -> dict[UnitKind, Tensor]:
    if features is None:
        if graph.features is None or not graph.features.standardized:
            raise ValueError("graph indicators are not standardized (no stored statistics)")
        features = Tensor(graph.features.values)
    if params["city_table"].shape[0] != graph.n_city:
        raise ValueError(f"model has {params['city_table'].shape[0]} cities, graph has {graph.n_city}")
    return {
        UnitKind.MESH: ad.linear(features, params["input.weight"], params["input.bias"]),
        UnitKind.CITY: params["city_table"],
    }


def encode(
    graph: HeteroGraph,
    params: ModelParams,
    features: Tensor | None = None,
    edge_mask: dict[str, Tensor] | None = None,
    capture: dict | None = None,
) -> dict[UnitKind, Tensor]:
    H = initial_embeddings(graph, params, features)
    for layer in range(params.config.layers):
        H = layer_forward(H, graph, params, layer, edge_mask, capture)
    return H


def decode_indices(
    embeddings: dict[UnitKind, Tensor],
    origins: np.ndarray,
    destinations: np.ndarray,
    task: FlowType,
    params: ModelParams,
) -> Tensor:
    ok, dk = task.kinds
    z = ad.concat([ad.gather_rows(embeddings[ok], origins), ad.gather_rows(embeddings[dk], destinations)], axis=1)
    pre = f"decoder.{task.value}"
    hidden = ad.relu(ad.linear(z, params[f"{pre}.w1"], params[f"{pre}.b1"]))
    out = ad.softplus(ad.linear(hidden, params[f"{pre}.w2"], params[f"{pre}.b2"]))
    return ad.reshape(out, (len(origins),))


def decode_pairs(
    embeddings: dict[UnitKind, Tensor],
    pairs: Sequence[tuple[UrbanUnitId, UrbanUnitId]],
    task: FlowType,
    params: ModelParams,
) -> Tensor:
    """Non-negative flow predictions for (origin, destination) pairs of one task."""
    task = FlowType(task)
    ok, dk = task.kinds
    for o, d in pairs:
        if o.kind is not ok or d.kind is not dk:
            raise ValueError(f"pair ({o}, {d}) does not match task {task.value}")
    origins = np.array([o.index for o, _ in pairs], dtype=np.int64)
    dests = np.array([d.index for _, d in pairs], dtype=np.int64)
    return decode_indices(embeddings, origins, dests, task, params)


def predict(params: ModelParams, graph: HeteroGraph, origins, destinations, task: FlowType) -> np.ndarray:
    """Tape-free convenience wrapper returning a numpy array."""
    emb = encode(graph, params)
    return decode_indices(emb, np.asarray(origins, np.int64), np.asarray(destinations, np.int64), FlowType(task), params).data


# ---------------------------------------------------------------------------
# checkpoint container: a zip of .npy arrays ('<f8') plus a JSON manifest


def save_checkpoint(path: str | Path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = dict(manifest)
    manifest["format"] = CHECKPOINT_FORMAT
    manifest["version"] = CHECKPOINT_VERSION
    manifest["arrays"] = {k: list(np.shape(v)) for k, v in sorted(arrays.items())}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(arrays[name], dtype="<f8", order="C"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"arrays/{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
        arrays = {}
        for name, shape in manifest["arrays"].items():
            arr = np.load(io.BytesIO(zf.read(f"arrays/{name}.npy")), allow_pickle=False)
            if list(arr.shape) != shape:
                raise DataError(f"{path}: array {name} has shape {arr.shape}, manifest says {shape}")
            arrays[name] = arr
    return manifest, arrays


def config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["edge_types"] = list(config.edge_types)
    return d


def save_model(
    path: str | Path,
    params: ModelParams,
    seed: int,
    means: np.ndarray | None,
    stdevs: np.ndarray | None,
    extra: dict | None = None,
) -> None:
    manifest = {
        "model": config_to_dict(params.config),
        "seed": int(seed),
        "n_features": params.n_features,
        "n_city": params.n_city,
        "feature_means": None if means is None else [float(v) for v in means],
        "feature_stdevs": None if stdevs is None else [float(v) for v in stdevs],
    }
    if extra:
        manifest.update(extra)
    save_checkpoint(path, manifest, {f"model/{k}": v for k, v in params.named_arrays().items()})


def load_model(path: str | Path) -> tuple[ModelParams, dict]:
    manifest, arrays = load_checkpoint(path)
    cfg = dict(manifest["model"])
    cfg["edge_types"] = tuple(cfg["edge_types"])
    config = ModelConfig(**cfg)
    tensors = {
        k[len("model/"):]: Tensor(v, requires_grad=True, name=k[len("model/"):])
        for k, v in arrays.items()
        if k.startswith("model/")
    }
    return ModelParams(config, tensors, manifest["n_features"], manifest["n_city"]), manifest
