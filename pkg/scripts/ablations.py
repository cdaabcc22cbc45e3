"""Ablations on the default synthetic world: edge types, layer count, embedding size.

    python scripts/ablations.py edges
    python scripts/ablations.py layers --seeds 0 1
    python scripts/ablations.py dim --epochs 200
"""
import argparse
import time
from dataclasses import replace

import numpy as np

from hiurnet.model import DEFAULT_EDGE_TYPES, ModelConfig
from hiurnet.synthcity import WorldConfig, generate_world
from hiurnet.training import TrainConfig, evaluate_model, train
from hiurnet.urban_graph import TASK_ORDER, GraphOptions, split_edges, standardize_features, training_graph

FLOWS = ("m2m", "m2c", "c2m")
HIERARCHY = ("includes", "in")

STUDIES = {
    "edges": {
        "all": dict(edge_types=DEFAULT_EDGE_TYPES),
        "flows only": dict(edge_types=FLOWS),
        "m2m only": dict(edge_types=("m2m",)),
        "no m2m": dict(edge_types=("m2c", "c2m") + HIERARCHY),
        "hierarchy only": dict(edge_types=HIERARCHY),
        "all + geo": dict(edge_types=DEFAULT_EDGE_TYPES + ("geo",)),
    },
    "layers": {f"L={n}": dict(layers=n) for n in (1, 2, 3, 4)},
    "dim": {f"D={d}": dict(embed_dim=d, decoder_hidden=d) for d in (32, 64, 128, 256)},
}


def run(seed: int, model_kw: dict, max_epochs: int):
    world = generate_world(WorldConfig(seed=seed))
    split = split_edges(world.flows, (0.8, 0.1, 0.1), seed)
    cfg = ModelConfig(**model_kw)
    opts = GraphOptions(geo="geo" in cfg.edge_types)
    graph = training_graph(standardize_features(world.indicators), world.inclusion, split, opts, world.coords)
    graph = replace(graph, edges={et: el for et, el in graph.edges.items() if et in cfg.edge_types})
    params, _ = train(graph, split, cfg, TrainConfig(seed=seed, max_epochs=max_epochs))
    return evaluate_model(params, graph, split.records("test"))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("study", choices=sorted(STUDIES))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=500)
    args = ap.parse_args()

    header = "".join(f"{t.value + ' pcc':>10}{t.value + ' rmse':>11}" for t in TASK_ORDER)
    print(f"{'variant':<16}{header}{'secs':>7}")
    for name, kw in STUDIES[args.study].items():
        t0 = time.perf_counter()
        reports = [run(s, kw, args.epochs) for s in args.seeds]
        cells = "".join(
            f"{np.mean([r[t].pcc for r in reports]):10.3f}{np.mean([r[t].rmse for r in reports]):11.2f}" for t in TASK_ORDER
        )
        print(f"{name:<16}{cells}{time.perf_counter() - t0:7.0f}", flush=True)


if __name__ == "__main__":
    main()
