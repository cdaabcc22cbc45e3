"""HiUrNet against the learned gravity baseline on synthetic worlds.

    python scripts/compare_gravity.py --seeds 0 1 2
"""
import argparse
import time
from dataclasses import replace

import numpy as np

from hiurnet.baselines import GRAVITY_TRAIN_DEFAULTS, evaluate_gravity, train_gravity, unit_centroids, unit_populations
from hiurnet.model import ModelConfig
from hiurnet.synthcity import WorldConfig, generate_world
from hiurnet.training import TrainConfig, evaluate_model, train
from hiurnet.urban_graph import TASK_ORDER, split_edges, standardize_features, training_graph


def run(seed: int, world_cfg: WorldConfig, max_epochs: int):
    world = generate_world(replace(world_cfg, seed=seed))
    split = split_edges(world.flows, (0.8, 0.1, 0.1), seed)
    graph = training_graph(standardize_features(world.indicators), world.inclusion, split)
    params, _ = train(graph, split, ModelConfig(), TrainConfig(seed=seed, max_epochs=max_epochs))
    pops, cents = unit_populations(world.indicators, world.inclusion), unit_centroids(world.coords, world.inclusion)
    grav = train_gravity(split.records("train"), pops, cents, replace(GRAVITY_TRAIN_DEFAULTS, seed=seed), split.records("val"))
    test = split.records("test")
    return evaluate_model(params, graph, test), evaluate_gravity(grav, test, pops, cents)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--pure-gravity", action="store_true", help="world driven by population only, no noise")
    args = ap.parse_args()
    world_cfg = WorldConfig(attractiveness="population", noise_sd=0.0) if args.pure_gravity else WorldConfig()

    rows = {"hiurnet": [], "gravity": []}
    for seed in args.seeds:
        t0 = time.perf_counter()
        ours, theirs = run(seed, world_cfg, args.epochs)
        rows["hiurnet"].append(ours)
        rows["gravity"].append(theirs)
        print(f"seed {seed} done in {time.perf_counter() - t0:.0f}s", flush=True)

    print(f"\n{'model':<9}{'task':<6}{'rmse':>9}{'mae':>9}{'pcc':>8}")
    for name, reports in rows.items():
        for t in TASK_ORDER:
            r = [rep[t] for rep in reports]
            print(f"{name:<9}{t.value:<6}{np.mean([x.rmse for x in r]):9.2f}{np.mean([x.mae for x in r]):9.2f}{np.mean([x.pcc for x in r]):8.3f}")


if __name__ == "__main__":
    main()
