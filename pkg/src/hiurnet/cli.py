"""``hiurnet`` command line: gen-synth, build-graph, train, evaluate, explain, gravity-*.

Everything lives in one data directory:

    indicators.csv inclusion.csv flows.csv coords.csv   inputs (gen-synth writes these)
    split.csv graph.json                                 build-graph
    model.zip history.csv                                train
    gravity.zip                                          gravity-train
    report.txt attribution.csv                           explain

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical failure.
Failures print one line to stderr: ``error code=<n> kind=<kind> message=<json string>``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .autodiff import NonFiniteError
from .baselines import evaluate_gravity, load_gravity, save_gravity, train_gravity, unit_centroids, unit_populations
from .config import ConfigError, RunConfig, config_dict, describe_defaults, load_config
from .explain import AttributionRequest, regional_summary
from .metrics import MetricsReport
from .model import load_model, save_model
from .synthcity import generate_world, write_world
from .training import TrainingDiverged, evaluate_model, train
from .urban_graph import (
    TASK_ORDER,
    DataError,
    FlowType,
    HeteroGraph,
    city,
    load_coords,
    load_flows,
    load_grid_indicators,
    load_inclusion,
    load_split,
    split_edges,
    standardize_features,
    training_graph,
    write_split,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# data directory helpers


def _path(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.data_dir) / name


def _need(path: Path) -> Path:
    if not path.is_file():
        raise DataError(f"missing input file {path}")
    return path


def _load_inputs(cfg: RunConfig):
    table = load_grid_indicators(_need(_path(cfg, "indicators.csv")))
    inclusion = load_inclusion(_need(_path(cfg, "inclusion.csv")))
    flows = load_flows(_need(_path(cfg, "flows.csv")))
    coords_path = _path(cfg, "coords.csv")
    coords = load_coords(coords_path, table.grid_count) if coords_path.is_file() else None
    return table, inclusion, flows, coords


def _graph_and_split(cfg: RunConfig):
    table, inclusion, _, coords = _load_inputs(cfg)
    split = load_split(_need(_path(cfg, "split.csv")), cfg.seed)
    std = standardize_features(table)
    graph = training_graph(std, inclusion, split, cfg.graph, coords)
    graph = _restrict(graph, cfg.model.edge_types)
    return table, std, inclusion, coords, split, graph


def _restrict(graph: HeteroGraph, edge_types) -> HeteroGraph:
    """Drop graph edge types the model was not configured to use."""
    return replace(graph, edges={et: el for et, el in graph.edges.items() if et in edge_types})


def _effective(cfg: RunConfig) -> RunConfig:
    # geo adjacency switched on in the graph section implies the model uses it
    if cfg.graph.geo and "geo" not in cfg.model.edge_types:
        cfg = replace(cfg, model=replace(cfg.model, edge_types=cfg.model.edge_types + ("geo",)))
    return cfg


def _fmt_report(reports: dict[FlowType, MetricsReport]) -> str:
    blocks = []
    for t in TASK_ORDER:
        if t not in reports:
            continue
        r = reports[t]
        blocks.append(
            "\n".join(
                [
                    f"[{t.value}]",
                    f"n = {r.n}",
                    f"rmse = {r.rmse!r}",
                    f"mae = {r.mae!r}",
                    f"pcc = {r.pcc!r}",
                    f"degenerate_pcc = {str(r.degenerate_pcc).lower()}",
                ]
            )
        )
    return "\n\n".join(blocks) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(cfg: RunConfig, args) -> int:
    world = generate_world(cfg.world)
    paths = write_world(world, cfg.data_dir, cfg.world)
    print(f"wrote {len(paths)} files to {cfg.data_dir}")
    return EXIT_OK


def cmd_build_graph(cfg: RunConfig, args) -> int:
    table, inclusion, flows, coords = _load_inputs(cfg)
    split = split_edges(flows, cfg.split, cfg.seed)
    std = standardize_features(table)
    graph = _restrict(training_graph(std, inclusion, split, cfg.graph, coords), cfg.model.edge_types)
    write_split(_path(cfg, "split.csv"), split)
    summary = {
        "node_counts": {k.value: v for k, v in graph.node_counts.items()},
        "edge_counts": graph.edge_counts(),
        "split_counts": {name: len(split.records(name)) for name in ("train", "val", "test")},
        "feature_means": [float(v) for v in std.means],
        "feature_stdevs": [float(v) for v in std.stdevs],
        "seed": cfg.seed,
        "graph": config_dict(cfg)["graph"],
    }
    _path(cfg, "graph.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    counts = " ".join(f"{et}={n}" for et, n in graph.edge_counts().items())
    print(f"graph mesh={graph.n_mesh} city={graph.n_city} {counts}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    _, std, _, _, split, graph = _graph_and_split(cfg)

    def progress(row):
        val = row.get("val_weighted_rmse")
        print(f"epoch={row['epoch']} loss={row['total_loss']!r} val_rmse={'nan' if val is None else repr(val)}", flush=True)

    params, history = train(graph, split, cfg.model, cfg.train, on_epoch=progress)
    extra = {"best_epoch": history.best_epoch, "graph": config_dict(cfg)["graph"], "train": config_dict(cfg)["train"]}
    save_model(_path(cfg, "model.zip"), params, cfg.seed, std.means, std.stdevs, extra)
    history.write_csv(_path(cfg, "history.csv"))
    print(f"best_epoch={history.best_epoch}")
    return EXIT_OK


def _load_trained(cfg: RunConfig):
    params, manifest = load_model(_need(_path(cfg, "model.zip")))
    *_, split, graph = _graph_and_split(cfg)
    graph = _restrict(graph, params.config.edge_types)
    return params, manifest, graph, split


def cmd_evaluate(cfg: RunConfig, args) -> int:
    params, manifest, graph, split = _load_trained(cfg)
    log_targets = bool(manifest.get("train", {}).get("log_targets", False))
    reports = evaluate_model(params, graph, split.records(args.subset), log_targets)
    sys.stdout.write(_fmt_report(reports))
    return EXIT_OK


def cmd_explain(cfg: RunConfig, args) -> int:
    params, _, graph, split = _load_trained(cfg)
    if not 0 <= args.city < graph.n_city:
        raise DataError(f"city {args.city} is not in the graph ({graph.n_city} cities)")
    request = AttributionRequest(city(args.city), cfg.explain.k, cfg.explain.steps)
    report = regional_summary(params, graph, request, split, workers=args.workers)
    text = report.format_text()
    _path(cfg, "report.txt").write_text(text, encoding="utf-8")
    report.write_csv(_path(cfg, "attribution.csv"))
    sys.stdout.write(text)
    return EXIT_OK


def _gravity_inputs(cfg: RunConfig):
    table, inclusion, _, coords = _load_inputs(cfg)
    if coords is None:
        raise DataError("gravity model needs coords.csv")
    split = load_split(_need(_path(cfg, "split.csv")), cfg.seed)
    return unit_populations(table, inclusion), unit_centroids(coords, inclusion), split


def cmd_gravity_train(cfg: RunConfig, args) -> int:
    pops, cents, split = _gravity_inputs(cfg)
    model = train_gravity(split.records("train"), pops, cents, cfg.gravity, split.records("val"))
    save_gravity(_path(cfg, "gravity.zip"), model, {"seed": cfg.seed})
    print(f"fitted tasks: {' '.join(t.value for t in TASK_ORDER if t in model)}")
    return EXIT_OK


def cmd_gravity_evaluate(cfg: RunConfig, args) -> int:
    pops, cents, split = _gravity_inputs(cfg)
    model = load_gravity(_need(_path(cfg, "gravity.zip")))
    sys.stdout.write(_fmt_report(evaluate_gravity(model, split.records(args.subset), pops, cents)))
    return EXIT_OK


COMMANDS = {
    "gen-synth": (cmd_gen_synth, "generate a synthetic world into the data directory"),
    "build-graph": (cmd_build_graph, "split flows and summarize the training graph"),
    "train": (cmd_train, "train HiUrNet; prints epoch=<n> loss=<v> val_rmse=<v>"),
    "evaluate": (cmd_evaluate, "per-task RMSE/MAE/PCC of the trained model"),
    "explain": (cmd_explain, "integrated-gradients regional summary for one city"),
    "gravity-train": (cmd_gravity_train, "fit the gravity baseline"),
    "gravity-evaluate": (cmd_gravity_evaluate, "per-task metrics of the gravity baseline"),
}


def _parse_set(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise UsageError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError:
        raise UsageError(f"--set {key}: cannot parse value {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    epilog = "configuration keys and defaults (YAML file, or --set key=value):\n" + describe_defaults()
    epilog += "\n\nHIURNET_SEED overrides the config seed; flags override both."
    parser = _Parser(prog="hiurnet", description=__doc__.splitlines()[0], epilog=epilog,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--data", "--out", dest="data", help="data directory (default: data)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="parallel workers (default: CPU count)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name in ("train",):
            p.add_argument("--epochs", type=int, help="train.max_epochs")
            p.add_argument("--patience", type=int, help="train.patience")
            p.add_argument("--lr", type=float, help="train.learning_rate")
        if name in ("evaluate", "gravity-evaluate"):
            p.add_argument("--subset", choices=("train", "val", "test"), default="test")
        if name == "explain":
            p.add_argument("--city", type=int, required=True, help="target city index")
            p.add_argument("--k", type=int, help="explain.k (default 10)")
            p.add_argument("--steps", type=int, help="explain.steps (default 128)")
    return parser


def _overrides(args) -> dict:
    out = dict(_parse_set(s) for s in args.set)
    if args.seed is not None:
        out["seed"] = args.seed
    if args.data is not None:
        out["data_dir"] = args.data
    for flag, key in (("epochs", "train.max_epochs"), ("patience", "train.patience"), ("lr", "train.learning_rate"),
                      ("k", "explain.k"), ("steps", "explain.steps")):
        if getattr(args, flag, None) is not None:
            out[key] = getattr(args, flag)
    return out


def _fail(code: int, kind: str, message: str) -> int:
    print(f"error code={code} kind={kind} message={json.dumps(message)}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg = _effective(load_config(args.config, _overrides(args)))
        return COMMANDS[args.command][0](cfg, args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "config", str(exc))
    except (DataError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", str(exc))
    except ValueError as exc:
        # remaining ValueErrors come from config-driven constructors (bad ratios, k, steps)
        return _fail(EXIT_USAGE, "config", str(exc))


if __name__ == "__main__":
    sys.exit(main())
