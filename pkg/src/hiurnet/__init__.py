"""Hierarchical urban graph attention network for commuting-flow prediction."""
from .model import ModelConfig, ModelParams, encode, init_params, predict
from .training import TrainConfig, evaluate_model, focal_l2, train
from .urban_graph import FlowRecord, FlowType, HeteroGraph, UnitKind, build_graph, split_edges, training_graph

__version__ = "0.1.0"
