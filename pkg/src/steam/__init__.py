"""STEAM: channel and spatial interaction attention for CNNs, on a small numpy autodiff engine."""

from .attention import GraphAttentionParams, dense_attention_oracle, graph_attention, init_params
from .autodiff import FlopCounter, Tensor, backward, no_grad
from .errors import (CheckpointError, ConfigError, ContractError, DimensionError, EmptyNeighborhoodError,
                     FormatError, ParameterError, SteamError, TrainingError)
from .graph import EdgeDropMask, Graph, build_cyclic_channel_graph, build_grid_spatial_graph
from .model import DeskCNN, build_desk_cnn
from .rng import Rng
from .unit import SteamConfig, SteamUnit, cia, ogp, sia, steam_forward
from .zoo import BACKBONES, PlacementPlan, StageSpec, account, count_flops, count_params, plan_placement

__all__ = [
    "BACKBONES", "CheckpointError", "ConfigError", "ContractError", "DeskCNN", "DimensionError",
    "EdgeDropMask", "EmptyNeighborhoodError", "FlopCounter", "FormatError", "Graph", "GraphAttentionParams",
    "ParameterError", "PlacementPlan", "Rng", "StageSpec", "SteamConfig", "SteamError", "SteamUnit",
    "Tensor", "TrainingError", "account", "backward", "build_cyclic_channel_graph", "build_desk_cnn",
    "build_grid_spatial_graph", "cia", "count_flops", "count_params", "dense_attention_oracle",
    "graph_attention", "init_params", "no_grad", "ogp", "plan_placement", "sia", "steam_forward",
]
