"""Differentiation engine, parameter containers and optimizers."""
from . import tape as ad
from .optim import LBFGS, Adam, EarlyStopping, LbfgsResult, clip_grad_norm
from .params import (CheckpointError, Params, layer_nodes, layer_shapes, load_params,
                     save_params, uniform_fan_in, xavier_normal)
from .tape import ContractError, NonFiniteError, Node, Tape, backward, input_derivative

__all__ = [
    "ad", "Adam", "LBFGS", "LbfgsResult", "EarlyStopping", "clip_grad_norm",
    "Params", "CheckpointError", "layer_nodes", "layer_shapes", "load_params", "save_params",
    "uniform_fan_in", "xavier_normal",
    "ContractError", "NonFiniteError", "Node", "Tape", "backward", "input_derivative",
]
