"""
This module makes the package importable to users.

====================================
Copyright srnet-lite authors, 2024-present
====================================
"""

from __future__ import annotations

from srnet import autograd, constants, cost, evaluation, graph, model, nnops, training, utils
from srnet.constants import __version__

from .config import RunConfig, load_config
from .cost import cost_report
from .data import Sample, generate_synthetic, load_dataset
from .evaluation import EvalReport, evaluate, evaluate_maps
from .graph import NetworkGraph
from .model import BackboneVariant, ReasoningConfig, SRUnitConfig, build_variant
from .tensor import Shape, Tensor, tensor_new
from .training import LossConfig, TrainConfig, train
