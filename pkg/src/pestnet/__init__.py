"""Lightweight pest-recognition CNN with double attention, built on numpy.

The package is organised bottom-up:

* :mod:`pestnet.tensor` - tensors and a reverse-mode gradient tape
* :mod:`pestnet.layers` - convolutions, batch norm, ReLU6, inverted residuals
* :mod:`pestnet.attention` - the gather/distribute double-attention module
* :mod:`pestnet.architecture`, :mod:`pestnet.model`, :mod:`pestnet.accounting`
  - layer tables, model construction, parameter/MAC accounting
* :mod:`pestnet.data`, :mod:`pestnet.train` - datasets, folds, SGD, metrics
* :mod:`pestnet.cli` - the ``pestnet`` command
"""

from .accounting import count_macs, gmac, total_cost
from .architecture import ArchitectureConfig, canonical_config, infer_shapes, load_config, parse_config
from .attention import DoubleAttention, DoubleAttentionSpec, distribute, gather
from .errors import (
    ConfigError, ContractError, DimensionError, FormatError, NumericError, PestNetError, ValidationError,
)
from .model import Model, build, count_params
from .tensor import GradientTape, Tensor, backward, finite_diff_check
from .train import SgdConfig, evaluate, run_cv, train_fold

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig", "ConfigError", "ContractError", "DimensionError", "DoubleAttention",
    "DoubleAttentionSpec", "FormatError", "GradientTape", "Model", "NumericError", "PestNetError",
    "SgdConfig", "Tensor", "ValidationError", "backward", "build", "canonical_config", "count_macs",
    "count_params", "distribute", "evaluate", "finite_diff_check", "gather", "gmac", "infer_shapes",
    "load_config", "parse_config", "run_cv", "total_cost", "train_fold",
]
