"""Multi-scale transformer GAN with scale-wise masked discrimination,
cross-scale consistency regularization, trajectory diagnostics, and an
analytic training-compute ledger.

Heavy modules (generator, discriminator, training) import torch; pull them
in explicitly, e.g. ``from xsgan.training import train``.
"""

from .config import (ConsistencyConfig, DiscConfig, ExperimentConfig, ModelConfig,
                     PenaltyConfig, ToyDatasetSpec, TrainConfig, parse_kv_text)
from .errors import ConfigError, ContractError, LayoutError, NumericFault

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ConsistencyConfig",
    "ContractError",
    "DiscConfig",
    "ExperimentConfig",
    "LayoutError",
    "ModelConfig",
    "NumericFault",
    "PenaltyConfig",
    "ToyDatasetSpec",
    "TrainConfig",
    "parse_kv_text",
    "__version__",
]
