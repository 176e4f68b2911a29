"""Multimodal tabular classifier kit.

Turns heterogeneous subject measures (region profiles, tract metrics,
hormone panels, demographics) into per-measure tokens, mixes them with a
cross-token transformer and a soft mixture of experts, and classifies
through an interpretable importance-weighted pooling head. Ships its own
float64 reverse-mode autodiff engine, an AdamW trainer with warmup/cosine
scheduling, a planted-signal synthetic data generator, sex-stratified
metrics, and a CLI that renders report figures.
"""

from .data import Measure, Schema, SubjectRecord
from .errors import (ConfigError, DataError, NumericError, SchemaError,
                     ShapeError, TokmoeError)
from .model import ModelConfig, ModelParams, build_model, forward
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "Measure", "Schema", "SubjectRecord",
    "ModelConfig", "ModelParams", "build_model", "forward",
    "Tensor", "backward",
    "TokmoeError", "ConfigError", "ShapeError", "DataError", "SchemaError",
    "NumericError",
    "__version__",
]
