"""Desk-scale deep self-attention distillation toolkit (C++ core)."""

from ._minidistill import (
    ConfigError,
    IoError,
    Model,
    ShapeError,
    count_params,
    flops_per_token,
    format_count,
    gradcheck,
    minilm_loss,
    synth_corpus,
    value_relation,
    value_relation_loss,
)

__all__ = [
    "ConfigError",
    "IoError",
    "Model",
    "ShapeError",
    "count_params",
    "flops_per_token",
    "format_count",
    "gradcheck",
    "minilm_loss",
    "synth_corpus",
    "value_relation",
    "value_relation_loss",
]
