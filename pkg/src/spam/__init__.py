"""Scalable polynomial additive models.

Low-rank symmetric tensor polynomials over (optionally learned) per-feature
inputs, trained by minibatch AdamW, with exact per-term explanations.
"""

from .errors import (
    DataError,
    DegenerateSpectrumError,
    MetricError,
    NonFiniteError,
    OracleCapError,
    SchemaError,
    ShapeError,
    SpamError,
    UnsupportedOrderError,
)
from .neural_feats import FeatureNetBank, init_bank, neural_explain, neural_spam_forward
from .optimize import TrainConfig, grad_check, train
from .poly_core import (
    RankSpec,
    SpamParams,
    active_interactions,
    eval_expanded,
    expand_full,
    explain,
    init_params,
    param_count,
    poly_forward,
    spectral_fit,
)

__version__ = "0.1.0"
