"""Attentive scoring of packed speaker embeddings."""

from .enrollment import EnrollAgg, EnrollmentModel, build_enrollment, enrollment_footprint
from .errors import (
    AttScoreError,
    ConfigError,
    DataError,
    DegenerateVectorError,
    EvaluationError,
    FormatError,
    LayoutError,
    NumericalError,
    TrainingDivergedError,
    ValidationError,
)
from .evaluation import EerResult, Trial, compute_det_points, compute_eer
from .grad import ScoreGradient, fd_gradient, score_grad
from .layout import LayoutConfig, PackedEmbedding, UnpackedRepresentation, pack, unpack
from .normalize import LayerNormParams, NormMode, l2_normalize, layer_normalize
from .pooling import PoolingParams, PoolingState, pool_finalize, pool_sequence, pool_step
from .scoring import ScoringConfig, score_attentive, score_cosine_baseline, score_global_l2, score_trial

__version__ = "0.1.0"

__all__ = [
    "AttScoreError", "ConfigError", "DataError", "DegenerateVectorError", "EerResult",
    "EnrollAgg", "EnrollmentModel", "EvaluationError", "FormatError", "LayerNormParams",
    "LayoutConfig", "LayoutError", "NormMode", "NumericalError", "PackedEmbedding",
    "PoolingParams", "PoolingState", "ScoreGradient", "ScoringConfig", "TrainingDivergedError",
    "Trial", "UnpackedRepresentation", "ValidationError", "build_enrollment",
    "compute_det_points", "compute_eer", "enrollment_footprint", "fd_gradient", "l2_normalize",
    "layer_normalize", "pack", "pool_finalize", "pool_sequence", "pool_step", "score_attentive",
    "score_cosine_baseline", "score_global_l2", "score_grad", "score_trial", "unpack",
]
