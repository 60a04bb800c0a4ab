"""Enrollment models built from one or more packed utterance embeddings."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import LayoutError, ValidationError
from .layout import LayoutConfig, PackedEmbedding, check_vector


class EnrollAgg(str, enum.Enum):
    CONCAT = "concat"
    MEAN = "mean"


@dataclass(frozen=True)
class EnrollmentModel:
    speaker_id: str
    mode: EnrollAgg
    material: np.ndarray  # (E, D) for concat, (1, D) for mean
    num_utts: int

    @property
    def vectors(self) -> np.ndarray:
        return self.material

    def mean_vector(self) -> np.ndarray:
        return self.material.mean(axis=0)


def build_enrollment(embs, mode=EnrollAgg.CONCAT, speaker_id: str = "",
                     layout: LayoutConfig | None = None) -> EnrollmentModel:
    """Aggregate utterance embeddings into an enrollment model.

    ``embs`` may hold PackedEmbedding objects or raw vectors. Mean mode stores
    the component-wise average of the raw packed vectors; no normalization is
    applied here.
    """
    mode = EnrollAgg(mode)
    vecs = [e.vec if isinstance(e, PackedEmbedding) else np.asarray(e, dtype=np.float64)
            for e in embs]
    if not vecs:
        raise ValidationError("enrollment requires at least one embedding")
    dim = vecs[0].shape
    if any(v.shape != dim for v in vecs):
        raise LayoutError("enrollment embeddings have mismatched lengths")
    if layout is not None:
        vecs = [check_vector(v, layout) for v in vecs]
    mat = np.stack(vecs)
    if mode is EnrollAgg.MEAN:
        mat = mat.mean(axis=0, keepdims=True)
    mat.flags.writeable = False
    return EnrollmentModel(speaker_id, mode, mat, len(vecs))


def enrollment_footprint(model: EnrollmentModel) -> int:
    """Number of floats stored for the model."""
    return int(model.material.size)
