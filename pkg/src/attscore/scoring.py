"""Attentive scoring of packed speaker embeddings and the cosine baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .enrollment import EnrollAgg, build_enrollment
from .errors import ConfigError, DataError, DegenerateVectorError, LayoutError
from .layout import LayoutConfig, PackedEmbedding, check_vector, unpack_array
from .normalize import EPS, LayerNormParams, NormMode, l2_normalize, layer_normalize

# Smallest positive normal double; softmax weights are floored here so that
# no weight underflows to exactly zero at extreme temperatures.
WEIGHT_FLOOR = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class ScoringConfig:
    layout: LayoutConfig
    norm: NormMode = NormMode.KEY_GLOBAL_L2
    alpha: float | None = None
    enroll_agg: EnrollAgg = EnrollAgg.CONCAT
    method: str = "attentive"
    layer_norm: LayerNormParams | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "norm", NormMode(self.norm))
        object.__setattr__(self, "enroll_agg", EnrollAgg(self.enroll_agg))
        if self.alpha is None:
            object.__setattr__(self, "alpha", 1.0 / math.sqrt(self.layout.key_dim))
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ConfigError(f"alpha must be positive and finite, got {self.alpha}")
        if self.method not in ("attentive", "cosine"):
            raise ConfigError(f"unknown scoring method {self.method!r}")

    @property
    def tied(self) -> bool:
        return self.layout.tied


@dataclass(frozen=True)
class TestSide:
    __test__ = False  # not a pytest class

    queries: np.ndarray  # (M, d_k)
    values: np.ndarray  # (M, d_v)


@dataclass(frozen=True)
class EnrollSide:
    keys: np.ndarray  # (N, d_k)
    values: np.ndarray  # (N, d_v)


def _logits(test: TestSide, enroll: EnrollSide, alpha: float) -> np.ndarray:
    q = np.asarray(test.queries, dtype=np.float64)
    k = np.asarray(enroll.keys, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise LayoutError(f"query shape {q.shape} incompatible with key shape {k.shape}")
    return alpha * (q @ k.T)


def softmax_from_logits(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    w = e / e.sum()
    return np.maximum(w, WEIGHT_FLOOR)


def softmax_weights(test: TestSide, enroll: EnrollSide, alpha: float) -> np.ndarray:
    """Joint softmax of ``alpha * q_m . k_n`` over all M x N pairs."""
    return softmax_from_logits(_logits(test, enroll, alpha))


def _value_gram(test: TestSide, enroll: EnrollSide) -> np.ndarray:
    t = np.asarray(test.values, dtype=np.float64)
    e = np.asarray(enroll.values, dtype=np.float64)
    if t.ndim != 2 or e.ndim != 2 or t.shape[1] != e.shape[1]:
        raise LayoutError(f"test values {t.shape} incompatible with enroll values {e.shape}")
    if len(t) != len(test.queries) or len(e) != len(enroll.keys):
        raise LayoutError("query/value or key/value counts differ")
    return t @ e.T


def score_attentive(test: TestSide, enroll: EnrollSide, cfg: ScoringConfig | float) -> float:
    """Softmax-weighted sum of value dot products ``sum_mn w_mn t_m . e_n``."""
    alpha = cfg.alpha if isinstance(cfg, ScoringConfig) else float(cfg)
    w = softmax_weights(test, enroll, alpha)
    return float(np.sum(w * _value_gram(test, enroll)))


def global_norms(w: np.ndarray, test: TestSide, enroll: EnrollSide):
    """Squared norms of the stacked sqrt(w)-scaled test and enroll value vectors."""
    t2 = np.sum(np.asarray(test.values) ** 2, axis=1)
    e2 = np.sum(np.asarray(enroll.values) ** 2, axis=1)
    return float(w.sum(axis=1) @ t2), float(w.sum(axis=0) @ e2)


def score_global_l2(test: TestSide, enroll: EnrollSide, cfg: ScoringConfig | float) -> float:
    """Attentive score divided by the global norms of the weighted value stacks."""
    alpha = cfg.alpha if isinstance(cfg, ScoringConfig) else float(cfg)
    w = softmax_weights(test, enroll, alpha)
    s = float(np.sum(w * _value_gram(test, enroll)))
    a2, b2 = global_norms(w, test, enroll)
    if a2 < EPS or b2 < EPS:
        raise DegenerateVectorError("value vectors are degenerate under global normalization")
    return s / math.sqrt(a2 * b2)


def _raw(e) -> np.ndarray:
    v = e.vec if isinstance(e, PackedEmbedding) else np.asarray(e, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(v))
    if bad.size:
        raise DataError(f"non-finite entry {v.flat[bad[0]]} at coordinate {bad[0]}")
    return v


def score_cosine_baseline(test_emb, enroll_embs) -> float:
    """Cosine between the test vector and the mean of L2-normalized enrollments."""
    x = _raw(test_emb)
    ys = np.stack([_raw(e) for e in enroll_embs]) if len(enroll_embs) else None
    if ys is None:
        raise LayoutError("cosine scoring requires at least one enrollment embedding")
    if ys.shape[1] != x.shape[0]:
        raise LayoutError("test and enrollment vectors differ in length")
    centroid = l2_normalize(ys).mean(axis=0)
    return float(np.dot(l2_normalize(x), l2_normalize(centroid)))


def enrollment_vectors(enroll, cfg: ScoringConfig) -> np.ndarray:
    """Raw enrollment matrix (E, D) after applying the configured aggregation."""
    if not hasattr(enroll, "vectors"):
        enroll = build_enrollment(enroll, EnrollAgg.CONCAT)
    mat = np.asarray(enroll.vectors, dtype=np.float64)
    if cfg.enroll_agg is EnrollAgg.MEAN and len(mat) > 1:
        mat = mat.mean(axis=0, keepdims=True)
    return mat


def prepare_sides(x: np.ndarray, ys: np.ndarray, cfg: ScoringConfig):
    """Run the normalization pipeline and unpack into (TestSide, EnrollSide)."""
    lay = cfg.layout
    if cfg.norm is NormMode.LAYER:
        p = cfg.layer_norm
        x = layer_normalize(x, p)
        ys = layer_normalize(ys, p)
    q, _, t = unpack_array(x, lay)
    _, k, e = unpack_array(ys, lay)
    k = k.reshape(-1, lay.key_dim)
    e = e.reshape(-1, lay.value_dim)
    if cfg.norm in (NormMode.KV_L2, NormMode.KEY_GLOBAL_L2):
        q = l2_normalize(q)
        k = l2_normalize(k)
    if cfg.norm is NormMode.KV_L2:
        t = l2_normalize(t)
        e = l2_normalize(e)
    return TestSide(q, t), EnrollSide(k, e)


def score_trial(test_emb, enroll, cfg: ScoringConfig) -> float:
    """Score one trial: normalize, unpack, aggregate enrollment and dispatch."""
    x = check_vector(_raw(test_emb), cfg.layout)
    ys = enrollment_vectors(enroll, cfg)
    for y in ys:
        check_vector(y, cfg.layout)
    if cfg.method == "cosine":
        return score_cosine_baseline(x, list(ys))
    test, enr = prepare_sides(x, ys, cfg)
    if cfg.norm is NormMode.KEY_GLOBAL_L2:
        s = score_global_l2(test, enr, cfg)
    else:
        s = score_attentive(test, enr, cfg)
    if not math.isfinite(s):
        raise DataError("trial score is not finite")
    return s
