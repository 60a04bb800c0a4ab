"""Normalization applied before scoring: L2, utterance-level layer norm."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVectorError, LayoutError
from .layout import PackedEmbedding

EPS = 1e-12


class NormMode(str, enum.Enum):
    NONE = "none"
    LAYER = "layer"
    KV_L2 = "kv-l2"
    KEY_GLOBAL_L2 = "key-global-l2"


@dataclass(frozen=True)
class LayerNormParams:
    gain: np.ndarray
    bias: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "LayerNormParams":
        return cls(np.ones(dim), np.zeros(dim))


def l2_normalize(v, eps: float = EPS) -> np.ndarray:
    """L2-normalize along the last axis.

    Raises DegenerateVectorError if any row has norm below ``eps``.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    if np.any(norm < eps):
        raise DegenerateVectorError(f"vector norm below {eps:g}")
    return v / norm


def l2_normalize_vjp(y: np.ndarray, norm: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull ``g`` back through ``y = v / |v|`` given the output and the norms."""
    return (g - y * np.sum(y * g, axis=-1, keepdims=True)) / norm


def _layer_stats(v: np.ndarray, eps: float):
    mean = v.mean(axis=-1, keepdims=True)
    std = np.sqrt(np.mean((v - mean) ** 2, axis=-1, keepdims=True))
    if np.any(std < eps):
        raise DegenerateVectorError(f"standard deviation below {eps:g}")
    return mean, std


def layer_normalize(emb, p: LayerNormParams | None = None, eps: float = EPS):
    """Utterance-level layer normalization (population std) with gain and bias.

    Accepts a PackedEmbedding (returns one) or an array, normalized along
    the last axis.
    """
    if isinstance(emb, PackedEmbedding):
        return PackedEmbedding(emb.utterance_id, layer_normalize(emb.vec, p, eps))
    v = np.asarray(emb, dtype=np.float64)
    mean, std = _layer_stats(v, eps)
    y = (v - mean) / std
    if p is None:
        return y
    if len(p.gain) != v.shape[-1] or len(p.bias) != v.shape[-1]:
        raise LayoutError("layer norm parameters do not match vector length")
    return np.asarray(p.gain) * y + np.asarray(p.bias)


def layer_normalize_vjp(v: np.ndarray, g: np.ndarray, gain=None, eps: float = EPS) -> np.ndarray:
    """Gradient w.r.t. the input of layer normalization (bias does not matter)."""
    mean, std = _layer_stats(v, eps)
    y = (v - mean) / std
    if gain is not None:
        g = g * gain
    return (g - g.mean(axis=-1, keepdims=True) - y * np.mean(g * y, axis=-1, keepdims=True)) / std
