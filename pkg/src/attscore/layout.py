"""Packed embedding layout: packing and unpacking query/key/value blocks.

Pack order is pair-major. For pair ``m`` the block is ``[query | key | value]``
in the independent layout and ``[query | value]`` in the tied layout, where
the single query block doubles as the key. Pairs are concatenated by index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, LayoutError


@dataclass(frozen=True)
class LayoutConfig:
    num_pairs: int
    key_dim: int
    value_dim: int
    tied: bool = True

    def __post_init__(self):
        for name in ("num_pairs", "key_dim", "value_dim"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise LayoutError(f"{name} must be a positive integer, got {v!r}")

    @property
    def pair_dim(self) -> int:
        if self.tied:
            return self.key_dim + self.value_dim
        return 2 * self.key_dim + self.value_dim

    @property
    def total_dim(self) -> int:
        return self.pair_dim * self.num_pairs

    def slices(self):
        """Return ``(query, key, value)`` column index arrays into a packed vector."""
        M, dk, dv, P = self.num_pairs, self.key_dim, self.value_dim, self.pair_dim
        base = (np.arange(M) * P)[:, None]
        q = base + np.arange(dk)
        if self.tied:
            k = q
            v = base + dk + np.arange(dv)
        else:
            k = base + dk + np.arange(dk)
            v = base + 2 * dk + np.arange(dv)
        return q, k, v


@dataclass(frozen=True)
class PackedEmbedding:
    utterance_id: str
    vec: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vec, dtype=np.float64)
        if vec.ndim != 1:
            raise LayoutError("packed embedding must be one-dimensional")
        vec = vec.copy()
        vec.flags.writeable = False
        object.__setattr__(self, "vec", vec)


@dataclass(frozen=True)
class UnpackedRepresentation:
    queries: np.ndarray  # (M, d_k)
    keys: np.ndarray  # (M, d_k)
    values: np.ndarray  # (M, d_v)


def check_vector(vec, cfg: LayoutConfig) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (cfg.total_dim,):
        raise LayoutError(
            f"vector of shape {vec.shape} does not match layout total_dim {cfg.total_dim}"
        )
    bad = np.flatnonzero(~np.isfinite(vec))
    if bad.size:
        raise DataError(f"non-finite entry {vec[bad[0]]} at coordinate {bad[0]}")
    return vec


def unpack_array(vec: np.ndarray, cfg: LayoutConfig):
    """Unpack a raw vector into ``(queries, keys, values)`` arrays without checks."""
    q, k, v = cfg.slices()
    return vec[..., q], vec[..., k], vec[..., v]


def unpack(emb, cfg: LayoutConfig) -> UnpackedRepresentation:
    vec = emb.vec if isinstance(emb, PackedEmbedding) else emb
    vec = check_vector(vec, cfg)
    q, k, v = unpack_array(vec, cfg)
    return UnpackedRepresentation(queries=q, keys=k, values=v)


def pack(rep: UnpackedRepresentation, cfg: LayoutConfig, utterance_id: str = "") -> PackedEmbedding:
    M, dk, dv = cfg.num_pairs, cfg.key_dim, cfg.value_dim
    queries = np.asarray(rep.queries, dtype=np.float64)
    keys = np.asarray(rep.keys, dtype=np.float64)
    values = np.asarray(rep.values, dtype=np.float64)
    if queries.shape != (M, dk) or keys.shape != (M, dk) or values.shape != (M, dv):
        raise LayoutError(
            f"block shapes {queries.shape}, {keys.shape}, {values.shape} "
            f"do not match layout ({M}, {dk}, {dv})"
        )
    if cfg.tied and not np.array_equal(queries, keys):
        raise LayoutError("tied layout requires identical queries and keys")
    qi, ki, vi = cfg.slices()
    vec = np.empty(cfg.total_dim)
    vec[qi] = queries
    if not cfg.tied:
        vec[ki] = keys
    vec[vi] = values
    return PackedEmbedding(utterance_id, vec)
