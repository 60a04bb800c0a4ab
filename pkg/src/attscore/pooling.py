"""Attentive temporal pooling: sigmoid-gated running weighted mean and std."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DataError, DegenerateVectorError, LayoutError
from .normalize import EPS


@dataclass(frozen=True)
class PoolingParams:
    weight_vec: np.ndarray
    weight_bias: float = 0.0


@dataclass(frozen=True)
class PoolingState:
    """Weighted moments accumulated about ``shift`` (the first frame).

    Shifting keeps the variance free of the cancellation that raw
    ``E[x^2] - E[x]^2`` suffers when the spread is small next to the mean.
    """

    cum_weight: float
    shift: np.ndarray
    cum_wd: np.ndarray  # sum of w * (x - shift)
    cum_wd2: np.ndarray  # sum of w * (x - shift)**2

    @classmethod
    def empty(cls, dim: int) -> "PoolingState":
        z = np.zeros(dim)
        return cls(0.0, z, z, z)

    @property
    def cum_wx(self) -> np.ndarray:
        return self.cum_weight * self.shift + self.cum_wd

    @property
    def cum_wx2(self) -> np.ndarray:
        k = self.shift
        return self.cum_wd2 + 2 * k * self.cum_wd + k * k * self.cum_weight


def frame_weight(frame: np.ndarray, p: PoolingParams) -> float:
    return float(expit(np.dot(p.weight_vec, frame) + p.weight_bias))


def pool_step(state: PoolingState, frame, p: PoolingParams) -> PoolingState:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != state.shift.shape:
        raise LayoutError(f"frame of shape {frame.shape}, expected {state.shift.shape}")
    if not np.all(np.isfinite(frame)):
        raise DataError("frame contains non-finite entries")
    w = frame_weight(frame, p)
    shift = frame if state.cum_weight == 0 else state.shift
    d = frame - shift
    return PoolingState(state.cum_weight + w, shift, state.cum_wd + w * d, state.cum_wd2 + w * d * d)


def pool_finalize(state: PoolingState) -> np.ndarray:
    """Concatenated ``[mean | std]`` of the frames folded so far."""
    if state.cum_weight < EPS:
        raise DegenerateVectorError("accumulated frame weight is zero")
    md = state.cum_wd / state.cum_weight
    var = np.maximum(state.cum_wd2 / state.cum_weight - md * md, 0.0)
    return np.concatenate([state.shift + md, np.sqrt(var)])


def pool_sequence(frames, p: PoolingParams, *, running: bool = False) -> np.ndarray:
    """Fold a (T, D) frame matrix; with ``running=True`` return all T prefix outputs."""
    frames = np.asarray(frames, dtype=np.float64)
    state = PoolingState.empty(frames.shape[1])
    outs = []
    for frame in frames:
        state = pool_step(state, frame, p)
        if running:
            outs.append(pool_finalize(state))
    return np.stack(outs) if running else pool_finalize(state)
