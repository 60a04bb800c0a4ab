"""Analytic gradients of the trial score and a finite-difference oracle.

Gradients are taken with respect to the raw packed test vector, each raw
enrollment vector (before any aggregation) and ``log(alpha)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .enrollment import EnrollAgg
from .errors import DataError, DegenerateVectorError
from .layout import LayoutConfig, check_vector, unpack_array
from .normalize import (
    EPS,
    NormMode,
    l2_normalize_vjp,
    layer_normalize,
    layer_normalize_vjp,
)
from .scoring import (
    ScoringConfig,
    _raw,
    enrollment_vectors,
    score_trial,
    softmax_from_logits,
)


@dataclass
class ScoreGradient:
    d_test: np.ndarray
    d_enroll: list
    d_log_alpha: float

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_test, *self.d_enroll, [self.d_log_alpha]])


def _l2(v):
    n = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    if np.any(n < EPS):
        raise DegenerateVectorError(f"vector norm below {EPS:g}")
    return v / n, n


def _raw_enroll(enroll, cfg):
    if hasattr(enroll, "vectors"):
        mat = np.asarray(enroll.vectors, dtype=np.float64)
    else:
        mat = np.stack([_raw(e) for e in enroll])
    for y in mat:
        check_vector(y, cfg.layout)
    return mat


def _cosine_grad(x, ys_raw, cfg):
    ys = ys_raw.mean(axis=0, keepdims=True) if cfg.enroll_agg is EnrollAgg.MEAN else ys_raw
    yn, ynorm = _l2(ys)
    c = yn.mean(axis=0)
    xh, xn = _l2(x)
    ch, cn = _l2(c)
    s = float(xh @ ch)
    dx = l2_normalize_vjp(xh, xn, ch)
    dc = l2_normalize_vjp(ch, cn, xh)
    dys = l2_normalize_vjp(yn, ynorm, np.broadcast_to(dc / len(ys), ys.shape))
    if cfg.enroll_agg is EnrollAgg.MEAN:
        dys = np.broadcast_to(dys / len(ys_raw), ys_raw.shape)
    return s, ScoreGradient(dx, [r.copy() for r in dys], 0.0)


def score_grad(test, enroll, cfg: ScoringConfig):
    """Return ``(score, ScoreGradient)`` for one trial."""
    lay = cfg.layout
    x = check_vector(_raw(test), lay)
    ys_raw = _raw_enroll(enroll, cfg)
    if cfg.method == "cosine":
        return _cosine_grad(x, ys_raw, cfg)

    E_raw = len(ys_raw)
    ys = ys_raw.mean(axis=0, keepdims=True) if (cfg.enroll_agg is EnrollAgg.MEAN and E_raw > 1) else ys_raw
    gain = cfg.layer_norm.gain if cfg.layer_norm is not None else None
    if cfg.norm is NormMode.LAYER:
        xl = layer_normalize(x, cfg.layer_norm)
        yl = layer_normalize(ys, cfg.layer_norm)
    else:
        xl, yl = x, ys

    q0, _, t0 = unpack_array(xl, lay)
    _, k0, e0 = unpack_array(yl, lay)
    k0 = k0.reshape(-1, lay.key_dim)
    e0 = e0.reshape(-1, lay.value_dim)
    q, k, t, e = q0, k0, t0, e0
    if cfg.norm in (NormMode.KV_L2, NormMode.KEY_GLOBAL_L2):
        q, qn = _l2(q0)
        k, kn = _l2(k0)
    if cfg.norm is NormMode.KV_L2:
        t, tn = _l2(t0)
        e, en = _l2(e0)

    alpha = cfg.alpha
    z = alpha * (q @ k.T)
    w = softmax_from_logits(z)
    G = t @ e.T
    S = float(np.sum(w * G))

    if cfg.norm is NormMode.KEY_GLOBAL_L2:
        t2 = np.sum(t * t, axis=1)
        e2 = np.sum(e * e, axis=1)
        r = w.sum(axis=1)
        c = w.sum(axis=0)
        A = float(r @ t2)
        B = float(c @ e2)
        if A < EPS or B < EPS:
            raise DegenerateVectorError("value vectors are degenerate under global normalization")
        D = math.sqrt(A * B)
        s = S / D
        dW = G / D - 0.5 * s * (t2[:, None] / A + e2[None, :] / B)
        dG = w / D
        dt = dG @ e - (s / A) * r[:, None] * t
        de = dG.T @ t - (s / B) * c[:, None] * e
    else:
        s = S
        dW = G
        dt = w @ e
        de = w.T @ t
    if not math.isfinite(s):
        raise DataError("trial score is not finite")

    dZ = w * (dW - np.sum(w * dW))
    d_log_alpha = float(np.sum(dZ * z))
    dq = alpha * (dZ @ k)
    dk = alpha * (dZ.T @ q)

    if cfg.norm in (NormMode.KV_L2, NormMode.KEY_GLOBAL_L2):
        dq = l2_normalize_vjp(q, qn, dq)
        dk = l2_normalize_vjp(k, kn, dk)
    if cfg.norm is NormMode.KV_L2:
        dt = l2_normalize_vjp(t, tn, dt)
        de = l2_normalize_vjp(e, en, de)

    qi, ki, vi = lay.slices()
    dx = np.zeros(lay.total_dim)
    np.add.at(dx, qi, dq)
    np.add.at(dx, vi, dt)
    dy = np.zeros((len(ys), lay.total_dim))
    M = lay.num_pairs
    for j in range(len(ys)):
        np.add.at(dy[j], ki, dk[j * M:(j + 1) * M])
        np.add.at(dy[j], vi, de[j * M:(j + 1) * M])

    if cfg.norm is NormMode.LAYER:
        dx = layer_normalize_vjp(x, dx, gain)
        dy = layer_normalize_vjp(ys, dy, gain)
    if len(ys) != E_raw:
        dy = np.broadcast_to(dy / E_raw, ys_raw.shape)
    return s, ScoreGradient(dx, [row.copy() for row in dy], d_log_alpha)


def reference_score(x, ys, cfg: ScoringConfig, dtype=np.longdouble):
    """Straight transcription of the scoring pipeline evaluated in ``dtype``.

    Used as the function under finite differences; float64 rounding alone
    would put an absolute floor of about 1e-10 under every difference quotient.
    """
    lay = cfg.layout
    x = np.asarray(x, dtype=dtype)
    ys = np.atleast_2d(np.asarray(ys, dtype=dtype))
    alpha = dtype(cfg.alpha)

    def l2(v):
        return v / np.sqrt(np.sum(v * v, axis=-1, keepdims=True))

    if cfg.enroll_agg is EnrollAgg.MEAN:
        ys = ys.mean(axis=0, keepdims=True)
    if cfg.method == "cosine":
        c = l2(ys).mean(axis=0)
        return np.sum(l2(x) * l2(c))
    if cfg.norm is NormMode.LAYER:
        def ln(v):
            mu = v.mean(axis=-1, keepdims=True)
            sd = np.sqrt(np.mean((v - mu) ** 2, axis=-1, keepdims=True))
            out = (v - mu) / sd
            if cfg.layer_norm is not None:
                out = out * np.asarray(cfg.layer_norm.gain, dtype=dtype) + np.asarray(cfg.layer_norm.bias, dtype=dtype)
            return out
        x, ys = ln(x), ln(ys)
    qi, ki, vi = lay.slices()
    q, t = x[qi], x[vi]
    k = ys[:, ki].reshape(-1, lay.key_dim)
    e = ys[:, vi].reshape(-1, lay.value_dim)
    if cfg.norm in (NormMode.KV_L2, NormMode.KEY_GLOBAL_L2):
        q, k = l2(q), l2(k)
    if cfg.norm is NormMode.KV_L2:
        t, e = l2(t), l2(e)
    z = alpha * np.einsum("md,nd->mn", q, k)
    w = np.exp(z - z.max())
    w = w / w.sum()
    G = np.einsum("md,nd->mn", t, e)
    s = np.sum(w * G)
    if cfg.norm is NormMode.KEY_GLOBAL_L2:
        a2 = np.sum(w.sum(axis=1) * np.sum(t * t, axis=1))
        b2 = np.sum(w.sum(axis=0) * np.sum(e * e, axis=1))
        s = s / np.sqrt(a2 * b2)
    return s


def fd_gradient(test, enroll, cfg: ScoringConfig, h: float = 1e-6,
                precision: str = "extended") -> ScoreGradient:
    """Central finite differences over every packed coordinate and log(alpha).

    ``precision="extended"`` differentiates :func:`reference_score` in long
    double; ``"double"`` differentiates :func:`score_trial` itself.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    if precision not in ("extended", "double"):
        raise ValueError(f"unknown precision {precision!r}")
    x0 = np.asarray(_raw(test), dtype=np.float64)
    ys0 = _raw_enroll(enroll, cfg)
    if precision == "extended":
        dt = np.longdouble
        x, ys = x0.astype(dt), ys0.astype(dt)

        def f(c=cfg):
            return reference_score(x, ys, c, dt)
    else:
        dt = np.float64
        x, ys = x0.copy(), ys0.copy()

        def f(c=cfg):
            return score_trial(x, _Raw(ys), c)

    hh = dt(h)

    def central(vec, idx):
        orig = vec[idx]
        vec[idx] = orig + hh
        fp = f()
        vec[idx] = orig - hh
        fm = f()
        vec[idx] = orig
        return float((fp - fm) / (2 * hh))

    dx = np.array([central(x, i) for i in range(x.size)])
    dys = [np.array([central(ys[j], i) for i in range(ys.shape[1])]) for j in range(len(ys))]
    la = math.log(cfg.alpha)
    if precision == "extended":
        la = np.log(np.longdouble(cfg.alpha))
        fp = reference_score(x, ys, replace(cfg, alpha=float(np.exp(la + hh))), dt)
        fm = reference_score(x, ys, replace(cfg, alpha=float(np.exp(la - hh))), dt)
        # alpha is rounded to float64 inside the config; use the realized step
        a_p, a_m = np.log(np.longdouble(float(np.exp(la + hh)))), np.log(np.longdouble(float(np.exp(la - hh))))
        d_la = float((fp - fm) / (a_p - a_m))
    else:
        fp = f(replace(cfg, alpha=math.exp(la + h)))
        fm = f(replace(cfg, alpha=math.exp(la - h)))
        d_la = (fp - fm) / (2 * h)
    return ScoreGradient(dx, dys, d_la)


class _Raw:
    """Minimal enrollment container holding raw rows (no copying, no checks)."""

    def __init__(self, mat):
        self.vectors = mat


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)


@dataclass(frozen=True)
class GradCheckCase:
    norm: NormMode
    tied: bool
    num_enroll: int
    worst: float
    failures: int
    instances: int

    @property
    def passed(self) -> bool:
        return self.failures == 0


def gradcheck_suite(seed: int = 0, instances: int = 100, h: float = 1e-6, tol: float = 1e-5,
                    dims=(2, 4), enroll_sizes=(1, 3)) -> list:
    """Analytic vs finite-difference gradients over every norm mode and layout.

    Block sizes are drawn from ``dims`` inclusive. One-dimensional blocks are
    excluded by default: an L2-normalized scalar block is locally constant,
    so its gradient is exactly zero and the relative error is pure FD noise.
    """
    lo, hi = dims
    out = []
    for norm in NormMode:
        for tied in (True, False):
            for E in enroll_sizes:
                worst, fails = 0.0, 0
                for i in range(instances):
                    rng = np.random.default_rng([seed, i, E, int(tied), list(NormMode).index(norm)])
                    M, dk, dv = (int(v) for v in rng.integers(lo, hi + 1, size=3))

                    cfg = ScoringConfig(LayoutConfig(M, dk, dv, tied), norm)
                    x = rng.standard_normal(cfg.layout.total_dim)
                    ys = list(rng.standard_normal((E, cfg.layout.total_dim)))
                    _, g = score_grad(x, ys, cfg)
                    f = fd_gradient(x, ys, cfg, h=h)
                    err = relative_error(g.flat(), f.flat())
                    if not np.all(np.isfinite(err)):
                        raise DataError("non-finite gradient in check suite")
                    worst = max(worst, float(err.max()))
                    fails += int(err.max() >= tol)
                out.append(GradCheckCase(norm, tied, E, worst, fails, instances))
    return out
