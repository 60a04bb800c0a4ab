"""Vectorized scoring of many tests against many speaker models, with backprop.

Speaker model ``s`` is built from enrollment rows ``members[s]`` of a pool
``Y``; ``exclude[i, s, u]`` drops member ``u`` of model ``s`` for test ``i``
(leave-one-out during training). Results match :func:`scoring.score_trial`
trial by trial; the tests check this.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .enrollment import EnrollAgg
from .errors import DataError, DegenerateVectorError
from .normalize import EPS, NormMode
from .scoring import WEIGHT_FLOOR, ScoringConfig

# Target size (elements) of the per-chunk (tests, M, S, L) attention tensor.
CHUNK_ELEMS = 1 << 21


def _l2(v):
    n = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    if np.any(n < EPS):
        raise DegenerateVectorError(f"vector norm below {EPS:g}")
    return v / n, n


def _l2_vjp(y, n, g):
    return (g - y * np.sum(y * g, axis=-1, keepdims=True)) / n


def _ln(v, gain, bias):
    mu = v.mean(axis=-1, keepdims=True)
    sd = np.sqrt(np.mean((v - mu) ** 2, axis=-1, keepdims=True))
    if np.any(sd < EPS):
        raise DegenerateVectorError(f"standard deviation below {EPS:g}")
    yhat = (v - mu) / sd
    out = yhat if gain is None else yhat * gain + bias
    return out, (yhat, sd)


def _ln_vjp(cache, g, gain):
    yhat, sd = cache
    gh = g if gain is None else g * gain
    dx = (gh - gh.mean(axis=-1, keepdims=True) - yhat * np.mean(gh * yhat, axis=-1, keepdims=True)) / sd
    red = tuple(range(g.ndim - 1))
    return dx, np.sum(g * yhat, axis=red), np.sum(g, axis=red)


@dataclass
class BatchGrad:
    d_test: np.ndarray
    d_enroll: np.ndarray
    d_log_alpha: float
    d_gain: np.ndarray | None = None
    d_bias: np.ndarray | None = None


class _Side:
    """Normalization pipeline for one side; remembers what backward needs."""

    def __init__(self, raw, cfg: ScoringConfig, role: str):
        lay = cfg.layout
        self.cfg = cfg
        self.role = role
        self.raw_shape = raw.shape
        p = cfg.layer_norm
        self.gain = None if p is None else np.asarray(p.gain)
        self.bias = None if p is None else np.asarray(p.bias)
        self.ln_cache = None
        v = raw
        if cfg.norm is NormMode.LAYER:
            v, self.ln_cache = _ln(raw, self.gain, self.bias)
        qi, ki, vi = lay.slices()
        self.idx_qk = qi if role == "test" else ki
        self.idx_v = vi
        qk = v[..., self.idx_qk]
        val = v[..., self.idx_v]
        self.qk_cache = self.v_cache = None
        if cfg.norm in (NormMode.KV_L2, NormMode.KEY_GLOBAL_L2):
            qk, n = _l2(qk)
            self.qk_cache = (qk, n)
        if cfg.norm is NormMode.KV_L2:
            val, n = _l2(val)
            self.v_cache = (val, n)
        self.qk = qk
        self.val = val

    def backward(self, d_qk, d_val):
        if self.qk_cache is not None:
            d_qk = _l2_vjp(*self.qk_cache, d_qk)
        if self.v_cache is not None:
            d_val = _l2_vjp(*self.v_cache, d_val)
        d = np.zeros(self.raw_shape)
        flat = d.reshape(-1, d.shape[-1])
        rows = np.arange(flat.shape[0])[:, None, None]
        np.add.at(flat, (rows, self.idx_qk[None]), d_qk.reshape(flat.shape[0], *self.idx_qk.shape))
        np.add.at(flat, (rows, self.idx_v[None]), d_val.reshape(flat.shape[0], *self.idx_v.shape))
        dg = db = None
        if self.ln_cache is not None:
            d, dg, db = _ln_vjp(self.ln_cache, d, self.gain)
        return d, dg, db


def _pair_products(A, B):
    """``A @ B^T`` per test; a shared ``B`` (leading dim 1) goes through one 2-D BLAS call."""
    if B.shape[0] == 1:
        c, m, d = A.shape
        return (A.reshape(c * m, d) @ np.ascontiguousarray(B[0]).T).reshape(c, m, -1)
    return np.matmul(A, B.swapaxes(1, 2))


class BatchScorer:
    """Scores ``X[i]`` against every speaker model; call :meth:`backward` once."""

    def __init__(self, X, Y, members, cfg: ScoringConfig, exclude=None, keep: bool = False):
        self.cfg = cfg
        self.keep = keep
        self.X = np.asarray(X, dtype=np.float64)
        self.Y = np.asarray(Y, dtype=np.float64)
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.Y))):
            raise DataError("non-finite embedding in batch")
        self.members = np.asarray(members)
        S, U = self.members.shape
        Bt = len(self.X)
        if exclude is None:
            exclude = np.zeros((1, S, U), dtype=bool)
        self.exclude = np.asarray(exclude, dtype=bool)
        incl = ~self.exclude
        self.counts = incl.sum(axis=2)  # (Bt|1, S)
        if np.any(self.counts == 0):
            raise DegenerateVectorError("speaker model with no enrollment utterances")
        self.Bt, self.S, self.U = Bt, S, U
        if cfg.method == "cosine":
            self._forward_cosine()
        else:
            self._forward_attentive()

    # cosine baseline --------------------------------------------------
    def _member_mean(self, rows):
        """Masked mean over members: rows (Be, D) -> (Bt|1, S, D)."""
        incl = (~self.exclude).astype(np.float64)
        g = rows[self.members]  # (S, U, D)
        return np.einsum("isu,sud->isd", incl, g) / self.counts[..., None]

    def _forward_cosine(self):
        mean_first = self.cfg.enroll_agg is EnrollAgg.MEAN
        Yn, Ynn = _l2(self.Y)
        self.Yn_cache = (Yn, Ynn)
        src = self.Y if mean_first else Yn
        c = self._member_mean(src)
        if mean_first:
            # a single averaged vector: normalize it, then the usual centroid norm
            c, n1 = _l2(c)
            self.cn_cache = (c, n1)
        ch, cn = _l2(c)
        xh, xn = _l2(self.X)
        self.cos_cache = (xh, xn, ch, cn)
        self.scores = np.einsum("id,isd->is", xh, np.broadcast_to(ch, (self.Bt, self.S, ch.shape[-1])))

    def _backward_cosine(self, dS):
        xh, xn, ch, cn = self.cos_cache
        chb = np.broadcast_to(ch, (self.Bt, self.S, ch.shape[-1]))
        dxh = np.einsum("is,isd->id", dS, chb)
        dch = dS[..., None] * xh[:, None, :]
        if ch.shape[0] == 1 and self.Bt > 1:
            dch = dch.sum(axis=0, keepdims=True)
        dX = _l2_vjp(xh, xn, dxh)
        dc = _l2_vjp(ch, cn, dch)
        if self.cfg.enroll_agg is EnrollAgg.MEAN:
            dc = _l2_vjp(*self.cn_cache, dc)
        incl = (~self.exclude).astype(np.float64)
        dg = np.einsum("isu,isd->sud", incl, dc / self.counts[..., None])
        dsrc = np.zeros_like(self.Y)
        np.add.at(dsrc, self.members, dg)
        if self.cfg.enroll_agg is EnrollAgg.MEAN:
            dY = dsrc
        else:
            dY = _l2_vjp(*self.Yn_cache, dsrc)
        return BatchGrad(dX, dY, 0.0)

    # attentive -------------------------------------------------------------
    def _forward_attentive(self):
        cfg, lay = self.cfg, self.cfg.layout
        M = lay.num_pairs
        self.mean_mode = cfg.enroll_agg is EnrollAgg.MEAN and self.U > 1
        self.tside = _Side(self.X, cfg, "test")
        if self.mean_mode:
            ybar = self._member_mean(self.Y)  # (Bt|1, S, D)
            self.eside = _Side(ybar, cfg, "enroll")
            K = self.eside.qk  # (Bt|1, S, M, dk)
            V = self.eside.val
            self.K = K.reshape(K.shape[0], self.S, M, -1)
            self.V = V.reshape(V.shape[0], self.S, M, -1)
            self.mask = np.ones((1, self.S, M), dtype=bool)
        else:
            self.eside = _Side(self.Y, cfg, "enroll")
            K = self.eside.qk[self.members]  # (S, U, M, dk)
            V = self.eside.val[self.members]
            self.K = K.reshape(1, self.S, self.U * M, -1)
            self.V = V.reshape(1, self.S, self.U * M, -1)
            self.mask = np.repeat(~self.exclude, M, axis=2)  # (Bt|1, S, U*M)
        L = self.K.shape[2]
        self.chunk = max(1, CHUNK_ELEMS // (M * self.S * L))
        self.alpha = cfg.alpha
        self.global_norm = cfg.norm is NormMode.KEY_GLOBAL_L2
        self.scores = np.empty((self.Bt, self.S))
        self._cache = {}
        for a in range(0, self.Bt, self.chunk):
            b = min(a + self.chunk, self.Bt)
            res = self._chunk_forward(a, b)
            self.scores[a:b] = res[0]
            if self.keep:
                self._cache[a] = res
        if not np.all(np.isfinite(self.scores)):
            raise DataError("non-finite scores in batch")

    def _sel(self, arr, a, b):
        return arr if arr.shape[0] == 1 else arr[a:b]

    def _flat(self, arr, a, b):
        """Enrollment block for tests a:b as (c|1, S*L, d)."""
        x = self._sel(arr, a, b)
        return x.reshape(x.shape[0], -1, x.shape[-1])

    def _chunk_forward(self, a, b):
        c = b - a
        S = self.S
        Q = self.tside.qk[a:b]
        T = self.tside.val[a:b]
        K = self._flat(self.K, a, b)
        V = self._flat(self.V, a, b)
        L = self.K.shape[2]
        mask = self._sel(self.mask, a, b)[:, None]  # (c|1, 1, S, L)
        Z = (self.alpha * _pair_products(Q, K)).reshape(c, -1, S, L)
        full = bool(mask.all())
        Zm = Z if full else np.where(mask, Z, -np.inf)
        W = Zm - Zm.max(axis=(1, 3), keepdims=True)
        np.exp(W, out=W)
        W /= W.sum(axis=(1, 3), keepdims=True)
        np.maximum(W, WEIGHT_FLOOR, out=W)
        if not full:
            W[~np.broadcast_to(mask, W.shape)] = 0.0
        G = _pair_products(T, V).reshape(c, -1, S, L)
        Sat = np.einsum("imsl,imsl->is", W, G)
        extra = None
        if self.global_norm:
            t2 = np.sum(T * T, axis=-1)  # (c, M)
            e2 = np.sum(self._sel(self.V, a, b) ** 2, axis=-1)  # (c|1, S, L)
            r = W.sum(axis=3)  # (c, M, S)
            cc = W.sum(axis=1)  # (c, S, L)
            A = np.einsum("ims,im->is", r, t2)
            B = np.sum(cc * e2, axis=2)
            if np.any(A < EPS) or np.any(B < EPS):
                raise DegenerateVectorError("value vectors are degenerate under global normalization")
            D = np.sqrt(A * B)
            out = Sat / D
            extra = (t2, e2, r, cc, A, B, D)
        else:
            out = Sat
        return out, (Z, W, G, extra)

    def _chunk_backward(self, a, b, dS, cached=None):
        s, (Z, W, G, extra) = cached if cached is not None else self._chunk_forward(a, b)
        c, M, S, L = W.shape
        Q = self.tside.qk[a:b]
        T = self.tside.val[a:b]
        K = self._flat(self.K, a, b)
        V = self._flat(self.V, a, b)
        dS4 = dS[:, None, :, None]
        if extra is None:
            dW = dS4 * G
            dG = dS4 * W
        else:
            t2, e2, r, cc, A, B, D = extra
            coef = (dS / D)[:, None, :, None]
            half = 0.5 * dS * s
            dW = G * coef
            dW -= (half / A)[:, None, :, None] * t2[:, :, None, None]
            dW -= (half / B)[:, None, :, None] * e2[:, None]
            dG = W * coef
        dZ = W * dW
        dZ -= W * dZ.sum(axis=(1, 3), keepdims=True)
        dla = float(np.vdot(dZ, Z))
        dZf = dZ.reshape(c, M, S * L)
        dGf = dG.reshape(c, M, S * L)
        if K.shape[0] == 1:
            dQ = self.alpha * (dZf.reshape(c * M, -1) @ K[0]).reshape(c, M, -1)
            dT = (dGf.reshape(c * M, -1) @ V[0]).reshape(c, M, -1)
            dK = self.alpha * (dZf.reshape(c * M, -1).T @ Q.reshape(c * M, -1))[None]
            dV = (dGf.reshape(c * M, -1).T @ T.reshape(c * M, -1))[None]
        else:
            dQ = self.alpha * np.matmul(dZf, K)
            dT = np.matmul(dGf, V)
            dK = self.alpha * np.matmul(dZf.swapaxes(1, 2), Q)
            dV = np.matmul(dGf.swapaxes(1, 2), T)
        dK = dK.reshape(dK.shape[0], S, L, -1)
        dV = dV.reshape(dV.shape[0], S, L, -1)
        if extra is not None:
            dT -= np.einsum("is,ims->im", dS * s / A, r)[..., None] * T
            wcc = (dS * s / B)[..., None] * cc  # (c, S, L)
            if dV.shape[0] == 1:
                wcc = wcc.sum(axis=0, keepdims=True)
            dV -= wcc[..., None] * self._sel(self.V, a, b)
        return dQ, dT, dK, dV, dla

    def backward(self, dS) -> BatchGrad:
        dS = np.asarray(dS, dtype=np.float64)
        if self.cfg.method == "cosine":
            return self._backward_cosine(dS)
        M = self.cfg.layout.num_pairs
        dQ = np.zeros_like(self.tside.qk)
        dT = np.zeros_like(self.tside.val)
        dK = np.zeros_like(self.K)
        dV = np.zeros_like(self.V)
        dla = 0.0
        for a in range(0, self.Bt, self.chunk):
            b = min(a + self.chunk, self.Bt)
            q, t, k, v, la = self._chunk_backward(a, b, dS[a:b], self._cache.pop(a, None))
            dQ[a:b] = q
            dT[a:b] = t
            if self.K.shape[0] == 1:
                dK += k
                dV += v
            else:
                dK[a:b] = k
                dV[a:b] = v
            dla += la
        dX, dg1, db1 = self.tside.backward(dQ, dT)
        if self.mean_mode:
            dk_e = dK.reshape(self.eside.qk.shape)
            dv_e = dV.reshape(self.eside.val.shape)
            dYbar, dg2, db2 = self.eside.backward(dk_e, dv_e)
            incl = (~self.exclude).astype(np.float64)
            dg = np.einsum("isu,isd->sud", incl, dYbar / self.counts[..., None])
            dY = np.zeros_like(self.Y)
            np.add.at(dY, self.members, dg)
        else:
            dk_e = np.zeros_like(self.eside.qk)
            dv_e = np.zeros_like(self.eside.val)
            np.add.at(dk_e, self.members, dK.reshape(self.S, self.U, M, -1))
            np.add.at(dv_e, self.members, dV.reshape(self.S, self.U, M, -1))
            dY, dg2, db2 = self.eside.backward(dk_e, dv_e)
        d_gain = d_bias = None
        if dg1 is not None:
            d_gain, d_bias = dg1 + dg2, db1 + db2
        return BatchGrad(dX, dY, dla, d_gain, d_bias)
