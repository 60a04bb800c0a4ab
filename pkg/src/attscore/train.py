"""Desk-scale trainer: linear projection of synthetic latents into packed
embeddings, optimized with a leave-one-out softmax over batch speakers.

The loss is a simplified stand-in for the generalized end-to-end
extended-set softmax; it is not a reproduction of that loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_softmax, softmax

from .batched import BatchScorer
from .errors import ConfigError, TrainingDivergedError, ValidationError
from .normalize import LayerNormParams, NormMode
from .scoring import ScoringConfig
from .synth import SynthDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatchSpec:
    speakers_per_batch: int = 16
    utts_per_batch_speaker: int = 8

    def __post_init__(self):
        if self.speakers_per_batch < 2:
            raise ConfigError("a batch needs at least two speakers")
        if self.utts_per_batch_speaker < 2:
            raise ConfigError("leave-one-out needs at least two utterances per speaker")


@dataclass
class ToyModel:
    projection: np.ndarray  # (total_dim, latent_dim)
    log_alpha: float
    log_scale: float = math.log(10.0)
    ln_gain: np.ndarray | None = None
    ln_bias: np.ndarray | None = None
    offset: np.ndarray | None = None  # (total_dim,) projection bias

    @classmethod
    def init(cls, latent_dim: int, cfg: ScoringConfig, seed: int = 0,
             out_dim: int | None = None, key_offset: float = 0.0) -> "ToyModel":
        """Random projection; ``key_offset`` > 0 gives every query/key block a
        constant random direction of that norm, so pairs start out matched
        to themselves."""
        rng = np.random.default_rng(seed)
        D = out_dim or cfg.layout.total_dim
        P = rng.standard_normal((D, latent_dim)) / math.sqrt(latent_dim)
        offset = np.zeros(D)
        if key_offset > 0 and cfg.method == "attentive":
            qi, ki, _ = cfg.layout.slices()
            dirs = rng.standard_normal(qi.shape)
            dirs *= key_offset / np.linalg.norm(dirs, axis=1, keepdims=True)
            offset[qi] = dirs
            offset[ki] = dirs
        gain = bias = None
        if cfg.norm is NormMode.LAYER:
            gain, bias = np.ones(D), np.zeros(D)
        return cls(P, math.log(cfg.alpha), math.log(10.0), gain, bias, offset)

    def copy(self) -> "ToyModel":
        cp = lambda a: None if a is None else np.array(a)  # noqa: E731
        return ToyModel(self.projection.copy(), self.log_alpha, self.log_scale,
                        cp(self.ln_gain), cp(self.ln_bias), cp(self.offset))

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def scoring_config(self, cfg: ScoringConfig, **overrides) -> ScoringConfig:
        ln = None
        if self.ln_gain is not None:
            ln = LayerNormParams(self.ln_gain, self.ln_bias)
        return replace(cfg, alpha=self.alpha, layer_norm=ln, **overrides)

    def embed(self, latents) -> np.ndarray:
        out = np.asarray(latents, dtype=np.float64) @ self.projection.T
        if self.offset is not None:
            out = out + self.offset
        return out

    def parameters(self) -> dict:
        out = {"projection": self.projection, "log_alpha": np.array([self.log_alpha]),
               "log_scale": np.array([self.log_scale])}
        if self.offset is not None:
            out["offset"] = self.offset
        if self.ln_gain is not None:
            out["ln_gain"] = self.ln_gain
            out["ln_bias"] = self.ln_bias
        return out


def ge2e_xs_loss(scores, labels, scale: float = 1.0) -> float:
    """Mean over utterances of ``-log softmax(scale * scores)[true speaker]``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValidationError("loss needs scores against at least two speakers")
    lp = log_softmax(scale * scores, axis=1)
    return float(-np.mean(lp[np.arange(len(labels)), labels]))


def ge2e_xs_loss_grad(scores, labels, scale: float):
    """Loss, d loss / d scores and d loss / d log(scale)."""
    scores = np.asarray(scores, dtype=np.float64)
    n = len(labels)
    logits = scale * scores
    p = softmax(logits, axis=1)
    lp = log_softmax(logits, axis=1)
    loss = float(-np.mean(lp[np.arange(n), labels]))
    d_logits = p.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    return loss, scale * d_logits, float(np.sum(d_logits * logits))


def lr_at(step: int, total: int, base_lr: float, warmup_frac: float = 0.05) -> float:
    """Linear warm-up then inverse square-root decay."""
    warm = max(1, int(round(warmup_frac * total)))
    t = step + 1
    return base_lr * min(t / warm, math.sqrt(warm / t))


def batch_loss_and_grad(model: ToyModel, latents, cfg: ScoringConfig, n_spk: int, n_utt: int):
    """Loss and parameter gradients for a speaker-major batch of latents."""
    X = model.embed(latents)
    members = np.arange(n_spk * n_utt).reshape(n_spk, n_utt)
    exclude = np.zeros((n_spk * n_utt, n_spk, n_utt), dtype=bool)
    exclude[np.arange(n_spk * n_utt), np.repeat(np.arange(n_spk), n_utt), np.tile(np.arange(n_utt), n_spk)] = True
    scfg = model.scoring_config(cfg)
    scorer = BatchScorer(X, X, members, scfg, exclude, keep=True)
    labels = np.repeat(np.arange(n_spk), n_utt)
    scale = math.exp(model.log_scale)
    loss, dS, d_log_scale = ge2e_xs_loss_grad(scorer.scores, labels, scale)
    g = scorer.backward(dS)
    dX = g.d_test + g.d_enroll
    grads = {
        "projection": dX.T @ np.asarray(latents),
        "log_alpha": np.array([g.d_log_alpha if cfg.method != "cosine" else 0.0]),
        "log_scale": np.array([d_log_scale]),
    }
    if model.offset is not None:
        grads["offset"] = dX.sum(axis=0)
    if model.ln_gain is not None:
        grads["ln_gain"] = g.d_gain
        grads["ln_bias"] = g.d_bias
    return loss, grads


@dataclass
class TrainResult:
    model: ToyModel
    losses: list = field(default_factory=list)


def _finite(model: ToyModel) -> bool:
    # exp(log_alpha) and exp(log_scale) must stay finite too
    logs = (model.log_alpha, model.log_scale)
    return all(math.isfinite(v) and v < 700 for v in logs) and all(
        np.all(np.isfinite(a)) for a in model.parameters().values())


def _param_arrays(model: ToyModel, with_alpha: bool) -> dict:
    out = {"projection": model.projection, "log_scale": None}
    if with_alpha:
        out["log_alpha"] = None
    if model.offset is not None:
        out["offset"] = model.offset
    if model.ln_gain is not None:
        out["ln_gain"] = model.ln_gain
        out["ln_bias"] = model.ln_bias
    return out


def _apply(model: ToyModel, name: str, delta):
    if name in ("log_alpha", "log_scale"):
        setattr(model, name, getattr(model, name) - float(np.asarray(delta).reshape(-1)[0]))
    else:
        getattr(model, name)[...] -= delta


def train(model: ToyModel, dataset: SynthDataset, cfg: ScoringConfig, batch: BatchSpec,
          steps: int = 500, lr: float = 0.5, seed: int = 0, warmup_frac: float = 0.05,
          train_alpha: bool = True, optimizer: str = "sgd",
          betas: tuple = (0.9, 0.999), adam_eps: float = 1e-8) -> TrainResult:
    """Gradient descent over random speaker-major mini-batches.

    ``optimizer`` is ``"sgd"`` (plain, momentum-free) or ``"adam"``; both use
    the warm-up / inverse-square-root schedule of :func:`lr_at`. The loss
    trace holds the pre-update loss of every step.
    """
    if optimizer not in ("sgd", "adam"):
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    spk_utts = dataset.by_speaker()
    n_spk_total, n_utt_total = spk_utts.shape
    S, U = batch.speakers_per_batch, batch.utts_per_batch_speaker
    if n_spk_total < S:
        raise ValidationError(f"dataset has {n_spk_total} speakers, batch needs {S}")
    if n_utt_total < U:
        raise ValidationError(f"dataset has {n_utt_total} utterances per speaker, batch needs {U}")
    rng = np.random.default_rng(seed)
    model = model.copy()
    result = TrainResult(model)
    trainable = _param_arrays(model, train_alpha and cfg.method != "cosine")
    moments = {k: [0.0, 0.0] for k in trainable}
    for step in range(steps):
        spk = rng.choice(n_spk_total, size=S, replace=False)
        utt = np.stack([rng.choice(n_utt_total, size=U, replace=False) for _ in range(S)])
        idx = spk_utts[spk[:, None], utt].reshape(-1)
        loss, grads = batch_loss_and_grad(model, dataset.latents[idx], cfg, S, U)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergedError(f"non-finite loss or gradient at step {step} (loss={loss})")
        result.losses.append(loss)
        eta = lr_at(step, steps, lr, warmup_frac)
        for name in trainable:
            g = grads[name]
            if optimizer == "adam":
                m, v = moments[name]
                m = betas[0] * m + (1 - betas[0]) * g
                v = betas[1] * v + (1 - betas[1]) * g * g
                moments[name] = [m, v]
                mh = m / (1 - betas[0] ** (step + 1))
                vh = v / (1 - betas[1] ** (step + 1))
                _apply(model, name, eta * mh / (np.sqrt(vh) + adam_eps))
            else:
                _apply(model, name, eta * g)
        if not _finite(model):
            raise TrainingDivergedError(f"parameters left the representable range at step {step}")
        if step % 100 == 0:
            log.debug("step %d loss %.5f alpha %.4f scale %.3f", step, loss, model.alpha,
                      math.exp(model.log_scale))
    return result
