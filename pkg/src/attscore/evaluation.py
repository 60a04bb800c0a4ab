"""Trial bookkeeping, EER and DET computation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError


@dataclass(frozen=True)
class Trial:
    enroll_speaker_id: str
    test_utterance_id: str
    target: bool

    def __post_init__(self):
        if not self.enroll_speaker_id or not self.test_utterance_id:
            raise EvaluationError("trial ids must be non-empty")

    @property
    def label(self) -> str:
        return "tgt" if self.target else "non"


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float
    num_target: int
    num_nontarget: int


def _split(scores, labels=None):
    """Accept either (tar, non) arrays or a ScoreSet-like list of (Trial, score)."""
    if labels is None:
        scores = list(scores)
        labels = np.array([t.target for t, _ in scores], dtype=bool)
        scores = np.array([s for _, s in scores], dtype=np.float64)
    else:
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=bool)
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("scores must be finite")
    if labels.all() or not labels.any():
        raise EvaluationError("EER needs at least one target and one nontarget trial")
    return scores, labels


def operating_points(scores, labels=None):
    """FAR/FRR at every distinct score used as threshold, plus a reject-all point.

    A trial is accepted when its score is >= the threshold. Returns
    ``(thresholds, far, frr)`` with thresholds ascending (last one ``+inf``).
    """
    scores, labels = _split(scores, labels)
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    lab = labels[order]
    n_tar = int(lab.sum())
    n_non = len(lab) - n_tar
    uniq, first = np.unique(s, return_index=True)
    tar_below = np.concatenate([[0], np.cumsum(lab)])[first]
    non_below = np.concatenate([[0], np.cumsum(~lab)])[first]
    thr = np.append(uniq, np.inf)
    frr = np.append(tar_below, n_tar) / n_tar
    far = np.append(n_non - non_below, 0) / n_non
    return thr, far, frr


def eer_from_points(thr, far, frr):
    """Linear interpolation at the first point where FAR - FRR stops being positive."""
    diff = far - frr
    idx = int(np.argmax(diff <= 0))
    if diff[idx] == 0 or idx == 0:
        return float(far[idx]), float(thr[idx])
    d0, d1 = diff[idx - 1], diff[idx]
    lam = d0 / (d0 - d1)
    eer = far[idx - 1] + lam * (far[idx] - far[idx - 1])
    t0, t1 = thr[idx - 1], thr[idx]
    threshold = t0 if math.isinf(t1) else t0 + lam * (t1 - t0)
    return float(eer), float(threshold)


def compute_eer(scores, labels=None) -> EerResult:
    """Equal error rate.

    ``scores`` is either a sequence of ``(Trial, score)`` pairs or an array
    of scores with a parallel boolean ``labels`` array (True = target).
    """
    s, lab = _split(scores, labels)
    eer, threshold = eer_from_points(*operating_points(s, lab))
    return EerResult(eer, threshold, int(lab.sum()), int((~lab).sum()))


def compute_det_points(scores, labels=None):
    """Staircase of (FAR, FRR) pairs ordered by increasing threshold."""
    _, far, frr = operating_points(scores, labels)
    return list(zip(far.tolist(), frr.tolist()))
