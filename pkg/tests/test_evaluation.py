import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attscore import Trial, compute_det_points, compute_eer
from attscore.errors import EvaluationError

import oracle


def split(tar, non):
    return np.array(tar + non, float), np.array([True] * len(tar) + [False] * len(non))


def test_three_by_three_fixture():
    res = compute_eer(*split([0.8, 0.6, 0.4], [0.7, 0.5, 0.3]))
    assert res.eer == pytest.approx(1 / 3, abs=1e-15)
    assert (res.num_target, res.num_nontarget) == (3, 3)


def test_perfect_and_inverted():
    assert compute_eer(*split([0.9], [0.1])).eer == 0.0
    assert compute_eer(*split([0.1], [0.9])).eer == 1.0


def test_trial_list_input():
    scored = [(Trial("a", "x", True), 0.9), (Trial("b", "x", False), 0.2)]
    assert compute_eer(scored).eer == 0.0


def test_missing_class():
    with pytest.raises(EvaluationError):
        compute_eer(*split([0.1, 0.2], []))
    with pytest.raises(EvaluationError):
        compute_eer(*split([], [0.3]))


def test_nonfinite_score():
    with pytest.raises(EvaluationError):
        compute_eer(*split([np.nan], [0.3]))


def test_empty_trial_ids():
    with pytest.raises(EvaluationError):
        Trial("", "x", True)


def test_ties_are_pessimistic():
    # a nontarget tied with the only target is accepted at that threshold
    res = compute_eer(*split([0.5], [0.5]))
    assert res.eer == pytest.approx(0.5)


def test_det_extremes():
    pts = compute_det_points(*split([0.9], [0.1]))
    assert (0.0, 0.0) in pts
    pts = compute_det_points(*split([0.1], [0.9]))
    assert (1.0, 0.0) in pts and (0.0, 1.0) in pts


scoresets = st.tuples(st.integers(1, 300), st.integers(1, 300), st.integers(0, 2**32 - 1), st.booleans())


def draw(args):
    n_t, n_n, seed, coarse = args
    rng = np.random.default_rng(seed)
    tar = rng.normal(1.0, 1.0, n_t)
    non = rng.normal(0.0, 1.0, n_n)
    if coarse:  # force many ties
        tar, non = np.round(tar, 1), np.round(non, 1)
    return tar.tolist(), non.tolist()


@given(scoresets)
def test_matches_bruteforce_exactly(args):
    tar, non = draw(args)
    assert compute_eer(*split(tar, non)).eer == oracle.eer(tar, non)


@given(scoresets)
def test_det_matches_bruteforce(args):
    tar, non = draw(args)
    pts = compute_det_points(*split(tar, non))
    assert pts == oracle.det_points(tar, non)
    far, frr = zip(*pts)
    assert all(a >= b for a, b in zip(far, far[1:]))
    assert all(a <= b for a, b in zip(frr, frr[1:]))


@given(scoresets)
def test_invariant_to_increasing_transform(args):
    tar, non = draw(args)
    s, lab = split(tar, non)
    assert compute_eer(np.exp(s / 2) * 3 - 1, lab).eer == pytest.approx(compute_eer(s, lab).eer, abs=1e-12)


@given(scoresets)
def test_bounded(args):
    assert 0.0 <= compute_eer(*split(*draw(args))).eer <= 1.0


def test_shuffled_labels_near_half():
    rng = np.random.default_rng(0)
    s = rng.normal(size=2000)
    lab = rng.permutation(np.arange(2000) < 1000)
    assert abs(compute_eer(s, lab).eer - 0.5) < 0.1
