import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attscore import (
    EnrollAgg,
    LayoutConfig,
    NormMode,
    PackedEmbedding,
    ScoringConfig,
    build_enrollment,
    enrollment_footprint,
    score_trial,
)
from attscore.errors import DataError, LayoutError, ValidationError

PRODUCTION = LayoutConfig(8, 32, 256)


def test_footprints_at_production_dims():
    embs = [np.ones(PRODUCTION.total_dim)] * 6
    concat = build_enrollment(embs, EnrollAgg.CONCAT)
    mean = build_enrollment(embs, EnrollAgg.MEAN)
    assert enrollment_footprint(concat) == 13824
    assert concat.material.shape == (6, 2304)
    assert concat.vectors.shape[0] * PRODUCTION.num_pairs == 48  # keys seen by the scorer
    assert enrollment_footprint(mean) == 2304
    assert enrollment_footprint(build_enrollment(embs[:1])) == PRODUCTION.total_dim


def test_mean_of_identical_is_common_embedding():
    v = np.arange(5.0)
    m = build_enrollment([PackedEmbedding(str(i), v) for i in range(3)], "mean", "spk")
    assert m.speaker_id == "spk" and m.num_utts == 3
    assert np.array_equal(m.vectors[0], v)


def test_single_utterance_modes_score_alike():
    rng = np.random.default_rng(5)
    lay = LayoutConfig(3, 2, 4)
    x, y = rng.normal(size=(2, lay.total_dim))
    for norm in NormMode:
        a = score_trial(x, build_enrollment([y], "concat"), ScoringConfig(lay, norm))
        b = score_trial(x, build_enrollment([y], "mean"), ScoringConfig(lay, norm, enroll_agg="mean"))
        assert a == b == score_trial(x, [y], ScoringConfig(lay, norm))


def test_material_is_immutable():
    m = build_enrollment([np.zeros(3)])
    with pytest.raises(ValueError):
        m.material[0, 0] = 1.0


def test_empty_enrollment():
    with pytest.raises(ValidationError):
        build_enrollment([])


def test_mismatched_lengths():
    with pytest.raises(LayoutError):
        build_enrollment([np.zeros(3), np.zeros(4)])


def test_layout_checked_when_given():
    with pytest.raises(LayoutError):
        build_enrollment([np.zeros(3)], layout=LayoutConfig(1, 1, 1))
    with pytest.raises(DataError):
        build_enrollment([np.array([0.0, np.nan])], layout=LayoutConfig(1, 1, 1))


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_mean_is_order_invariant(E, D, seed):
    rng = np.random.default_rng(seed)
    ys = rng.normal(size=(E, D))
    a = build_enrollment(ys, "mean").vectors
    b = build_enrollment(ys[rng.permutation(E)], "mean").vectors
    assert np.allclose(a, b, rtol=0, atol=1e-12)


@given(st.integers(1, 5), st.booleans(), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_footprint_formula(M, tied, E, seed):
    lay = LayoutConfig(M, 3, 5, tied)
    ys = np.random.default_rng(seed).normal(size=(E, lay.total_dim))
    per = (3 if tied else 6) + 5
    assert enrollment_footprint(build_enrollment(ys, "concat")) == M * E * per
    assert enrollment_footprint(build_enrollment(ys, "mean")) == M * per
