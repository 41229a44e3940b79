import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentmap.compression import pca_fit
from latentmap.inference import (
    UNDEFINED,
    CovarianceUndefinedError,
    ExpectationUndefinedError,
    InsufficientEvidenceError,
    MarginalEvidenceWarning,
    QueryDictionary,
    UndecodableError,
    covariance_diag_batch,
    d_optimality_batch,
    decode_categories,
    decode_category,
    e_optimality_batch,
    posterior_predictive,
    predictive_covariance_diag,
    predictive_expectation,
    sample_features,
    sampling_score_variances,
    uncertainty_d_optimality,
    uncertainty_e_optimality,
    uncertainty_sampling,
    uncertainty_sort_key,
)
from latentmap.latent_map import VoxelState

# Covariance factor at lam = 4: (4 / 2) * (5 / 16).
F4 = 0.625


def state(mu, psi, lam):
    return VoxelState(np.asarray(mu, float), np.asarray(psi, float), float(lam))


def test_posterior_predictive_example():
    p = posterior_predictive(state([1.0], [4.0], 2.0))
    np.testing.assert_allclose(p.scale_diag, [3.0])
    assert p.dof == 2.0 and not p.low_confidence


def test_posterior_predictive_large_lambda_limit():
    lam = 1e8
    p = posterior_predictive(state([0.0], [3.0 * lam], lam))
    np.testing.assert_allclose(p.scale_diag, [3.0], rtol=1e-7)


def test_posterior_predictive_prior_voxel():
    p = posterior_predictive(state([0.0, 0.0], [1e-6, 1e-6], 1e-3))
    assert p.low_confidence
    assert np.all(np.isfinite(p.scale_diag))
    with pytest.raises(InsufficientEvidenceError):
        posterior_predictive(state([0.0], [1.0], 0.0))


def test_predictive_expectation():
    m = np.array([0.3, -2.0])
    np.testing.assert_array_equal(predictive_expectation(state(m, [1, 1], 5.0)), m)
    with pytest.raises(ExpectationUndefinedError):
        predictive_expectation(state(m, [1, 1], 0.5))
    with pytest.warns(MarginalEvidenceWarning):
        np.testing.assert_array_equal(predictive_expectation(state(m, [1, 1], 1 + 1e-9)), m)


def test_predictive_covariance():
    np.testing.assert_allclose(predictive_covariance_diag(state([0], [8.0], 4.0)), [5.0])
    with pytest.raises(CovarianceUndefinedError):
        predictive_covariance_diag(state([0], [8.0], 2.0))
    np.testing.assert_array_equal(predictive_covariance_diag(state([0], [0.0], 4.0)), [0.0])


def test_decode_self_similarity_and_scale():
    d = QueryDictionary(["a", "b", "c"], np.array([[1.0, 0, 0], [0, 2.0, 0], [1.0, 1.0, 1.0]]))
    pred = decode_category(state([0, 2.0, 0], [1, 1, 1], 5), d)
    assert pred.category == 1 and pred.score == pytest.approx(1.0)
    for c in (1e-3, 7.0):
        p2 = decode_category(state(np.array([0.3, 0.9, -0.2]) * c, [1, 1, 1], 5), d)
        p1 = decode_category(state([0.3, 0.9, -0.2], [1, 1, 1], 5), d)
        assert p2.category == p1.category and p2.score == pytest.approx(p1.score)


def test_decode_orthogonal_pair():
    d = QueryDictionary(["x", "y"], np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    mu = [0.8, 0.3, 0.5]
    # Brute-force cosine: 0.8 / |mu| vs 0.3 / |mu|.
    norm = math.sqrt(0.64 + 0.09 + 0.25)
    p = decode_category(state(mu, [1, 1, 1], 3), d)
    assert p.category == 0 and p.score == pytest.approx(0.8 / norm)


def test_decode_ties_go_to_lowest_index():
    d = QueryDictionary(["a", "b"], np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert decode_category(state([2.0, 0.1], [1, 1], 3), d).category == 0


def test_decode_errors():
    d = QueryDictionary(["a"], np.array([[1.0, 0.0]]))
    with pytest.raises(UndecodableError):
        decode_category(state([0.0, 0.0], [1, 1], 3), d)
    with pytest.raises(ExpectationUndefinedError):
        decode_category(state([1.0, 0.0], [1, 1], 0.9), d)
    with pytest.raises(ValueError):
        decode_category(state([1.0, 0.0, 0.0], [1, 1, 1], 3), d)


def test_dictionary_validation():
    with pytest.raises(ValueError):
        QueryDictionary(["a", "b"], np.ones((1, 3)))
    with pytest.raises(ValueError):
        QueryDictionary(["a"], np.zeros((1, 3)))
    with pytest.raises(KeyError):
        QueryDictionary(["a"], np.ones((1, 3))).index("b")


def test_decode_with_pca_lift(rng):
    anchors = np.eye(8)[:3] * 2.0
    corpus = np.repeat(anchors, 50, axis=0) + rng.normal(scale=0.05, size=(150, 8))
    t = pca_fit(corpus, 4)
    d = QueryDictionary(["a", "b", "c"], anchors)
    for c in range(3):
        z = t.encode(anchors[c])
        assert decode_category(state(z, np.ones(4), 5), d, lift=t).category == c


def test_lift_of_mean_equals_mean_of_lift(rng):
    t = pca_fit(rng.normal(size=(200, 12)), 5)
    s = state(rng.normal(size=5), np.full(5, 0.2), 50.0)
    samples = sample_features(s, 20_000, 3)
    # decode is affine, so averaging commutes with it exactly (up to rounding).
    np.testing.assert_allclose(t.decode(samples).mean(0), t.decode(samples.mean(0)), atol=1e-9)


def test_sampling_degenerate_scale():
    s = state([1.0, -2.0], [0.0, 0.0], 4.0)
    np.testing.assert_array_equal(sample_features(s, 50, 0), np.tile([1.0, -2.0], (50, 1)))
    assert sample_features(s, 0, 0).shape == (0, 2)


def test_sampling_reproducible():
    s = state([0.0, 1.0, 2.0], [1.0, 2.0, 3.0], 3.5)
    np.testing.assert_array_equal(sample_features(s, 100, 42), sample_features(s, 100, 42))
    assert not np.array_equal(sample_features(s, 100, 42), sample_features(s, 100, 43))


def test_sampling_moments_small():
    s = state([0.5, -1.0], [2.0, 0.5], 10.0)
    n = 200_000
    x = sample_features(s, n, 7)
    cov = predictive_covariance_diag(s)
    se = np.sqrt(cov / n)
    assert np.all(np.abs(x.mean(0) - s.mu) < 3 * se)
    np.testing.assert_allclose(x.var(0), cov, rtol=0.05)


DICT = QueryDictionary(["a", "b", "c"], np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]))


def test_uncertainty_sampling_properties():
    mu = [0.9, 0.3, 0.1]
    assert uncertainty_sampling(state(mu, [0, 0, 0], 5), DICT, 200, rng_seed=0) == 0.0
    assert uncertainty_sampling(state(mu, [1, 1, 1], 5), DICT, 1, rng_seed=0) == 0.0
    lo = uncertainty_sampling(state(mu, [0.01] * 3, 20), DICT, 4000, rng_seed=1)
    hi = uncertainty_sampling(state(mu, [0.5] * 3, 20), DICT, 4000, rng_seed=1)
    assert hi > lo > 0
    winner, per_cat = sampling_score_variances(state(mu, [0.5] * 3, 20), DICT, 4000, rng_seed=1)
    assert winner == hi and per_cat.shape == (3,)


def test_e_optimality_examples():
    assert uncertainty_e_optimality(state([0] * 3, np.array([1, 5, 2]) / F4, 4)) == pytest.approx(5)
    assert uncertainty_e_optimality(state([0] * 4, np.full(4, 2.5) / F4, 4)) == pytest.approx(2.5)
    assert uncertainty_e_optimality(state([0] * 2, [0, 0], 4)) == 0
    with pytest.raises(CovarianceUndefinedError):
        uncertainty_e_optimality(state([0], [1], 2))


def test_d_optimality_examples():
    assert uncertainty_d_optimality(state([0] * 5, np.ones(5) / F4, 4)) == pytest.approx(1)
    assert uncertainty_d_optimality(state([0] * 2, np.array([1, 4]) / F4, 4)) == pytest.approx(2)
    e2, e4 = math.exp(2), math.exp(4)
    assert uncertainty_d_optimality(state([0] * 2, np.array([e2, e4]) / F4, 4)) == pytest.approx(math.exp(3))
    with pytest.raises(CovarianceUndefinedError):
        uncertainty_d_optimality(state([0] * 2, [0, 1], 4))


@settings(max_examples=50)
@given(
    arrays(np.float64, st.integers(1, 10), elements=st.floats(1e-6, 1e3)),
    st.floats(2.01, 1e4),
)
def test_e_opt_dominates_d_opt(psi, lam):
    s = state(np.zeros_like(psi), psi, lam)
    assert uncertainty_e_optimality(s) >= uncertainty_d_optimality(s) * (1 - 1e-12)


def test_batch_forms_match_scalar(rng):
    lam = np.array([0.5, 2.0, 2.5, 10.0])
    psi = rng.uniform(0.1, 2, (4, 3))
    psi[3, 1] = 0.0
    cov = covariance_diag_batch(lam, psi)
    assert np.all(cov[:2] == UNDEFINED)
    np.testing.assert_allclose(cov[2], predictive_covariance_diag(state([0] * 3, psi[2], 2.5)))
    e = e_optimality_batch(lam, psi)
    d = d_optimality_batch(lam, psi)
    assert e[2] == pytest.approx(uncertainty_e_optimality(state([0] * 3, psi[2], 2.5)))
    assert d[2] == pytest.approx(uncertainty_d_optimality(state([0] * 3, psi[2], 2.5)))
    assert d[3] == UNDEFINED and np.isfinite(e[3])
    order = uncertainty_sort_key(e)
    assert list(order[-2:]) == [0, 1]


def test_decode_categories_batch():
    mu = np.array([[1.0, 0.1, 0], [0, 0, 0], [0, 0, 3.0]])
    cat, score = decode_categories(mu, DICT)
    np.testing.assert_array_equal(cat, [0, -1, 2])
    assert np.isnan(score[1]) and score[2] == pytest.approx(1.0)
