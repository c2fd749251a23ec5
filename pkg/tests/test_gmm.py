import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ivplda.errors import DataError
from ivplda.gmm import (GmmModel, average_loglik, combine_posteriors, couple_ubm, em_step,
                        gmm_posteriors, load_gmm, mstep_from_posteriors, save_gmm, train_gmm_em)
from ivplda.synth import gen_gmm_frames, random_gmm


def test_two_cluster_recovery():
    true = GmmModel([0.5, 0.5], [[-5.0, 0.0], [5.0, 1.0]], [np.eye(2) * 0.5, np.eye(2)])
    X, _ = gen_gmm_frames(true, 4000, seed=1)
    model = train_gmm_em(X, 2, iterations=30, seed=0).validate()
    order = np.argsort(model.means[:, 0])
    np.testing.assert_allclose(model.means[order], true.means, atol=0.1)


def test_posterior_peaks_on_own_component():
    m = GmmModel([0.5, 0.5], [[0.0, 0.0], [50.0, 50.0]], [np.eye(2), np.eye(2)])
    post = gmm_posteriors(m, np.array([[0.0, 0.0], [50.0, 50.0]]))
    assert post[0, 0] > 0.999 and post[1, 1] > 0.999


def test_posteriors_against_scipy():
    from scipy.stats import multivariate_normal
    m = random_gmm(4, 3, seed=2)
    X, _ = gen_gmm_frames(m, 50, seed=3)
    dens = np.column_stack([w * multivariate_normal(mu, S).pdf(X)
                            for w, mu, S in zip(m.weights, m.means, m.covariances)])
    np.testing.assert_allclose(gmm_posteriors(m, X, prune=0.0), dens / dens.sum(1, keepdims=True), atol=1e-10)


@given(st.floats(0.01, 100.0))
@settings(max_examples=20, deadline=None)
def test_posteriors_invariant_to_weight_scale(scale):
    m = random_gmm(5, 2, seed=4)
    X, _ = gen_gmm_frames(m, 40, seed=5)
    base = gmm_posteriors(m, X)
    scaled = m.weights * scale
    m2 = GmmModel(scaled / scaled.sum(), m.means, m.covariances)
    np.testing.assert_allclose(gmm_posteriors(m2, X), base, atol=1e-12)
    np.testing.assert_allclose(base.sum(axis=1), 1.0, atol=1e-6)
    assert (base >= 0).all()


def test_em_monotone_and_spd():
    true = random_gmm(6, 3, seed=6)
    X, _ = gen_gmm_frames(true, 3000, seed=7)
    hist = []
    model = train_gmm_em(X, 6, iterations=8, seed=1, history=hist)
    assert np.all(np.diff(hist) >= -1e-8 * np.abs(hist[:-1]))
    np.linalg.cholesky(model.covariances)
    assert abs(model.weights.sum() - 1) < 1e-10


def test_insufficient_data():
    with pytest.raises(DataError, match="insufficient"):
        train_gmm_em(np.zeros((10, 2)), 4)


def test_combine_posteriors_hand_cases():
    out = combine_posteriors([[0.9, 0.1], [0.6, 0.4]], [[0.9, 0.1], [0.5, 0.5]])
    np.testing.assert_allclose(out[0], [0.81 / 0.82, 0.01 / 0.82], atol=1e-12)
    np.testing.assert_allclose(out[0], [0.98780, 0.01220], atol=1e-5)
    np.testing.assert_allclose(out[1], [0.6, 0.4], atol=1e-12)


def _rows(n, c):
    return arrays(np.float64, (n, c), elements=st.floats(0.0, 1.0)).filter(lambda a: (a.sum(1) > 0).all())


@given(_rows(6, 4), _rows(6, 4))
@settings(max_examples=50, deadline=None)
def test_combine_posteriors_symmetric_and_uniform_identity(a, b):
    a = a / a.sum(1, keepdims=True)
    b = b / b.sum(1, keepdims=True)
    ab = combine_posteriors(a, b)
    np.testing.assert_allclose(ab, combine_posteriors(b, a), atol=1e-15)
    np.testing.assert_allclose(ab.sum(1), 1.0, atol=1e-6)
    np.testing.assert_allclose(combine_posteriors(a, np.full_like(a, 0.25)), a, atol=1e-12)


def test_combine_posteriors_underflow_is_uniform():
    out = combine_posteriors([[1.0, 0.0]], [[0.0, 1.0]])
    np.testing.assert_array_equal(out, [[0.5, 0.5]])
    with pytest.raises(DataError):
        combine_posteriors(np.ones((2, 2)), np.ones((2, 3)))


def test_mstep_with_hard_posteriors_gives_cluster_means():
    rng = np.random.default_rng(8)
    X = rng.standard_normal((200, 3))
    labels = rng.integers(0, 2, 200)
    P = np.eye(2)[labels]
    m = mstep_from_posteriors([P], [X])
    for c in range(2):
        np.testing.assert_allclose(m.means[c], X[labels == c].mean(0), atol=1e-12)


def test_couple_ubm_fixed_point_reproduces_means():
    true = random_gmm(3, 2, seed=9)
    X, _ = gen_gmm_frames(true, 2000, seed=10)
    plp = train_gmm_em(X, 3, iterations=300, seed=0)
    plp, _ = em_step(plp, [X], 1e-4 * np.trace(np.cov(X.T)) / 2)
    coupled = couple_ubm(plp, [X], [X])
    refit, _ = em_step(plp, [X], 1e-4 * np.trace(np.cov(X.T)) / 2)
    np.testing.assert_allclose(coupled.mfcc_ubm.means, refit.means, atol=1e-8)
    with pytest.raises(DataError):
        couple_ubm(plp, [X], [X[:-1]])


def test_save_load_roundtrip(tmp_path):
    m = random_gmm(3, 4, seed=11)
    save_gmm(tmp_path / "u.gmm", m)
    back = load_gmm(tmp_path / "u.gmm")
    np.testing.assert_allclose(back.means, m.means, rtol=1e-6)
    np.testing.assert_allclose(back.covariances, m.covariances, rtol=1e-5)
    assert abs(average_loglik(back, m.means) - average_loglik(m, m.means)) < 1e-3
