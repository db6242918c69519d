import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from vsdlab.analytic_model import (
    GaussianMixture,
    GuidedModel,
    InvalidMixtureError,
    SingularTimeError,
    cfg_combine,
    diffused,
    log_density,
    noise_prediction,
    sample,
    score,
)
from vsdlab.metrics import finite_diff_score_audit
from vsdlab.schedule import alpha_sigma

LOG_2PI = math.log(2 * math.pi)
R2 = math.sqrt(2) / 2


def std_normal(d=2):
    return GaussianMixture.isotropic(np.zeros((1, d)), 1.0)


def bimodal_2d():
    return GaussianMixture.isotropic([[1.0, 0.0], [-1.0, 0.0]], 1.0)


def bimodal_1d():
    return GaussianMixture.isotropic([[1.0], [-1.0]], 1.0)


def rich_2d():
    return GaussianMixture.from_components(
        [
            {"weight": 0.2, "mean": [2.0, 0.5], "cov": [[0.5, 0.2], [0.2, 0.3]]},
            {"weight": 0.5, "mean": [-1.0, 1.0], "cov": [0.25, 1.5]},
            {"weight": 0.3, "mean": [0.0, -2.0], "cov": 0.4},
        ]
    )


# -- construction invariants


@pytest.mark.parametrize(
    "weights, covs",
    [
        ([0.5, 0.6], [1.0, 1.0]),
        ([1.0, 0.0], [1.0, 1.0]),
        ([1.5, -0.5], [1.0, 1.0]),
        ([0.5, 0.5], [1.0, -1.0]),
    ],
)
def test_invalid_mixtures(weights, covs):
    with pytest.raises(InvalidMixtureError):
        GaussianMixture(weights, [[0.0], [1.0]], [[[c]] for c in covs])


def test_asymmetric_cov_rejected():
    with pytest.raises(InvalidMixtureError):
        GaussianMixture([1.0], [[0.0, 0.0]], [[[1.0, 0.5], [0.0, 1.0]]])


def test_dimension_mismatch_rejected():
    with pytest.raises(InvalidMixtureError):
        GaussianMixture.from_components([{"weight": 0.5, "mean": [0, 0]}, {"weight": 0.5, "mean": [0]}])


def test_weights_tolerance():
    GaussianMixture([0.5, 0.5 + 5e-13], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    with pytest.raises(InvalidMixtureError):
        GaussianMixture([0.5, 0.5 + 1e-10], [[0.0], [1.0]], [[[1.0]], [[1.0]]])


def test_immutable():
    m = bimodal_2d()
    with pytest.raises(ValueError):
        m.means[0, 0] = 3.0


# -- diffused


@pytest.mark.parametrize("t", [0.0, 0.1, 0.5, 0.9, 1.0])
def test_diffused_standard_normal_fixed_point(t):
    m = diffused(std_normal(), t)
    np.testing.assert_allclose(m.means, 0.0, atol=1e-15)
    np.testing.assert_allclose(m.covs[0], np.eye(2), atol=1e-15)


def test_diffused_t0_identity():
    base = rich_2d()
    m = diffused(base, 0.0)
    np.testing.assert_allclose(m.means, base.means, atol=1e-14, rtol=0)
    np.testing.assert_allclose(m.covs, base.covs, atol=1e-14, rtol=0)
    np.testing.assert_array_equal(m.weights, base.weights)


def test_diffused_shifted_gaussian_against_convolution():
    base = GaussianMixture.isotropic([[2.0, 0.0]], 1.0)
    m = diffused(base, 0.5)
    np.testing.assert_allclose(m.means[0], [math.sqrt(2), 0.0], atol=1e-14)
    np.testing.assert_allclose(m.covs[0], np.eye(2), atol=1e-14)
    # numerical convolution of p_0 (scaled by alpha) with N(0, sigma^2 I) on a grid
    a, s = alpha_sigma(0.5)
    ax = np.linspace(-7, 9, 321)
    h = ax[1] - ax[0]
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    src = np.stack([X.ravel(), Y.ravel()], 1)
    p0_scaled = base.density(src / a) / a**2
    queries = np.array([[1.4, 0.0], [0.0, 1.0], [3.0, -1.0], [-1.0, 0.5]])
    d2 = ((queries[:, None, :] - src[None]) ** 2).sum(-1)
    kern = np.exp(-d2 / (2 * s * s)) / (2 * math.pi * s * s)
    conv = (kern * p0_scaled).sum(1) * h * h
    np.testing.assert_allclose(m.density(queries), conv, atol=1e-6)


def test_diffused_density_matches_1d_convolution():
    base = GaussianMixture.from_components(
        [{"weight": 0.3, "mean": [-1.5], "cov": 0.2}, {"weight": 0.7, "mean": [1.0], "cov": 0.6}]
    )
    t = 0.4
    a, s = alpha_sigma(t)
    x = np.linspace(-8, 8, 4001)
    h = x[1] - x[0]
    scaled = base.density((x / a)[:, None]) / a
    kern = stats.norm.pdf(x[:, None] - x[None, :], scale=s)
    conv = kern @ scaled * h
    got = diffused(base, t).density(x[:, None])
    assert np.max(np.abs(got - conv)) < 1e-6
    np.testing.assert_allclose(np.exp(base.diffused_eval(x[:, None], t)[0]), got, atol=1e-14)


# -- log density


def test_log_density_examples():
    assert log_density(GaussianMixture.isotropic([[0.0]], 1.0), np.array([0.0])) == pytest.approx(-0.5 * LOG_2PI, abs=1e-14)
    assert log_density(bimodal_1d(), np.array([0.0])) == pytest.approx(math.log(math.exp(-0.5) / math.sqrt(2 * math.pi)), abs=1e-14)
    for d in (1, 2, 3):
        m = GaussianMixture.isotropic([np.arange(d, dtype=float)], 1.0)
        assert log_density(m, m.means[0]) == pytest.approx(-0.5 * d * LOG_2PI, abs=1e-13)


def test_log_density_stable_far_away():
    m = bimodal_2d()
    v = m.log_density(np.array([1e3, 0.0]))
    exact = -0.5 * (999.0**2) - LOG_2PI + math.log(0.5 + 0.5 * math.exp(-0.5 * (1001.0**2 - 999.0**2)))
    assert math.isfinite(v) and v == pytest.approx(exact, rel=1e-12)


def test_log_density_dimension_mismatch():
    with pytest.raises(ValueError):
        bimodal_2d().log_density(np.zeros(3))


@pytest.mark.parametrize("model", [std_normal(1), bimodal_1d(), std_normal(2), bimodal_2d(), rich_2d()], ids=str)
def test_normalisation(model):
    d = model.dim
    ax = np.linspace(-10, 10, 2001 if d == 1 else 401)
    if d == 1:
        total = np.trapezoid(model.density(ax[:, None]), ax)
    else:
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        vals = model.density(np.stack([X.ravel(), Y.ravel()], 1)).reshape(X.shape)
        total = np.trapezoid(np.trapezoid(vals, ax, axis=1), ax)
    assert 0.999 <= total <= 1.001


# -- score


def test_score_examples():
    np.testing.assert_allclose(score(std_normal(), np.array([1.0, 0.0])), [-1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(score(bimodal_2d(), np.zeros(2)), [0.0, 0.0], atol=1e-15)
    m = bimodal_1d()
    h = 1e-5
    fd = (m.log_density(np.array([0.5 + h])) - m.log_density(np.array([0.5 - h]))) / (2 * h)
    # frozen oracle: d/dx log(0.5 N(x;1,1) + 0.5 N(x;-1,1)) = -x + tanh(x)
    assert m.score(np.array([0.5]))[0] == pytest.approx(-0.5 + math.tanh(0.5), abs=1e-15)
    assert m.score(np.array([0.5]))[0] == pytest.approx(fd, rel=1e-8)


@pytest.mark.parametrize("t", [None, 0.0, 0.3, 0.6, 0.9])
@pytest.mark.parametrize("model", [bimodal_1d(), bimodal_2d(), rich_2d()], ids=["bi1", "bi2", "rich"])
def test_score_finite_difference_audit(model, t):
    pts = np.random.default_rng(3).normal(0, 2, (100, model.dim))
    assert finite_diff_score_audit(model, pts, t=t) < 1e-5


@given(st.floats(-6, 6), st.floats(-6, 6))
def test_score_is_gradient_of_component_mixture(x, y):
    m = rich_2d()
    p = np.array([x, y])
    r = np.exp(m.component_log_resp(p))[0]
    expect = sum(r[k] * -np.linalg.solve(m.covs[k], p - m.means[k]) for k in range(3))
    np.testing.assert_allclose(m.score(p), expect, rtol=1e-9, atol=1e-12)


# -- noise prediction / CFG


def test_noise_prediction_s0_is_conditional():
    g = GuidedModel.broadened(rich_2d(), 0.0)
    x = np.random.default_rng(0).normal(size=(5, 2))
    a, s = alpha_sigma(0.4)
    expect = -s * g.conditional.diffused_eval(x, 0.4)[1]
    np.testing.assert_array_equal(noise_prediction(g, x, 0.4), expect)


def test_cfg_arithmetic():
    np.testing.assert_array_equal(cfg_combine(np.array([1.0, 0.0]), np.array([0.0, 0.0]), 2.0), [3.0, 0.0])


@pytest.mark.parametrize("s", [0.0, 1.0, 7.5, 100.0])
def test_equal_models_independent_of_scale(s):
    g = GuidedModel(std_normal(), std_normal(), s)
    np.testing.assert_allclose(g.noise_prediction(np.array([1.0, 0.0]), 0.5), [R2, 0.0], atol=1e-15)
    ref = GuidedModel(rich_2d(), rich_2d(), 0.0)
    gs = GuidedModel(rich_2d(), rich_2d(), s)
    x = np.random.default_rng(1).normal(size=(20, 2))
    np.testing.assert_array_equal(gs.noise_prediction(x, 0.3), ref.noise_prediction(x, 0.3))


def test_noise_prediction_matches_denoising_monte_carlo():
    # E[eps | x_t] by importance weighting x0 ~ p_0 with the Gaussian likelihood of x_t
    g = GuidedModel(bimodal_2d(), bimodal_2d(), 0.0)
    t, x_t = 0.5, np.array([0.7, -0.3])
    a, s = alpha_sigma(t)
    rng = np.random.default_rng(5)
    x0 = g.conditional.sample(400_000, rng)
    eps = (x_t - a * x0) / s
    w = np.exp(-0.5 * (eps * eps).sum(1))
    mc = (w[:, None] * eps).sum(0) / w.sum()
    np.testing.assert_allclose(g.noise_prediction(x_t, t), mc, atol=0.02)


def test_noise_prediction_singular_time():
    g = GuidedModel.broadened(bimodal_2d())
    with pytest.raises(SingularTimeError):
        g.noise_prediction(np.zeros(2), 0.0)


def test_guided_invariants():
    with pytest.raises(ValueError):
        GuidedModel(bimodal_2d(), bimodal_2d(), -1.0)
    with pytest.raises(InvalidMixtureError):
        GuidedModel(bimodal_2d(), bimodal_1d())


def test_broadened_defaults():
    g = GuidedModel.broadened(rich_2d())
    np.testing.assert_allclose(g.unconditional.covs, 4 * rich_2d().covs)
    np.testing.assert_allclose(g.unconditional.means, 0.5 * rich_2d().means)


# -- sampling


def test_sample_standard_normal_mean():
    x = sample(std_normal(), 10_000, np.random.default_rng(0))
    assert x.shape == (10_000, 2)
    assert np.all(np.abs(x.mean(0)) < 0.05)


def test_sample_point_like():
    m = GaussianMixture.isotropic([[7.0, 7.0]], 1e-12)
    x = m.sample(1000, np.random.default_rng(0))
    assert np.max(np.abs(x - 7.0)) < 1e-5


def test_sample_empty():
    assert sample(bimodal_2d(), 0, np.random.default_rng(0)).shape == (0, 2)


def test_sample_covariance():
    m = rich_2d()
    x = m.sample(200_000, np.random.default_rng(2))
    mean = (m.weights[:, None] * m.means).sum(0)
    cov = sum(w * (S + np.outer(mu - mean, mu - mean)) for w, mu, S in zip(m.weights, m.means, m.covs))
    np.testing.assert_allclose(x.mean(0), mean, atol=0.02)
    np.testing.assert_allclose(np.cov(x.T), cov, atol=0.03)


def test_sample_deterministic():
    a = rich_2d().sample(50, np.random.default_rng(9))
    b = rich_2d().sample(50, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
