import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from vsdlab.analytic_model import GaussianMixture, GuidedModel, diffused
from vsdlab.distill import sds_gradient
from vsdlab.metrics import (
    GridSpec,
    KLResult,
    _w2_1d,
    distillation_objective,
    diversity,
    finite_diff_score_audit,
    grid_kl,
    sliced_w2,
)
from vsdlab.renderer import Camera, Renderer
from vsdlab.schedule import ScheduleDomainError, alpha_sigma, weight

G1 = GridSpec.square(1)


def normal1(mu, var=1.0):
    return lambda x: stats.norm.pdf(x[:, 0], mu, math.sqrt(var))


def bimodal_1d(shift=0.0):
    return GaussianMixture.from_components(
        [{"weight": 0.5, "mean": [-1.5 + shift], "cov": 0.3}, {"weight": 0.5, "mean": [1.5 + shift], "cov": 0.3}]
    )


# -- grid


def test_grid_invariants():
    with pytest.raises(ValueError):
        GridSpec(((0.0, 1.0),), (8,))
    with pytest.raises(ValueError):
        GridSpec(((1.0, 0.0),), (32,))
    with pytest.raises(ValueError):
        GridSpec(((0.0, math.inf),), (32,))
    with pytest.raises(ValueError):
        GridSpec(((0, 1),) * 3, (16,) * 3)
    assert GridSpec.square(1).points == (512,)
    assert GridSpec.square(2).points == (256, 256)


def test_grid_integrates_gaussian():
    g2 = GridSpec.square(2)
    m = GaussianMixture.isotropic([[0.5, -1.0]], 0.7)
    assert g2.integrate(m.density(g2.coords())) == pytest.approx(1.0, abs=1e-6)


# -- KL


def test_kl_identical():
    assert grid_kl(normal1(0), normal1(0), G1).value <= 1e-8


def test_kl_shifted_gaussians():
    assert grid_kl(normal1(0), normal1(1), G1).value == pytest.approx(0.5, abs=1e-4)


def test_kl_closed_form_variances():
    # KL(N(0,1) || N(0,2)) = 0.5 (1/2 + 0 - 1 + ln 2)
    exact = 0.5 * (0.5 - 1 + math.log(2.0))
    assert grid_kl(normal1(0, 1), normal1(0, 2), G1).value == pytest.approx(exact, abs=1e-6)


def test_kl_2d():
    g2 = GridSpec.square(2)
    p = GaussianMixture.isotropic([[0.0, 0.0]], 1.0)
    q = GaussianMixture.isotropic([[1.0, 1.0]], 1.0)
    assert grid_kl(q.density, p.density, g2).value == pytest.approx(1.0, abs=1e-4)


def test_kl_accepts_arrays_and_flags_divergence():
    x = G1.coords()[:, 0]
    q = stats.norm.pdf(x)
    p = np.where(x > 0, stats.norm.pdf(x), 0.0)
    r = grid_kl(q, p, G1)
    assert isinstance(r, KLResult) and r.divergent
    assert not grid_kl(q, q, G1).divergent
    same = grid_kl(q, q, G1)
    assert float(same) == same.value


@given(st.floats(-3, 3), st.floats(0.3, 3), st.floats(-3, 3), st.floats(0.3, 3))
def test_kl_nonnegative(m1, v1, m2, v2):
    assert grid_kl(normal1(m1, v1), normal1(m2, v2), G1).value >= -1e-9


@pytest.mark.parametrize("t", [0.3, 0.5, 0.6])
def test_diffused_kl_matched_pair(t):
    p0 = bimodal_1d()
    q0 = bimodal_1d()
    assert grid_kl(diffused(q0, t).density, diffused(p0, t).density, G1).value <= 1e-6


def test_diffused_kl_grows_with_shift():
    p0 = bimodal_1d()
    vals = [grid_kl(diffused(bimodal_1d(d), 0.5).density, diffused(p0, 0.5).density, G1).value for d in (0.0, 0.1, 0.3, 0.5)]
    assert vals[0] <= 1e-6
    assert vals[3] > 1e-3
    assert all(b > a for a, b in zip(vals, vals[1:]))


# -- distillation objective


def test_objective_weight_at_half():
    a, s = alpha_sigma(0.5)
    assert (s / a) * weight(0.5) == pytest.approx(0.5, abs=1e-15)


def test_objective_matched_is_zero():
    m = GaussianMixture.isotropic([[1.0, -0.5]], 1e-12)
    g = GuidedModel(m, m)
    v = distillation_objective(m.means, Renderer.identity(2), g, GridSpec.square(2), [0.2, 0.5, 0.8])
    assert abs(v) < 1e-8


def test_objective_decreases_after_sds_step():
    m = GaussianMixture.isotropic([[0.0, 0.0]], 0.5)
    g = GuidedModel(m, m)
    r = Renderer.identity(2)
    grid = GridSpec.square(2, 8.0, 128)
    ts = [0.2, 0.4, 0.6, 0.8]
    theta = np.array([4.0, -3.0])
    before = distillation_objective(theta, r, g, grid, ts)
    rng = np.random.default_rng(0)
    grad = np.mean([sds_gradient(theta, g, r, t, rng.normal(size=2), Camera(0), weight(t)) for t in rng.uniform(0.02, 0.98, 64)], axis=0)
    after = distillation_objective(theta - 0.01 * grad, r, g, grid, ts)
    assert after < before


def test_objective_domain_errors():
    m = GaussianMixture.isotropic([[0.0, 0.0]], 1.0)
    g = GuidedModel(m, m)
    with pytest.raises(ScheduleDomainError):
        distillation_objective(np.zeros((1, 2)), Renderer.identity(2), g, GridSpec.square(2), [1.0])
    with pytest.raises(ScheduleDomainError):
        distillation_objective(np.zeros((1, 2)), Renderer.identity(2), g, GridSpec.square(2), [0.0])
    with pytest.raises(ValueError):
        distillation_objective(np.zeros((1, 2)), Renderer.identity(2), g, GridSpec.square(1), [0.5])


def test_objective_order_invariant_exact():
    rng = np.random.default_rng(3)
    parts = rng.normal(size=(12, 2))
    m = GaussianMixture.isotropic([[2.0, 0.0], [-2.0, 0.0]], 0.25)
    g = GuidedModel.broadened(m)
    grid = GridSpec.square(2, 8.0, 64)
    a = distillation_objective(parts, Renderer.identity(2), g, grid, [0.3, 0.7])
    b = distillation_objective(parts[rng.permutation(12)], Renderer.identity(2), g, grid, [0.3, 0.7])
    assert a == b
    m1 = GaussianMixture.isotropic([[1.0], [-1.0]], 0.25)
    lin = Renderer.linear(2, 1)
    a = distillation_objective(parts, lin, GuidedModel.broadened(m1), G1, [0.3, 0.7])
    b = distillation_objective(parts[::-1], lin, GuidedModel.broadened(m1), G1, [0.3, 0.7])
    assert a == b


# -- sliced W2


def test_w2_examples():
    x = np.random.default_rng(0).normal(size=(50, 2))
    assert sliced_w2(x, x, 16, np.random.default_rng(1)) == 0.0
    assert sliced_w2(np.array([[0.0]]), np.array([[1.0]])) == pytest.approx(1.0)
    a = np.random.default_rng(1).normal(size=(10_000, 2))
    b = np.random.default_rng(2).normal(size=(10_000, 2))
    assert sliced_w2(a, b, 64, np.random.default_rng(3)) < 0.05


def test_w2_1d_unequal_sizes_exact():
    # quantile functions: u = 0 on [0,1); v = 0 on [0,1/2), 1 on [1/2,1)
    assert _w2_1d(np.array([0.0]), np.array([0.0, 1.0])) == pytest.approx(math.sqrt(0.5), abs=1e-15)
    u = np.array([0.0, 1.0, 2.0])
    v = np.array([0.0, 2.0])
    # pieces [0,1/3):0-0, [1/3,1/2):1-0, [1/2,2/3):1-2, [2/3,1):2-2
    assert _w2_1d(u, v) == pytest.approx(math.sqrt(1 / 6 + 1 / 6), abs=1e-15)


def test_w2_translation():
    a = np.random.default_rng(0).normal(size=(300, 1))
    assert sliced_w2(a, a + 0.7) == pytest.approx(0.7, abs=1e-12)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_w2_symmetric_nonnegative(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 2)), rng.normal(size=(m, 2)) + 1
    ab = sliced_w2(a, b, 8, np.random.default_rng(5))
    ba = sliced_w2(b, a, 8, np.random.default_rng(5))
    assert ab >= 0 and ab == pytest.approx(ba, rel=1e-12, abs=1e-15)


def test_w2_errors():
    with pytest.raises(ValueError):
        sliced_w2(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        sliced_w2(np.zeros((2, 2)), np.zeros((3, 3)))


# -- diversity


def test_diversity_examples():
    assert diversity(np.ones((5, 2))) == 0.0
    assert diversity(np.array([[0.0, 0.0], [2.0, 0.0]])) == pytest.approx(2.0)
    sq = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert diversity(sq) == pytest.approx((4 + 2 * math.sqrt(2)) / 6, abs=1e-15)
    with pytest.raises(ValueError):
        diversity(np.zeros((1, 2)))


# -- finite-difference audit


def test_audit_examples():
    pts = np.random.default_rng(0).normal(size=(100, 2))
    assert finite_diff_score_audit(GaussianMixture.isotropic([[0.0, 0.0]], 1.0), pts) < 1e-5
    bi = GaussianMixture.isotropic([[1.0, 0.0], [-1.0, 0.0]], 0.5)
    assert finite_diff_score_audit(bi, pts, t=0.5) < 1e-5
    assert finite_diff_score_audit(bi, pts, h=0.5) > 1e-3
