import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from vsdlab.schedule import (
    ScheduleDomainError,
    TimeSchedule,
    alpha_sigma,
    perturb,
    sample_time,
    weight,
)

R2 = math.sqrt(2) / 2


@pytest.mark.parametrize("t, expected", [(0.0, (1.0, 0.0)), (1.0, (0.0, 1.0)), (0.5, (R2, R2))])
def test_alpha_sigma_examples(t, expected):
    a, s = alpha_sigma(t)
    assert a == pytest.approx(expected[0], abs=1e-15)
    assert s == pytest.approx(expected[1], abs=1e-15)


def test_endpoints_exact():
    assert alpha_sigma(0.0) == (1.0, 0.0)
    assert alpha_sigma(1.0) == (0.0, 1.0)
    a, s = alpha_sigma(np.array([0.0, 1.0]))
    assert a.tolist() == [1.0, 0.0] and s.tolist() == [0.0, 1.0]


@pytest.mark.parametrize("t", [-1e-9, 1.0 + 1e-9, math.nan, 2.0])
def test_alpha_sigma_domain(t):
    with pytest.raises(ScheduleDomainError):
        alpha_sigma(t)
    with pytest.raises(ScheduleDomainError):
        weight(t)


def test_unit_norm_1e5(rng):
    a, s = alpha_sigma(rng.uniform(0, 1, 100_000))
    assert np.max(np.abs(a * a + s * s - 1)) < 1e-12


@given(st.floats(0, 1), st.floats(0, 1))
def test_monotone(t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    a1, s1 = alpha_sigma(lo)
    a2, s2 = alpha_sigma(hi)
    assert a2 <= a1 and s2 >= s1


@pytest.mark.parametrize(
    "x0, t, noise, expected",
    [
        ((1, 0), 0.0, (5, 5), (1, 0)),
        ((0, 0), 1.0, (2, -1), (2, -1)),
        ((2, 0), 0.5, (0, 2), (math.sqrt(2), math.sqrt(2))),
    ],
)
def test_perturb_examples(x0, t, noise, expected):
    np.testing.assert_allclose(perturb(np.array(x0, float), t, np.array(noise, float)), expected, atol=1e-15)


def test_perturb_dimension_mismatch():
    with pytest.raises(ValueError):
        perturb(np.zeros(2), 0.5, np.zeros(3))


@pytest.mark.parametrize("t, expected", [(0.0, 0.0), (1.0, 1.0), (0.5, 0.5)])
def test_weight_examples(t, expected):
    assert weight(t) == pytest.approx(expected, abs=1e-15)


@given(st.floats(0, 1))
def test_weight_is_sigma_squared_exactly(t):
    assert weight(t) == alpha_sigma(t)[1] ** 2


def test_sample_time_default_phases(rng):
    sched = TimeSchedule.annealed(total_steps=1000)
    assert sched.switch_step == 200
    t0 = sample_time(0, sched, rng, size=10_000)
    assert t0.min() >= 0.02 and t0.max() <= 0.98 and t0.max() > 0.9
    t1 = sample_time(sched.switch_step, sched, rng, size=10_000)
    assert t1.min() >= 0.02 and t1.max() <= 0.50
    assert 0.02 <= sample_time(0, sched, rng) <= 0.98


def test_sample_time_degenerate(rng):
    sched = TimeSchedule((0.5, 0.5), (0.5, 0.5))
    assert sample_time(0, sched, rng) == 0.5
    assert sample_time(7, sched, rng) == 0.5


@pytest.mark.parametrize("step, lo, hi", [(0, 0.02, 0.98), (10, 0.02, 0.50)])
def test_sample_time_ks(step, lo, hi):
    rng = np.random.default_rng(7)
    sched = TimeSchedule((0.02, 0.98), (0.02, 0.50), switch_step=10)
    t = sample_time(step, sched, rng, size=100_000)
    assert t.min() >= lo and t.max() <= hi
    assert stats.kstest(t, stats.uniform(lo, hi - lo).cdf).statistic < 0.01


@pytest.mark.parametrize(
    "p1, p2",
    [((0.0, 0.5), (0.1, 0.2)), ((0.1, 1.0), (0.1, 0.2)), ((0.1, 0.5), (0.05, 0.4)), ((0.6, 0.5), (0.6, 0.5))],
)
def test_time_schedule_invariants(p1, p2):
    with pytest.raises(ValueError):
        TimeSchedule(p1, p2)


def test_time_schedule_negative_switch():
    with pytest.raises(ValueError):
        TimeSchedule(switch_step=-1)


def test_uniform_schedule_ignores_switch():
    u = TimeSchedule.uniform()
    assert u.range_at(0) == u.range_at(10**6) == (0.02, 0.98)
