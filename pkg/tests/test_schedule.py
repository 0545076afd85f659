import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from maskgen.schedule import (SCHEDULE_KINDS, MaskSchedule, TimeWindow, ceil_count, discretize, gamma,
                              gamma_prime, mar_ratio_sample, mdm_weight_antiderivative, sample_time, weight)

unit = st.floats(0.0, 1.0, allow_nan=False)
kinds = st.sampled_from(SCHEDULE_KINDS)
rates = st.floats(0.5, 10.0)


def test_gamma_examples():
    assert gamma(MaskSchedule("linear"), 0.5) == 0.5
    assert gamma(MaskSchedule("exp"), 0.4) == pytest.approx(0.864664716763387, abs=1e-12)
    assert gamma(MaskSchedule("cosine"), 1.0) == pytest.approx(1.0, abs=1e-15)
    assert gamma(MaskSchedule("log-exp"), 1.0) == pytest.approx(1.0, abs=1e-15)


def test_boundaries():
    for kind in ("linear", "cosine", "log-exp"):
        assert gamma(MaskSchedule(kind), 0.0) == pytest.approx(0.0, abs=1e-15)
    assert gamma(MaskSchedule("exp"), 0.0) == 0.0
    assert gamma(MaskSchedule("exp", 3.0), 1.0) == pytest.approx(1 - math.exp(-3.0))


def test_gamma_prime_examples():
    assert gamma_prime(MaskSchedule("linear"), 0.3) == 1.0
    assert gamma_prime(MaskSchedule("exp"), 0.0) == pytest.approx(5.0)


@pytest.mark.parametrize("kind", SCHEDULE_KINDS)
def test_derivative_matches_finite_differences(kind):
    sched, h = MaskSchedule(kind), 1e-6
    t = np.linspace(0, 1, 1002)[1:-1]
    t = t[(t > h) & (t < 1 - h)]
    fd = (sched.gamma(t + h) - sched.gamma(t - h)) / (2 * h)
    assert np.all(np.abs(sched.gamma_prime(t) - fd) <= 1e-6 * np.maximum(1, np.abs(sched.gamma_prime(t))))
    fd37 = (sched.gamma(0.37 + h) - sched.gamma(0.37 - h)) / (2 * h)
    assert sched.gamma_prime(0.37) == pytest.approx(fd37, rel=1e-6)


@given(kinds, rates, unit, unit)
def test_monotone_and_bounded(kind, rate, a, b):
    sched = MaskSchedule(kind, rate)
    lo, hi = min(a, b), max(a, b)
    assert 0.0 <= sched.gamma(lo) <= sched.gamma(hi) <= 1.0


def test_ordering_of_schedules():
    t = np.linspace(0.05, 0.95, 200)[1:-1]
    exp, cos = MaskSchedule("exp").gamma(t), MaskSchedule("cosine").gamma(t)
    assert np.all(cos > t)
    # exp saturates at 1 - e^-5 while cosine reaches 1, so they cross near t = 0.90657
    below = t < 0.9065
    assert np.all(exp[below] > cos[below])
    assert np.all(exp[t > 0.9066] < cos[t > 0.9066])


@pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
def test_domain_error(t):
    with pytest.raises(ValueError):
        gamma(MaskSchedule("linear"), t)


def test_unknown_kind_and_rate():
    with pytest.raises(ValueError):
        MaskSchedule("quadratic")
    with pytest.raises(ValueError):
        MaskSchedule("exp", 0.0)


def test_config_round_trip():
    assert MaskSchedule.from_config("exp") == MaskSchedule("exp", 5.0)
    sched = MaskSchedule.from_config({"name": "log-exp", "rate": 2.5})
    assert MaskSchedule.from_config(sched.to_config()) == sched


def test_weights():
    assert weight("constant", MaskSchedule("exp"), 0.9) == 1.0
    assert weight("mdm", MaskSchedule("linear"), 0.5) == pytest.approx(2.0)
    assert weight("mdm", MaskSchedule("linear"), 0.0, epsilon=1e-8) == pytest.approx(1e8)


@given(kinds, st.floats(1e-3, 1.0))
def test_weights_positive(kind, t):
    assert weight("mdm", MaskSchedule(kind), t) > 0


@pytest.mark.parametrize("kind", SCHEDULE_KINDS)
def test_mdm_antiderivative(kind):
    sched = MaskSchedule(kind)
    a, b = 0.2, 0.9
    t = np.linspace(a, b, 20001)
    numeric = np.trapezoid(weight("mdm", sched, t), t)
    exact = mdm_weight_antiderivative(sched, b) - mdm_weight_antiderivative(sched, a)
    assert exact == pytest.approx(numeric, rel=1e-6)


@given(kinds, rates, st.floats(0.0, 1.0))
def test_inverse(kind, rate, g):
    sched = MaskSchedule(kind, rate)
    g = min(g, sched.gamma(1.0))
    assert sched.gamma(sched.inverse(g)) == pytest.approx(g, abs=1e-9)


def test_sample_time():
    rng = np.random.default_rng(0)
    assert np.mean(sample_time(TimeWindow(0, 1), rng, 100_000)) == pytest.approx(0.5, abs=0.005)
    assert np.all(sample_time(TimeWindow(0.2, 1), rng, 10_000) >= 0.2)
    draws = sample_time(TimeWindow(0.4, 0.4 + 1e-9), rng, 100)
    assert np.allclose(draws, 0.4, atol=1e-8)
    a = sample_time(TimeWindow(0.1, 0.7), np.random.default_rng(5), 50)
    assert np.array_equal(a, sample_time(TimeWindow(0.1, 0.7), np.random.default_rng(5), 50))


def test_time_window_validation():
    for lo, hi in [(0.5, 0.5), (0.6, 0.2), (-0.1, 1), (0, 1.1)]:
        with pytest.raises(ValueError):
            TimeWindow(lo, hi)
    assert TimeWindow(0.2, 1.0).length == pytest.approx(0.8)


def test_mar_ratio_sample():
    draws = mar_ratio_sample(np.random.default_rng(0), 100_000)
    assert draws.min() >= 0.7 and draws.max() <= 1.0
    # truncated-normal mean by quadrature
    assert draws.mean() == pytest.approx(0.867017347310516, abs=0.003)
    assert np.array_equal(mar_ratio_sample(np.random.default_rng(3), 10),
                          mar_ratio_sample(np.random.default_rng(3), 10))
    assert 0.7 <= mar_ratio_sample(np.random.default_rng(1)) <= 1.0


def test_discretize():
    steps = discretize(16, MaskSchedule("linear"))
    assert (steps[0].t, steps[0].s) == (1.0, 0.9375)
    assert len(discretize(1, MaskSchedule("exp"))) == 1
    one = discretize(1, MaskSchedule("exp"))[0]
    assert (one.t, one.s) == (1.0, 0.0)
    assert all(a.s == b.t for a, b in zip(steps, steps[1:]))
    assert steps[-1].s == 0.0
    with pytest.raises(ValueError):
        discretize(0, MaskSchedule("linear"))


@given(kinds, st.integers(1, 64))
def test_discretize_telescopes(kind, T):
    sched = MaskSchedule(kind)
    steps = discretize(T, sched)
    total = sum(s.gamma_t - s.gamma_s for s in steps)
    assert total == pytest.approx(sched.gamma(1.0) - sched.gamma(0.0), abs=1e-12)


def test_ceil_count():
    assert ceil_count(256, 0.3) == 77
    assert ceil_count(10, 0.0) == 0
    assert ceil_count(10, 1.0) == 10
    # a value that is an integer up to rounding is not bumped up
    assert ceil_count(16, 0.1875 + 1e-15) == 3
