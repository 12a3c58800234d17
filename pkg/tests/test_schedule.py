from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exposure_lab.schedule import (NoiseSchedule, VarChoice, as_respaced, default_linear_schedule,
                                   make_linear_schedule, respace, schedule_from_csv, schedule_to_csv)

# exact rational product of (1 - beta_t) for the 1e-4..0.02, T=1000 schedule
ALPHA_BAR_1000 = 4.0358297653756835e-05


def test_linear_endpoints():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    assert s.beta(1) == 1e-4
    assert s.beta(1000) == 0.02
    assert s.alpha_bar(1) == pytest.approx(0.9999, abs=1e-15)


def test_two_step_hand_values():
    s = make_linear_schedule(2, 0.1, 0.3)
    assert s.alpha_bar(2) == pytest.approx(0.63, abs=1e-15)
    assert s.posterior_var(2) == pytest.approx(0.1 / 0.37 * 0.3, abs=1e-15)
    assert s.posterior_var(1) == 0.0


def test_alpha_bar_1000_against_rational_product():
    betas = [Fraction(1, 10 ** 4) + (Fraction(2, 100) - Fraction(1, 10 ** 4)) * i / 999
             for i in range(1000)]
    prod = Fraction(1)
    for b in betas:
        prod *= 1 - b
    s = make_linear_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bar(1000) == pytest.approx(float(prod), rel=1e-11)
    assert s.alpha_bar(1000) == pytest.approx(ALPHA_BAR_1000, rel=1e-11)


def test_default_schedule_scales_endpoints():
    s = default_linear_schedule(100)
    assert s.beta(1) == pytest.approx(1e-3)
    assert s.beta(100) == pytest.approx(0.2)


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_bad_linear_arguments(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


def test_accessor_range_checks():
    s = make_linear_schedule(10, 1e-3, 0.1)
    assert s.alpha_bar(0) == 1.0
    for bad in (0, 11):
        with pytest.raises(ValueError):
            s.beta(bad)


def test_respace_identity():
    s = default_linear_schedule(1000)
    r = respace(s, 1000)
    assert r.effective == s
    assert r.timesteps == tuple(range(1, 1001))


def test_respace_exact_subsequence():
    s = default_linear_schedule(1000)
    r = respace(s, 20)
    assert r.T == 20 and r.timesteps[-1] == 1000
    idx = np.asarray(r.timesteps) - 1
    assert np.array_equal(r.effective.alpha_bars, s.alpha_bars[idx])


def test_respace_hand_value():
    s = NoiseSchedule(np.full(4, 0.1))
    r = respace(s, 2)
    assert r.timesteps == (2, 4)
    assert r.effective.beta(2) == pytest.approx(0.19, abs=1e-15)


def test_respace_rejects():
    s = default_linear_schedule(50)
    with pytest.raises(ValueError):
        respace(s, 51)
    with pytest.raises(ValueError):
        respace(s, 1)


def test_respace_preserves_marginals():
    s = default_linear_schedule(1000)
    r = respace(s, 37)
    x0, noise = np.array([[0.3, -1.2]]), np.array([[0.5, 0.7]])
    for i in range(1, r.T + 1):
        assert np.array_equal(r.effective.q_sample(x0, i, noise), s.q_sample(x0, r.parent_t(i), noise))


def test_parent_t_and_identity_wrapper():
    s = default_linear_schedule(50)
    r = as_respaced(s)
    assert r.parent_t(0) == 0 and r.parent_t(7) == 7 and r.effective is s


@settings(max_examples=40, deadline=None)
@given(T=st.integers(2, 400), lo=st.floats(1e-5, 0.05), span=st.floats(0.0, 0.5),
       choice=st.sampled_from(list(VarChoice)))
def test_schedule_invariants(T, lo, span, choice):
    s = make_linear_schedule(T, lo, min(lo + span, 0.9), choice)
    ab = s.alpha_bars
    assert np.all(np.diff(ab) < 0) and 0 < ab[-1] < ab[0] < 1
    prev = np.concatenate([[1.0], ab[:-1]])
    np.testing.assert_allclose(ab / prev, s.alphas, rtol=1e-13)
    for t in range(1, T + 1):
        assert s.posterior_var(t) <= s.sampling_var(t) <= s.beta(t)


@settings(max_examples=30, deadline=None)
@given(T=st.integers(2, 300), frac=st.floats(0.0, 1.0))
def test_respace_invariants(T, frac):
    s = make_linear_schedule(T, 1e-4, 0.02)
    tp = max(2, int(round(2 + frac * (T - 2))))
    r = respace(s, tp)
    assert r.timesteps[-1] == T
    assert all(a < b for a, b in zip(r.timesteps, r.timesteps[1:]))
    np.testing.assert_array_equal(r.effective.alpha_bars, s.alpha_bars[np.asarray(r.timesteps) - 1])


def test_csv_round_trip(tmp_path):
    s = default_linear_schedule(30)
    schedule_to_csv(s, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "t,beta,alpha_bar,posterior_var"
    assert schedule_from_csv(tmp_path / "s.csv") == s
