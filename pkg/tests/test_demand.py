import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from billsim.demand import DemandError, household_omega, optimal_spending, utility


def golden_max(f, lo, hi, tol=1e-15):
    """Golden-section search for the maximiser of a unimodal f on [lo, hi].

    Runs in 40-digit arithmetic: near a quadratic maximum f changes by only
    O(step^2), so double precision cannot resolve the argmax to 1e-6.
    """
    mpmath.mp.dps = 40
    r = (mpmath.sqrt(5) - 1) / 2
    a, b = mpmath.mpf(lo), mpmath.mpf(hi)
    c, d = b - r * (b - a), a + r * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol * max(1.0, abs(a) + abs(b)):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - r * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + r * (b - a)
            fd = f(d)
    return float((a + b) / 2)


@pytest.mark.parametrize("lam,omega,c,expected", [(100, 50, 1.0, 100), (100, 50, 0.0, 150), (-80, 50, 0.6, 0)])
def test_examples(lam, omega, c, expected):
    assert optimal_spending(lam, omega, c) == pytest.approx(expected)


def test_domain_errors():
    with pytest.raises(DemandError):
        optimal_spending(10, 50, 1.2)
    with pytest.raises(DemandError):
        household_omega([])
    with pytest.raises(DemandError):
        household_omega([1.0, -2.0])


def test_golden_section_oracle():
    g = np.random.default_rng(11)
    for _ in range(500):
        lam = g.uniform(-300, 500)
        omega = g.uniform(1, 1000)
        c = g.uniform(0, 1)
        m = optimal_spending(lam, omega, c)
        hi = max(lam, 0) + omega + 10
        lm, om, cm = mpmath.mpf(lam), mpmath.mpf(omega), mpmath.mpf(c)
        oracle = golden_max(lambda x: (x - lm) - (x - lm) ** 2 / (2 * om) - cm * x, 0.0, hi)
        assert m == pytest.approx(oracle, abs=1e-6)


def test_first_order_condition_and_local_optimum():
    lam, omega, c = 120.0, 300.0, 0.2
    m = optimal_spending(lam, omega, c)
    h = 1e-4
    du = (utility(m + h, lam, omega, c * (m + h)) - utility(m - h, lam, omega, c * (m - h))) / (2 * h)
    assert abs(du) < 1e-6
    u0 = utility(m, lam, omega, c * m)
    assert u0 >= utility(m + 10, lam, omega, c * (m + 10))
    assert u0 >= utility(m - 10, lam, omega, c * (m - 10))
    assert utility(lam, lam, omega, 0.0) == 0.0


@given(lam=st.floats(-500, 500), omega=st.floats(1, 2000), c1=st.floats(0, 1), c2=st.floats(0, 1))
def test_monotone_in_price(lam, omega, c1, c2):
    lo, hi = min(c1, c2), max(c1, c2)
    assert optimal_spending(lam, omega, hi) <= optimal_spending(lam, omega, lo) + 1e-9


@given(lam=st.floats(0, 500), omega=st.floats(1, 2000), c=st.floats(0, 1))
def test_price_drop_jump(lam, omega, c):
    jump = optimal_spending(lam, omega, c) - optimal_spending(lam, omega, 1.0)
    assert jump == pytest.approx(omega * (1 - c), rel=1e-12, abs=1e-9)


def test_household_omega():
    assert household_omega([250.0]) == pytest.approx(250.0)
    assert household_omega([math.e, math.e**3]) == pytest.approx(math.e**2)
    assert household_omega([7.0, 7.0, 7.0]) == pytest.approx(7.0)


def test_vectorised():
    out = optimal_spending(np.array([100.0, -80.0]), np.array([50.0, 50.0]), np.array([0.0, 0.6]))
    assert np.allclose(out, [150.0, 0.0])
