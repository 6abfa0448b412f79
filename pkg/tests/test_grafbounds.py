import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import special

from helmfmm import grafbounds as gb
from helmfmm import specfun
from helmfmm.grafbounds import InapplicableBoundError, TailQuery


def naive_tail(kernel, m, p, x, y, n_max=1000):
    """Independent per-term loop on scipy Bessel values."""
    f = {"J": special.jv, "Y": special.yv, "H": lambda n, z: abs(special.hankel1(n, z))}[kernel]
    total = 0.0
    for n in range(p + 1, n_max + 1):
        jn = abs(special.jv(n, y))
        if jn == 0:
            break
        total += jn * (abs(f(n + m, x)) + abs(f(n - m, x)))
    return total


def test_tail_empty_sum():
    assert gb.tail_exact("J", TailQuery(0, 1000, 2.0, 1.0), n_max=1000) == 0.0


def test_tail_h_matches_naive_loop():
    ours = gb.tail_exact("H", TailQuery(2, 10, 3.0, 1.0))
    assert_allclose(ours, naive_tail("H", 2, 10, 3.0, 1.0), rtol=1e-12)


@pytest.mark.parametrize("kernel", ["J", "Y"])
def test_tail_matches_naive_loop(kernel):
    for m, p in ((0, 3), (5, 8), (12, 4)):
        assert_allclose(gb.tail_exact(kernel, TailQuery(m, p, 3.0, 1.0)),
                        naive_tail(kernel, m, p, 3.0, 1.0), rtol=1e-11)


def test_tail_monotone_in_nmax():
    q = TailQuery(3, 5, 3.0, 1.0)
    vals = [gb.tail_exact("Y", q, n) for n in (6, 10, 20, 50, 1000)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_tail_rejects_bad_x():
    with pytest.raises(ValueError):
        gb.tail_exact("Y", TailQuery(0, 2, 0.0, 0.0))


def test_relative_tail_examples():
    assert gb.relative_tail(0, 1000, 3.0, 1.0) == 0.0
    r = gb.relative_tail(0, 0, 3.0, 1.0)
    assert 0 < r < 1
    num = np.sum(gb.tail_terms("Y", TailQuery(0, 0, 3.0, 1.0), both=False))
    assert_allclose(r, num / gb.tail_denominator(0, 3.0, 1.0), rtol=1e-14)
    # the diagonal sweep decays
    diag = [gb.relative_tail(p, p, 3.0, 1.0) for p in range(3, 30)]
    assert all(b < a for a, b in zip(diag, diag[1:]))
    with pytest.raises(ValueError):
        gb.relative_tail(0, 1, 1.0, 2.0)


def test_l6_formula_and_zero():
    assert gb.bound_jj_l6(TailQuery(4, 10, 5.0, 0.0)) == 0.0
    t = math.e / 11
    assert_allclose(gb.bound_jj_l6(TailQuery(3, 10, 5.0, 2.0)), t ** 11 / (math.sqrt(22 * math.pi) * (1 - t)),
                    rtol=1e-14)
    with pytest.raises(InapplicableBoundError):
        gb.bound_jj_l6(TailQuery(0, 2, 5.0, 4.0))


def test_l6_dominates_one_branch():
    for y in (0.5, 2.0, 6.0):
        for p in range(math.ceil(math.e * y / 2), 40, 3):
            for m in (0, 2, 7):
                q = TailQuery(m, p, 4.0, y)
                one = gb.tail_terms("J", q, both=False).sum()
                assert one <= gb.bound_jj_l6(q)
                assert gb.tail_exact("J", q) <= gb.bound_bj(q)


def test_l7_m0_branch():
    x, y, p = 3.0, 1.0, 6
    r = y / x
    want = specfun.cap_c(p + 1, x) * r ** (p + 1) / (math.pi * (p + 1) * (1 - r))
    assert_allclose(gb.bound_jy_l7(TailQuery(0, p, x, y)), want, rtol=1e-13)


def test_l7_alpha_degenerate_limit():
    # b = c happens at r = b/(2m-1+b); the closed form must stay finite there
    m, p = 3, 5
    b = 2 * p + 2 * m + 1
    r = b / (2 * m - 1 + b)
    la = gb._log_alpha(m, p, r)
    assert_allclose(math.exp(la), 2 * m * b ** (m - 1), rtol=1e-12)


def test_l7_dominates_grid():
    for m in range(0, 21):
        for p in range(0, 41):
            if p + m < 3:
                continue
            q = TailQuery(m, p, 3.0, 1.0)
            one = gb.tail_terms("Y", q, both=False).sum()
            assert one <= gb.bound_jy_l7(q)


def test_l7_inapplicable():
    with pytest.raises(InapplicableBoundError):
        gb.bound_jy_l7(TailQuery(0, 1, 3.0, 1.0))
    with pytest.raises(InapplicableBoundError):
        gb.bound_jy_l7(TailQuery(2, 5, 3.0, 3.0))


def test_l8_dominates_and_sharp():
    for m in range(0, 31):
        for p in range(max(m - 2, 3), 41):
            q = TailQuery(m, p, 3.0, 1.0)
            one = gb.tail_terms("Y", q, both=False).sum()
            b = gb.bound_jy_l8(q)
            assert one <= b
            if m == p:
                assert b <= 10 * one


def test_l8_inapplicable():
    with pytest.raises(InapplicableBoundError):
        gb.bound_jy_l8(TailQuery(0, 5, 3.0, 2.0))
    with pytest.raises(InapplicableBoundError):
        gb.bound_jy_l8(TailQuery(10, 5, 3.0, 1.0))


def test_bh_routes_and_dominates():
    assert gb.bh_route(TailQuery(2, 6, 3.0, 1.0)) is gb.BoundKind.BH_FROM_L8
    assert gb.bh_route(TailQuery(2, 6, 3.0, 2.0)) is gb.BoundKind.BH_FROM_L7
    for y in (0.5, 1.0, 2.0, 2.7):
        for m in (0, 1, 4, 9):
            for p in range(0, 40, 3):
                q = TailQuery(m, p, 3.0, y)
                if p + m < 3:
                    continue
                one = gb.tail_terms("Y", q, both=False).sum()
                assert gb.tail_exact("H", q) <= 4 * one <= gb.bound_bh(q)


def test_graf_remainder_closes_series():
    xv, yv = complex(2.0, 1.0), complex(0.3, -0.4)
    k = 3.0
    for kernel in ("J", "H"):
        for m in (0, 3, -2):
            full = gb.graf_target(kernel, m, k * xv, k * yv)
            part = gb.graf_partial(kernel, m, 10, k * xv, k * yv)
            rem = gb.graf_remainder(kernel, m, 10, k * xv, k * yv)
            assert_allclose(part + rem, full, rtol=1e-12, atol=1e-14)
