import math

import numpy as np
import pytest

from polymerlab.moments import (RegimeError, a_bound_check, a_mc, a_quadrature,
                                convolution_bound_check, convolution_lhs,
                                convolution_lhs_direct, i_closed_form, i_quadrature, lam,
                                lambda_product_check, p_ratio_check, psi, q_iota_check)


def test_lambda_and_psi_regimes():
    assert lam(0.0) == 0.0
    assert lam(0.5) == pytest.approx(1 / 3)
    with pytest.raises(RegimeError):
        lam(1.0)
    assert psi(0.2, 0.6, 0.8) > 0
    with pytest.raises(RegimeError):
        psi(0.9, 0.6, 0.8)
    with pytest.raises(RegimeError):
        psi(0.1, 0.6, 0.5)


@pytest.mark.parametrize("r", [1, 3])
def test_lambda_product(r):
    assert lambda_product_check(0.4, r, 200_000, seed=r)["pass"]


@pytest.mark.parametrize("lr", [(1, 1), (1, 2), (2, 2)])
def test_closed_forms(lr):
    for t in (0.5, 3.0):
        assert i_quadrature(t, *lr, 0.3) == pytest.approx(i_closed_form(t, *lr, 0.3), rel=1e-9)


def test_quadrature_matches_mc():
    for t, l, r in [(2.0, 3, 2), (4.0, 4, 5), (1.0, 5, 3)]:
        q = a_quadrature(t, l, r, 0.4)
        m = a_mc(t, l, r, 0.4, 200_000, seed=l)
        assert abs(q.value - m.value) <= 3.5 * m.stderr + 1e-9


def test_a_at_zero_beta_is_indicator():
    # with beta = 0 the gap factors vanish for r >= 3 and equal one otherwise
    assert a_quadrature(2.0, 3, 1, 0.0).value == pytest.approx(1.0)
    assert a_quadrature(2.0, 3, 3, 0.0).value == pytest.approx(0.0, abs=1e-12)


def test_a_bound_small_grid():
    res = a_bound_check([2.0, 4.0], [1, 2, 3], [1, 2], 0.2, n_samples=20_000)
    assert res["finite"]


def test_convolution_recursion_matches_brute_force():
    s = convolution_lhs(3, 3, 12)
    for r in (1, 2, 3):
        for n in (r + 1, 7, 12):
            assert s[r, n] == pytest.approx(convolution_lhs_direct(3, r, n), rel=1e-12)


def test_convolution_constant_below_proof_constant():
    res = convolution_bound_check(3, 5, 100)
    assert res["finite"]
    assert res["c"] <= res["proof_constant"]
    with pytest.raises(ValueError):
        convolution_bound_check(2, 2, 10)


def test_kernel_ratio_checks(kernel3):
    res = p_ratio_check(kernel3, 0.2, [10.0, 20.0], xi=0.5)
    assert res["finite"]
    assert all(r["sup_ratio"] >= 1 for r in res["rows"])
    res = q_iota_check(kernel3, [20.0, 40.0], xi1=0.1)
    assert res["finite"] and res["C"] > 0
    with pytest.raises(ValueError):
        q_iota_check(kernel3, [500.0], xi1=0.1)
    with pytest.raises(ValueError):
        p_ratio_check(kernel3, 0.2, [10.0], xi=0.5, sigma=0.6)
