import math
from itertools import product

import numpy as np
import pytest

from polymerlab.partition import ModelParams, alpha_for
from polymerlab.tail import (LazyModel, discrete_mean_one, disorder, green_fourier,
                             green_series, pair_local_times, return_prob_q,
                             second_moment_closed, second_moment_pair_mc,
                             second_moment_series, tail_empirical, tail_fit,
                             waiting_time_ks, z_discrete, z_discrete_exact)


def test_one_step_law():
    for d, N in [(1, 1), (3, 4), (2, 32)]:
        m = LazyModel(d, N, 0.3)
        assert m.one_step_total() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        LazyModel(3, 0, 0.1)
    with pytest.raises(ValueError):
        z_discrete(LazyModel(3, 2, 0.2), 1.25, 0, 10)


def test_zero_beta():
    m = LazyModel(3, 2, 0.0)
    assert z_discrete(m, 2.0, 1, 10).mean == 1.0
    assert z_discrete_exact(m, 2.0, 1) == pytest.approx(1.0, abs=1e-12)


def test_exact_against_enumeration():
    m = LazyModel(1, 1, 0.7)
    env = 5
    tot = 0.0
    for s1 in (-1, 0, 1):
        p = m.stay if s1 == 0 else m.neighbour
        om = disorder(m, env, [[0], [s1]], [0, 1])
        tot += p * math.exp(m.beta * om.sum() - m.beta**2)
    assert z_discrete_exact(m, 2.0, env) == pytest.approx(tot, rel=1e-13)


def test_mc_against_transfer_matrix():
    m = LazyModel(2, 2, 0.5)
    est = z_discrete(m, 2.0, 3, 40_000, path_seed=1)
    assert abs(est.mean - z_discrete_exact(m, 2.0, 3)) <= 4 * est.stderr


def test_discrete_mean_one():
    assert discrete_mean_one(LazyModel(3, 2, 0.3), 2.0, 500, 20, seed=1)["pass"]


def test_return_probability_routes_agree():
    a = alpha_for(3)
    for N in (1, 4):
        res = return_prob_q(3, N, 96)
        g_ser, tail = green_series(3, N, a.value)
        slack = 0.5 * (N + 1) * (a.tail_bound - a.tail_estimate) + tail
        assert abs(res["green"] - g_ser) <= 3 * res["green_error"] + slack
        assert 0 < res["q"] < 1
    # N(1 - q) grows with N toward 2 / (1 + alpha)
    vals = [N * (1 - return_prob_q(3, N, 64)["q"]) for N in (1, 2, 4, 8)]
    assert all(x < y for x, y in zip(vals, vals[1:]))
    assert vals[-1] < 2 / (1 + a.value)


def test_fourier_converges():
    g = [green_fourier(3, 2, m) for m in (32, 64, 128)]
    assert abs(g[2] - g[1]) < abs(g[1] - g[0])


def test_closed_form_and_series():
    assert second_moment_closed(0.0, 4, 0.5) == 1.0
    for beta, N, q in [(0.2, 1, 0.35), (0.5, 8, 0.8), (0.9, 32, 0.9)]:
        assert second_moment_series(beta, N, q) == pytest.approx(
            second_moment_closed(beta, N, q), rel=1e-10)
    with pytest.raises(ValueError):
        second_moment_closed(2.0, 1, 0.5)


def test_pair_local_times_and_bound():
    m = LazyModel(3, 2, 0.5)
    lt = pair_local_times(m, 3.0, 2000, seed=1)
    assert lt.min() >= 1  # the i = 0 coincidence is always counted
    q = return_prob_q(3, 2, 64)["q"]
    est = second_moment_pair_mc(m, 3.0, 50_000, seed=2)
    assert est.mean <= second_moment_closed(0.5, 2, q) + 3 * est.stderr


def test_waiting_time_ks_halves():
    ks = [waiting_time_ks(N, 2000)["ks_exact"] for N in (2, 4, 8, 16)]
    for a, b in zip(ks, ks[1:]):
        assert 0.45 < b / a < 0.6


def test_tail_fit_on_lognormal():
    rng = np.random.default_rng(0)
    z = np.exp(rng.normal(-0.045, 0.3, size=200_000))
    res = tail_fit(z, np.arange(0.0, 1.21, 0.05))
    assert res["b_positive_95"] and res["quadratic_better"] and res["monotone"]
    lo, hi = res["quadratic"]["b_ci"]
    assert lo > 0 and hi < 20


def test_tail_fit_needs_events():
    res = tail_fit(np.ones(100), [0.5, 1.0, 1.5])
    assert "error" in res and res["max_usable_u"] is None


def test_tail_empirical_guard():
    with pytest.raises(ValueError):
        tail_empirical(ModelParams(beta=0.9), 1.0, 10, 10)
    res = tail_empirical(ModelParams(beta=0.4), 1.0, 500, 5, u_grid=[0.0, 0.1, 0.2, 0.3])
    assert res["rows"][0]["count"] >= res["rows"][-1]["count"]
