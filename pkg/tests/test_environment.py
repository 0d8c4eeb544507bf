import math

import numpy as np
from scipy import stats

from polymerlab import _rng
from polymerlab.environment import action, env_field, h, increment, new_field
from polymerlab.walk_kernel import Skeleton, sample_walk


def test_counter_rng_is_deterministic_and_uniform():
    u = np.array([_rng.uniform(np.uint64(_rng.key_of(7, i))) for i in range(20000)])
    assert np.all((u > 0) & (u < 1))
    assert stats.kstest(u, "uniform").pvalue > 1e-3
    again = np.array([_rng.uniform(np.uint64(_rng.key_of(7, i))) for i in range(20000)])
    assert np.array_equal(u, again)


def test_field_starts_at_zero_and_replays():
    f = new_field(3, 3)
    x = [1, -2, 0]
    assert f.values(x, [0.0])[0] == 0.0
    times = np.array([0.3, 5.7, 1.25, 2.0, 0.3])
    a = f.values(x, times)
    b = new_field(3, 3).values(x, times[::-1])[::-1]
    assert np.array_equal(a, b)
    assert a[0] == a[-1]


def test_grid_matches_point_evaluation():
    f = env_field(11, 3, 4).shifted(1.5).reversed()
    coords = np.array([[0, 0, 0], [1, 0, 0], [0, -3, 2]])
    times = np.linspace(-2.0, 3.0, 41)
    g = f.grid_values(coords, times)
    for i, c in enumerate(coords):
        assert np.array_equal(g[i], f.values(c, times))


def test_shift_and_reversal_identities():
    f = new_field(5, 2)
    x = [2, 1]
    s = 0.75
    t = np.array([0.1, 1.0, 2.5])
    shifted = f.shifted(s).values(x, t)
    direct = f.values(x, t + s) - f.values(x, [s])[0]
    assert np.allclose(shifted, direct, atol=1e-13)
    rev = f.reversed().values(x, t)
    assert np.allclose(rev, -f.values(x, -t), atol=1e-13)


def test_increments_are_gaussian_and_independent_across_sites():
    n = 4000
    inc = np.array([increment(env_field(1, 3, i), [0, 0, 0], 0.3, 1.1) for i in range(n)])
    assert abs(inc.mean()) < 4 * math.sqrt(0.8 / n)
    assert abs(inc.var() / 0.8 - 1) < 4 * math.sqrt(2 / n)
    assert stats.kstest(inc / math.sqrt(0.8), "norm").pvalue > 1e-3
    f = new_field(2, 3)
    a = np.array([f.increment([k, 0, 0], 0.0, 1.0) for k in range(n)])
    b = np.array([f.increment([k, 1, 0], 0.0, 1.0) for k in range(n)])
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / math.sqrt(n)


def test_increments_over_disjoint_intervals_are_uncorrelated():
    f = new_field(9, 3)
    n = 3000
    a = np.array([f.increment([k, 0, 0], 0.0, 0.37) for k in range(n)])
    b = np.array([f.increment([k, 0, 0], 0.37, 1.9) for k in range(n)])
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / math.sqrt(n)
    # additivity is exact
    c = np.array([f.increment([k, 0, 0], 0.0, 1.9) for k in range(n)])
    assert np.allclose(a + b, c, atol=1e-12)


def test_h_block_has_mean_zero():
    n = 20000
    vals = np.array([h(env_field(4, 3, i), 0.5, [0, 0, 0], 0.0, 2.0) for i in range(n)])
    var = math.exp(0.25 * 2.0) - 1
    assert abs(vals.mean()) < 4 * math.sqrt(var / n)


def test_action_sums_site_increments():
    f = new_field(21, 3)
    sk = Skeleton([0, 0, 0], 0.0, 2.0, [0.5, 1.2], [[1, 0, 0], [0, -1, 0]])
    want = (f.increment([0, 0, 0], 0.0, 0.5) + f.increment([1, 0, 0], 0.5, 1.2)
            + f.increment([1, -1, 0], 1.2, 2.0))
    assert math.isclose(action(f, sk), want, abs_tol=1e-12)
    walk = sample_walk([0, 0, 0], 0.0, 3.0, np.random.default_rng(0))
    assert np.isfinite(action(f, walk))
