import math

import numpy as np
import pytest

from polymerlab.environment import env_field, new_field
from polymerlab.partition import ModelParams
from polymerlab.she import (IntegrationError, LatticeFunction, feynman_kac_crosscheck,
                            integrate, laplacian, noise_factor_mean, periodic_kernel,
                            ratio_compare)

P0 = ModelParams(beta=0.0)


def test_laplacian_kinds():
    u = np.random.default_rng(0).random((5, 5, 5))
    assert np.allclose(laplacian(u, "graph"), 6 * laplacian(u, "walk"))
    assert abs(laplacian(u).sum()) < 1e-12
    with pytest.raises(ValueError):
        laplacian(u, "bogus")


def test_constant_stays_constant_without_noise():
    f = new_field(0, 3)
    out = integrate(f, P0, LatticeFunction.constant(3, 3), 1.0, 0.05)
    assert np.allclose(out.values, 1.0, atol=1e-14)
    assert out.time == pytest.approx(1.0)


def test_heat_kernel_convergence(kernel3):
    f = new_field(0, 3)
    t, y, r = 1.0, [1, 0, 0], 5
    ref = periodic_kernel(kernel3, t, y, r)
    errs = []
    for dt in (0.05, 0.025, 0.0125):
        u = integrate(f, P0, LatticeFunction.delta(3, r), t, dt)
        assert u.values.sum() == pytest.approx(1.0, abs=1e-12)
        errs.append(abs(u.at(y) - ref))
    assert errs[0] / errs[1] > 1.7 and errs[1] / errs[2] > 1.7


def test_graph_laplacian_is_time_rescaled():
    f = new_field(0, 2)
    a = integrate(f, P0, LatticeFunction.delta(2, 4), 0.5, 0.01, laplacian_kind="graph")
    b = integrate(f, P0, LatticeFunction.delta(2, 4), 2.0, 0.04)
    assert np.allclose(a.values, b.values, atol=1e-15)


def test_mean_evolution_matches_heat_flow():
    p = ModelParams(d=2, beta=0.6)
    f0 = LatticeFunction.delta(2, 4)
    heat = integrate(new_field(0, 2), p.with_beta(0.0), f0, 1.0, 0.05).values
    vals = np.array([integrate(env_field(3, 2, e), p, f0, 1.0, 0.05).values for e in range(300)])
    m = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(len(vals))
    close = np.abs(m - heat) <= 4 * se + 1e-15
    assert close.mean() > 0.99
    assert vals.min() > 0


def test_guards():
    f = new_field(0, 3)
    f0 = LatticeFunction.constant(3, 2)
    with pytest.raises(ValueError):
        integrate(f, P0, f0, 1.0, 0.2)
    with pytest.raises(ValueError):
        integrate(f, P0, f0, 1.0, 0.03)
    with pytest.raises(ValueError):
        LatticeFunction(2, np.full((5, 5, 5), np.inf))
    with pytest.raises(IntegrationError, match="step"):
        integrate(f, ModelParams(beta=0.5).with_beta(3.0), LatticeFunction.constant(3, 2, 1e308),
                  1.0, 0.1)


def test_checkpoint_hook_and_roundtrip(tmp_path):
    f = env_field(1, 3, 0)
    p = ModelParams(beta=0.4)
    seen = []

    def hook(lf):
        seen.append(lf.time)
        return LatticeFunction(lf.radius, lf.values / lf.at([0, 0, 0]), lf.time)

    out = integrate(f, p, LatticeFunction.constant(3, 2), 1.0, 0.0625,
                    checkpoints=[0.5], on_checkpoint=hook)
    plain = integrate(f, p, LatticeFunction.constant(3, 2), 1.0, 0.0625)
    assert seen == [0.5]
    ratio = out.values / plain.values
    assert np.allclose(ratio, ratio.flat[0], rtol=1e-12)

    out.dump(tmp_path / "u")
    back = LatticeFunction.load(tmp_path / "u")
    assert np.array_equal(back.values, out.values) and back.time == out.time
    raw = (tmp_path / "u.bin").read_bytes()
    (tmp_path / "u.bin").write_bytes(raw[:-1] + bytes([raw[-1] ^ 1]))
    with pytest.raises(ValueError):
        LatticeFunction.load(tmp_path / "u")


def test_noise_factor_mean():
    for d in (2, 3):
        assert noise_factor_mean(0.5, 0.01, 20_000, seed=2, d=d)["pass"]


def test_feynman_kac_small():
    res = feynman_kac_crosscheck(env_field(0, 3, 2), ModelParams(beta=0.3), [1, 0, 0], 0.5,
                                 [0.01, 0.005], 40_000, box_radius=4)
    for leg in res["legs"]:
        assert leg["rel_diff"] < 0.05
    assert res["fk_rel_stderr"] < 0.01


def test_ratio_compare_invariances():
    p = ModelParams(beta=0.4)
    f1 = LatticeFunction.constant(3, 3)
    f2 = LatticeFunction(3, 3.0 * np.ones((7, 7, 7)))
    res = ratio_compare(p, f1, f2, [[1, 0, 0], [0, 2, 0]], [0.5, 1.0], 0.0625, 8)
    assert np.all(res["gaps"] < 1e-12)
    v = np.ones((7, 7, 7))
    v[4] = 2.0
    f3 = LatticeFunction(3, v)
    res = ratio_compare(p, f1, f3, [[1, 0, 0], [0, 2, 0]], [0.5, 2.0], 0.0625, 16, workers=2)
    assert res["decreasing"]
    again = ratio_compare(p, f1, f3, [[1, 0, 0], [0, 2, 0]], [0.5, 2.0], 0.0625, 16, workers=1)
    assert np.array_equal(res["gaps"], again["gaps"])
    with pytest.raises(ValueError):
        ratio_compare(p, f1, LatticeFunction(3, 0 * v), [[1, 0, 0]], [1.0], 0.0625, 2)
