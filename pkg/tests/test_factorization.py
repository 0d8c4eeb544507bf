import numpy as np
import pytest

from polymerlab.environment import env_field
from polymerlab.factorization import (HorizonError, _sup_mean_abs, delta_estimate,
                                      delta_sweep, make_plan)
from polymerlab.partition import ModelParams
from polymerlab.walk_kernel import KernelError


def test_zero_beta_gives_zero_delta():
    p = ModelParams(beta=0.0)
    f = env_field(0, 3, 0)
    cell = delta_estimate(f, p, 6.0, [1, 0, 0], n_paths=50)
    assert cell.delta == pytest.approx(0.0, abs=1e-14)
    cell = delta_estimate(f, p, 6.0, [1, 0, 0], H=2.0, method="lattice")
    assert cell.delta == 0.0
    res = delta_sweep(p, t_list=(4, 8), n_env=4, n_boot=10)
    assert np.nanmax(np.abs(res["delta"])) == 0.0


def test_guards():
    p = ModelParams(beta=0.2)
    f = env_field(0, 3, 0)
    with pytest.raises(HorizonError):
        delta_estimate(f, p, 6.0, [0, 0, 0], H=4.0)
    with pytest.raises(HorizonError):
        delta_estimate(f, p, 6.0, [0, 0, 0], H=0.0)
    with pytest.raises(KernelError):
        delta_estimate(f, p, 6.0, [3, 0, 0])
    with pytest.raises(ValueError):
        delta_estimate(f, p, 6.0, [0, 1, 0], H=2.0, method="lattice")
    with pytest.raises(ValueError):
        delta_estimate(f, p, 6.0, [0, 0, 0], method="other")
    with pytest.raises(ValueError):
        make_plan(3, [5.25], 0.6)


def test_plan_geometry():
    plan = make_plan(3, (20, 40, 80), 0.6)
    assert plan.y_max == (6, 9, 13)
    assert plan.h_steps == (13, 26, 53)
    assert plan.shape[0] == plan.e1_hi + plan.radius + 1
    assert plan.sites().shape == (int(np.prod(plan.shape)), 3)


def test_bridge_cell_record():
    cell = delta_estimate(env_field(1, 3, 0), ModelParams(beta=0.3), 4.0, [1, 0, 0],
                          n_paths=400)
    rec = cell.record(seed=1)
    assert rec["method"] == "bridge" and np.isfinite(rec["delta"]) and cell.stderr > 0
    assert rec["z_fwd"] > 0 and rec["z_bwd"] > 0


def test_sweep_matches_single_cell_and_workers():
    p = ModelParams(beta=0.3)
    a = delta_sweep(p, t_list=(6,), n_env=3, seed=2, n_boot=20, radius=8)
    b = delta_sweep(p, t_list=(6,), n_env=3, seed=2, n_boot=20, radius=8, workers=2)
    assert np.array_equal(a["delta"], b["delta"], equal_nan=True)
    cell = delta_estimate(env_field(2, 3, 1), p, 6.0, [1, 0, 0], H=2.0, method="lattice")
    assert cell.delta == pytest.approx(a["delta"][1, 0, 1], abs=1e-6)


def test_sup_mean_abs_ignores_padding():
    d = np.array([[[0.1, np.nan], [0.2, -0.4]], [[-0.3, np.nan], [0.0, 0.2]]])
    assert np.allclose(_sup_mean_abs(d), [0.2, 0.3])


def test_small_sweep_fields():
    res = delta_sweep(ModelParams(beta=0.3), t_list=(4, 8), n_env=20, n_boot=50)
    assert len(res["rows"]) == 2
    for r in res["rows"]:
        assert r["ci_lo"] <= r["sup_mean_abs_delta"] <= r["ci_hi"]
    assert res["theta_ci"][0] <= res["theta_ci"][1]
