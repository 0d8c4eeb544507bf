"""Acceptance criteria 1 to 13, each reported as one PASS/FAIL line.

These runs take about an hour in total on one core (criterion 8 alone takes
most of it).  Select single criteria with ``pytest -k c05`` and the like.
"""

import math

import numpy as np
import pytest

from polymerlab import cli
from polymerlab.environment import env_field
from polymerlab.factorization import delta_sweep
from polymerlab.moments import (_ball_classes, a_mc, a_quadrature, convolution_bound_check,
                                i_closed_form, i_quadrature, lambda_product_check,
                                p_ratio_check, q_iota_check)
from polymerlab.partition import (ModelParams, alpha_for, alpha_pair_mc, collision_mc,
                                  plateau_closed_form, second_moment_mc, second_moment_oracle,
                                  weak_disorder_threshold, z_ensemble)
from polymerlab.she import LatticeFunction, feynman_kac_crosscheck, ratio_compare
from polymerlab.tail import (LazyModel, discrete_mean_one, green_series, return_prob_q,
                             second_moment_closed, second_moment_pair_mc, tail_empirical)
from polymerlab.walk_kernel import (build_kernel, j_window, lclt_approx, p_continuous,
                                    poisson_cutoff, q)

pytestmark = pytest.mark.acceptance

LINES = []


def verdict(k: int, ok: bool, detail: str):
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} ({detail})"
    LINES.append(line)
    print(line)
    assert ok, line


def _sites(d, n):
    r = np.arange(-n, n + 1)
    g = np.stack(np.meshgrid(*([r] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return g[np.abs(g).sum(axis=1) <= n]


def test_c01_kernel_exactness():
    k = build_kernel(3, 300)
    mass_err = float(np.max(np.abs(k.mass - 1)))
    # independent sums over every site for a few depths
    direct = max(abs(math.fsum(k.q_many(n, _sites(3, n))) - 1) for n in (10, 25, 40))
    odd = [[0, 0, 0], [1, 1, 0], [2, 0, 2]]
    even = [[1, 0, 0], [1, 1, 1], [3, 0, 2]]
    parity_ok = all(q(k, n, z) == 0.0 for n in range(1, 301)
                    for z in (odd if n % 2 else even))
    ok = mass_err <= 1e-12 and direct <= 1e-12 and parity_ok
    verdict(1, ok, f"max|sum_z q_n - 1| over n<=300 = {mass_err:.2e}, direct sums {direct:.2e}, "
                   f"parity zeros exact: {parity_ok}")


def test_c02_alpha_cross_validation():
    a = alpha_for(3, 300)
    mc = alpha_pair_mc(3, 2000, 400_000, seed=0)
    rel = abs(mc.mean - a.value) / a.value
    ws = weak_disorder_threshold(3, a)
    lo, hi = ws["interval"]
    ok = rel <= 0.01 and lo <= ws["beta_star"] <= hi
    verdict(2, ok, f"alpha_3 DP {a.value:.5f} (tail bound {a.tail_bound:.2e}) vs pair MC "
                   f"{mc.mean:.5f} +/- {mc.stderr:.1e}, rel diff {rel:.2%}; beta* = "
                   f"{ws['beta_star']:.5f} in [{lo:.5f}, {hi:.5f}]")


def test_c03_mean_one():
    betas, ts = [0.1, 0.3], [1.0, 5.0, 10.0]
    z = z_ensemble(ModelParams(beta=0.1), ts, 10_000, 100, seed=3, betas=betas)[:, 0]
    parts, ok = [], True
    for j, b in enumerate(betas):
        for i, t in enumerate(ts):
            v = z[:, j, i]
            m, se = v.mean(), v.std(ddof=1) / math.sqrt(v.size)
            good = abs(m - 1) <= 3 * se
            ok &= good
            parts.append(f"b={b} t={t:g}: {m:.4f}+/-{se:.1e}")
    verdict(3, ok, "; ".join(parts))


def _increments(v):
    return np.diff(np.asarray(v))


def test_c04_second_moment_triangle():
    p = ModelParams(beta=0.2)
    ts = [1.0, 2.0, 5.0]
    oracle = second_moment_oracle(p, ts, box_radius=12)
    mc = second_moment_mc(p, ts, 20_000, 10, seed=4)
    ok_tri, parts = True, []
    for t, o, e in zip(ts, oracle, mc):
        pair = collision_mc(p, t, 200_000, seed=int(t * 10))
        g1 = abs(e.mean - o) <= 3 * e.stderr + 1e-2 * o
        g2 = abs(pair.mean - o) <= 3 * pair.stderr + 1e-2 * o
        ok_tri &= g1 and g2
        parts.append(f"t={t:g}: oracle {o:.5f}, MC {e.mean:.5f}+/-{e.stderr:.1e}, "
                     f"pair {pair.mean:.5f}+/-{pair.stderr:.1e}")
    # long t-profiles; doubling times 0.5 .. 64 on a box where escape is negligible
    alpha = alpha_for(3).value
    bstar = weak_disorder_threshold(3)["beta_star"]
    grid = [0.5 * 2**k for k in range(8)]
    weak = second_moment_oracle(p, grid, box_radius=40)
    inc = _increments(weak)
    plateau = plateau_closed_form(0.2, alpha)
    finite = bool(np.all(inc[-4:][1:] < inc[-4:][:-1]) and weak[-1] <= plateau)
    strong_b = 1.2 * bstar
    strong = second_moment_oracle(p.with_beta(strong_b), grid, box_radius=40)
    sinc = _increments(strong)
    diverges = bool(np.all(sinc[-3:][1:] >= sinc[-3:][:-1]))
    far_b = 1.2 * math.sqrt(2) * bstar
    far = second_moment_oracle(p.with_beta(far_b), grid, box_radius=40)
    far_div = bool(np.all(np.diff(_increments(far)[-3:]) >= 0))
    ok = ok_tri and finite and diverges
    parts.append(f"plateau at beta=0.2 finite: {finite} (profile end {weak[-1]:.5f} <= "
                 f"closed form {plateau:.5f})")
    parts.append(f"beta=1.2 beta*={strong_b:.4f} diverges: {diverges} (last increments "
                 f"{', '.join(f'{x:.3f}' for x in sinc[-3:])}; closed-form plateau "
                 f"{plateau_closed_form(strong_b, alpha):.3f}, finite up to sqrt(2) beta*)")
    parts.append(f"beta=1.2 sqrt(2) beta*={far_b:.4f} diverges: {far_div} "
                 f"(value at t=64 {far[-1]:.3g})")
    verdict(4, ok, "; ".join(parts))


def test_c05_lambda_and_gap_moments():
    lam_ok, parts = True, []
    for b in (0.2, 0.5):
        for r in range(1, 6):
            res = lambda_product_check(b, r, 1_000_000, seed=10 * r + int(10 * b))
            lam_ok &= res["pass"]
    parts.append(f"lambda products r<=5: {lam_ok}")
    beta = 0.5
    cells = [(t, l, r) for t in (0.5, 2.0, 5.0, 10.0)
             for l, r in ((1, 1), (2, 2), (2, 3), (3, 2), (4, 5))]
    worst, grid_ok = 0.0, True
    for i, (t, l, r) in enumerate(cells):
        qv = a_quadrature(t, l, r, beta).value
        m = a_mc(t, l, r, beta, 200_000, seed=100 + i)
        z = abs(qv - m.value) / (m.stderr if m.stderr > 0 else math.inf)
        worst = max(worst, z)
        grid_ok &= abs(qv - m.value) <= 3 * m.stderr + 1e-9
    parts.append(f"A quadrature vs MC on {len(cells)} cells: {grid_ok} (max |z| {worst:.2f})")
    gold = max(abs(i_quadrature(t, l, r, beta) / i_closed_form(t, l, r, beta) - 1)
               for t in (0.5, 2.0, 10.0) for l, r in ((1, 1), (1, 2)))
    parts.append(f"I(t,1,1), I(t,1,2) closed forms max rel err {gold:.1e}")
    verdict(5, lam_ok and grid_ok and gold <= 1e-9, "; ".join(parts))


def test_c06_local_clt():
    ys = _ball_classes(3, 10.0)
    n = poisson_cutoff(200.0, 1e-12)
    s = int(np.abs(ys).sum(axis=1).max())
    k = build_kernel(3, n, (n + s) // 2 + 1, s)
    err = {t: float(np.max(np.abs(p_continuous(k, t, ys) / lclt_approx(3, t, ys) - 1)))
           for t in (50.0, 100.0, 200.0)}
    ok = err[100.0] <= 0.15 and err[200.0] < err[50.0]
    verdict(6, ok, f"max |p/gauss - 1| over |y|<=10: t=50 {err[50.0]:.4f}, t=100 "
                   f"{err[100.0]:.4f}, t=200 {err[200.0]:.4f}")


def test_c07_kernel_ratio_constants():
    need_q = max(j_window(2 * 400**0.1, 0.6)) + max(j_window(400 - 2 * 400**0.1, 0.6)) + 1
    n = max(need_q, poisson_cutoff(400, 1e-12))
    s = int(math.ceil(400**0.8 * math.sqrt(3))) + 1
    k = build_kernel(3, n, (n + s) // 2 + 1, s, memory_limit=3 * 2**30)
    pr = p_ratio_check(k, 0.2, [200, 400], xi=0.5, sigma=0.8)
    qi = q_iota_check(k, [200, 400], xi1=0.1, sigma=0.8)
    ok = pr["finite"] and pr["stable_10pct"] and qi["finite"] and qi["stable_10pct"]
    verdict(7, ok, f"p-ratio C: {pr['C_first']:.4f} -> {pr['C']:.4f}; q-iota C: "
                   f"{qi['C_first']:.3f} -> {qi['C']:.3f} (t = 200 -> 400, sigma 0.8)")


def test_c08_factorization_decay():
    res = delta_sweep(ModelParams(beta=0.2, sigma=0.6), t_list=(20, 40, 80), n_env=2000, seed=8)
    rows = res["rows"]
    ok = res["last_below_first_95"] and res["theta_positive_95"]
    table = ", ".join(f"t={r['t']:g}: {r['sup_mean_abs_delta']:.4f} "
                      f"[{r['ci_lo']:.4f}, {r['ci_hi']:.4f}]" for r in rows)
    verdict(8, ok, f"sup_y <|delta|> {table}; theta = {res['theta']:.3f} CI "
                   f"[{res['theta_ci'][0]:.3f}, {res['theta_ci'][1]:.3f}]")


def test_c09_she_crosscheck():
    p = ModelParams(beta=0.2)
    fk = feynman_kac_crosscheck(env_field(9, 3, 0), p, [0, 0, 0], 2.0, [1e-3, 5e-4],
                                16_000_000, box_radius=8, path_seed=1)
    rel = [leg["rel_diff"] for leg in fk["legs"]]
    shrink = fk["shrink"][0]
    R = 12
    f1 = LatticeFunction.constant(3, R)
    f2 = LatticeFunction.constant(3, R)
    f2.values[(R,) * 3] += 1.0
    ys = [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    rc = ratio_compare(p, f1, f2, ys, [2.0, 8.0], 1 / 16, 1000, seed=9)
    g2, g8 = rc["rows"][0]["median_gap"], rc["rows"][1]["median_gap"]
    ok = max(rel) <= 0.05 and shrink >= 1.5 and g8 < g2
    verdict(9, ok, f"FK vs integrator rel diff {rel[0]:.2e} (dt 1e-3), {rel[1]:.2e} "
                   f"(dt 5e-4), shrink {shrink:.2f}, FK rel stderr {fk['fk_rel_stderr']:.1e}; "
                   f"median ratio gap t=2 {g2:.4f}, t=8 {g8:.4f}")


def test_c10_discrete_model():
    d, beta = 3, 0.2
    a = alpha_for(d)
    ok, parts, vals = True, [], []
    for N in (1, 2, 4, 8, 16, 32):
        qd = return_prob_q(d, N, 128)
        gs, gtail = green_series(d, N, a.value)
        routes = abs(qd["green"] - gs) <= qd["green_error"] + gtail + 0.5 * (N + 1) * a.tail_bound
        model = LazyModel(d, N, beta)
        closed = second_moment_closed(beta, N, qd["q"])
        tol = 10 * closed * qd["q_error"]
        mo = discrete_mean_one(model, 1.0, 1000, 200, seed=N)
        gaps, env_ok = [], True
        for t in (1.0, 4.0, 16.0):
            pm = second_moment_pair_mc(model, t, 100_000, seed=N)
            env_ok &= pm.mean <= closed + 3 * pm.stderr + tol
            gaps.append((closed - pm.mean, pm.stderr))
        approach = all(g1[0] < g0[0] + 3 * g1[1] for g0, g1 in zip(gaps, gaps[1:]))
        ok &= routes and mo["pass"] and env_ok and approach
        if N >= 2:
            vals.append(N * (1 - qd["q"]))
        parts.append(f"N={N}: <Z>={mo['mean']:.4f}+/-{mo['stderr']:.1e}, closed {closed:.5f}, "
                     f"gap {gaps[0][0]:.4f}->{gaps[-1][0]:.4f}")
    limit = 2 / (1 + a.value)
    c1, c2 = min(vals), max(vals)
    bracket = 0 < c1 <= c2 < limit + 1e-3
    ok &= bracket
    parts.append(f"N(1-q) in [{c1:.4f}, {c2:.4f}] for N=2..32, limit {limit:.4f}")
    verdict(10, ok, "; ".join(parts))


def test_c11_lower_tail():
    res = tail_empirical(ModelParams(beta=0.2), 5.0, 100_000, 100, seed=11)
    assert "error" not in res, res.get("error")
    qd = res["quadratic"]
    ok = res["b_positive_95"] and res["quadratic_better"]
    verdict(11, ok, f"b = {qd['b']:.3f} CI [{qd['b_ci'][0]:.3f}, {qd['b_ci'][1]:.3f}]; "
                    f"weighted SSE quadratic {qd['wsse']:.3g} vs exponential "
                    f"{res['linear']['wsse']:.3g}; usable u <= {res['max_usable_u']}")


def test_c12_convolution_bound():
    r100 = convolution_bound_check(3, 5, 100)
    r200 = convolution_bound_check(3, 5, 200)
    finite = r100["finite"] and r100["c"] <= r100["proof_constant"]
    nonincreasing = r200["c"] <= r100["c"]
    verdict(12, finite and nonincreasing,
            f"c(n_max=100) = {r100['c']:.4f} at (r, n) = {r100['argmax']}, finite and below "
            f"{r100['proof_constant']:.3f}: {finite}; c(200) = {r200['c']:.4f}, nonincreasing: "
            f"{nonincreasing} (c is a sup over a growing index set)")


def test_c13_reproducibility():
    code = cli.main(["selftest"], quiet=True)
    verdict(13, code == 0, f"selftest replays with 1 and 2 workers byte-identical: exit {code}")
