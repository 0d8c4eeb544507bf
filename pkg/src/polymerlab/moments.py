"""Closed-form constants and conditional gap moments, with independent numerical checks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy import integrate

from .walk_kernel import TransitionKernel, iota, j_window, p_continuous, poisson_cutoff, q_matrix

L_MAX_QUAD = 12
QUAD_TOL = 1e-9
_CHEB_DEG = 48


class RegimeError(ValueError):
    pass


def lam(beta: float) -> float:
    """``E[exp(beta^2 tau) - 1]`` for ``tau ~ Exp(1)``."""
    if not 0 <= beta < 1:
        raise RegimeError("lambda is defined for 0 <= beta < 1")
    return beta**2 / (1 - beta**2)


def psi(beta: float, nu: float, nu1: float) -> float:
    den = (1 - nu1) * ((2 - nu) * (1 - nu1) - beta**2)
    if not 0.5 < nu < 1 or not 1 / nu - 1 < nu1 < 1:
        raise RegimeError("need nu in (1/2, 1) and nu1 in (1/nu - 1, 1)")
    if den <= 0:
        raise RegimeError("outside small-beta regime: denominator <= 0")
    return beta**2 / den


def _mc(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def lambda_product_check(beta: float, r: int, n_samples: int, seed: int = 0,
                         chunk: int = 1_000_000) -> dict:
    """MC of ``E prod_j (exp(beta^2 tau_j) - 1)`` against ``lambda^r``."""
    if r < 1:
        raise ValueError("r >= 1")
    target = lam(beta) ** r
    if beta == 0:
        return {"beta": beta, "r": r, "mc": 0.0, "stderr": 0.0, "target": 0.0, "pass": True}
    rng = np.random.default_rng(seed)
    s1 = s2 = 0.0
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        tau = rng.exponential(size=(m, r))
        v = np.prod(np.expm1(beta**2 * tau), axis=1)
        s1 += math.fsum(v)
        s2 += math.fsum(v * v)
        done += m
    mean = s1 / n_samples
    se = math.sqrt(max(s2 / n_samples - mean**2, 0.0) / (n_samples - 1))
    return {"beta": beta, "r": r, "mc": mean, "stderr": se, "target": target,
            "pass": bool(abs(mean - target) <= 3 * se)}


@dataclass(frozen=True)
class GapMoment:
    t: float
    l: int
    r: int
    value: float
    method: str
    stderr: float = 0.0


def _check_lr(l: int, r: int):
    if l < 0 or not 1 <= r <= l + 1:
        raise ValueError("need l >= 0 and 1 <= r <= l + 1")


def gap_product(gaps: np.ndarray, r: int, beta: float) -> np.ndarray:
    """Integrand of ``A(t,l,r)`` on rows of gaps ``t_1 .. t_{l+1}``."""
    b2 = beta**2
    out = np.ones(gaps.shape[0])
    for j in range(1, r - 1):
        out *= np.expm1(b2 * gaps[:, j - 1])
    last = gaps[:, r - 1] + (gaps[:, r - 2] if r >= 2 else 0.0)
    return out * np.exp(b2 * last)


def a_mc(t: float, l: int, r: int, beta: float, n_samples: int, seed: int = 0) -> GapMoment:
    """``A(t,l,r)`` from ``l`` uniform jump times on ``(0, t)``."""
    _check_lr(l, r)
    rng = np.random.default_rng(seed)
    s = np.sort(rng.uniform(0, t, size=(n_samples, l)), axis=1)
    edges = np.concatenate([np.zeros((n_samples, 1)), s, np.full((n_samples, 1), t)], axis=1)
    vals = gap_product(np.diff(edges, axis=1), r, beta)
    if n_samples == 1:
        return GapMoment(t, l, r, float(vals[0]), "mc", math.inf)
    m, se = _mc(vals)
    return GapMoment(t, l, r, m, "mc", se)


def _factors(r: int, b2: float):
    ex = lambda u: np.exp(b2 * u)
    em = lambda u: np.expm1(b2 * u)
    if r == 1:
        return [ex]
    return [em] * (r - 2) + [ex, ex]


def _convolve_on(f, g, t: float, deg: int = _CHEB_DEG):
    """Chebyshev interpolant of ``x -> int_0^x f(s) g(x - s) ds`` on ``[0, t]``."""
    nodes = 0.5 * t * (1 + np.cos(np.pi * (np.arange(deg + 1) + 0.5) / (deg + 1)))
    vals = np.empty_like(nodes)
    for i, x in enumerate(nodes):
        vals[i] = integrate.quad(lambda s: f(s) * g(x - s), 0.0, x, epsabs=1e-15,
                                 epsrel=1e-13, limit=200)[0]
    coef = C.chebfit(2 * nodes / t - 1, vals, deg)
    return lambda u: C.chebval(2 * np.asarray(u) / t - 1, coef)


def i_quadrature(t: float, l: int, r: int, beta: float) -> float:
    """``I(t,l,r)``: the simplex integral, as nested one-dimensional convolutions.

    Integrating out the ``l - r`` unselected gaps leaves the kernel
    ``K(u) = u^(l-r)/(l-r)!`` (absent when ``r = l + 1``).
    """
    _check_lr(l, r)
    if l > L_MAX_QUAD:
        raise ValueError(f"l={l} exceeds the quadrature limit {L_MAX_QUAD}")
    fs = _factors(r, beta**2)
    if r <= l:
        k = l - r
        fs = fs + [lambda u, k=k: np.asarray(u, dtype=float) ** k / math.factorial(k)]
    if len(fs) == 1:
        return float(fs[0](t))
    g = fs[-1]
    for f in reversed(fs[1:-1]):
        g = _convolve_on(f, g, t)
    f0 = fs[0]
    return integrate.quad(lambda s: f0(s) * g(t - s), 0.0, t, epsabs=1e-15, epsrel=1e-13,
                          limit=200)[0]


def a_quadrature(t: float, l: int, r: int, beta: float) -> GapMoment:
    val = math.factorial(l) / t**l * i_quadrature(t, l, r, beta)
    return GapMoment(t, l, r, val, "quadrature", QUAD_TOL)


def i_closed_form(t: float, l: int, r: int, beta: float) -> float:
    """Closed forms for the base cases ``(1,1)``, ``(1,2)`` and ``(2,2)``."""
    b2 = beta**2
    e = math.exp(b2 * t)
    if (l, r) == (1, 1):
        return math.expm1(b2 * t) / b2
    if (l, r) == (1, 2):
        return e * t
    if (l, r) == (2, 2):
        return (e * t - (e - 1) / b2) / b2
    raise ValueError("no closed form for this cell")


def a_bound_shape(t: float, l: int, r: int, beta: float) -> float:
    prod = math.prod(range(l + 1, l + r + 1))
    return (l + 1) ** 2 * math.exp(beta**2 * t) * beta ** (2 * r) * t**r / prod


def a_value(t, l, r, beta, n_samples=200_000, seed=0) -> GapMoment:
    """Quadrature where affordable, otherwise MC."""
    if l <= L_MAX_QUAD:
        return a_quadrature(t, l, r, beta)
    return a_mc(t, l, r, beta, n_samples, seed)


def a_bound_check(t_grid, l_grid, r_grid, beta: float, nu: float = 0.6, nu1: float = 0.8,
                  psi_t_grid=(4.0, 6.0), n_samples: int = 200_000, seed: int = 0) -> dict:
    """Fit the constants of the two gap-moment bounds over a grid.

    The first bound is tested on every valid ``(t, l, r)`` of the product
    grid; the second on ``nu t < l < (2 - nu) t``, ``1 <= r < nu1 l`` for
    ``t`` in ``psi_t_grid``.
    """
    cells = []
    worst = 0.0
    for t in t_grid:
        for l in l_grid:
            for r in r_grid:
                if not 1 <= r <= l + 1:
                    continue
                a = a_value(t, l, r, beta, n_samples, seed)
                shape = a_bound_shape(t, l, r, beta)
                ratio = a.value / shape if shape > 0 else (0.0 if a.value == 0 else math.inf)
                worst = max(worst, ratio)
                cells.append({"t": t, "l": l, "r": r, "A": a.value, "method": a.method,
                              "stderr": a.stderr, "shape": shape, "ratio": ratio})
    psi_cells = []
    worst_psi = 0.0
    try:
        ps = psi(beta, nu, nu1) if beta > 0 else 0.0
    except RegimeError:
        ps = math.nan
    for t in psi_t_grid:
        for l in j_window(t, nu):
            for r in range(1, l + 1):
                if not r < nu1 * l:
                    continue
                a = a_value(t, l, r, beta, n_samples, seed)
                bound = ps**r
                ratio = a.value / bound if bound > 0 else (0.0 if a.value == 0 else math.inf)
                worst_psi = max(worst_psi, ratio)
                psi_cells.append({"t": t, "l": l, "r": r, "A": a.value, "psi_r": bound,
                                  "ratio": ratio})
    return {"beta": beta, "C": worst, "C_psi": worst_psi, "psi": ps, "cells": cells,
            "psi_cells": psi_cells, "finite": bool(math.isfinite(worst) and math.isfinite(worst_psi))}


def convolution_lhs(d: int, r_max: int, n_max: int) -> np.ndarray:
    """``S[r, n] = sum_{0<i_1<..<i_r<n} i_1^{-d/2} (i_2-i_1)^{-d/2} .. (n-i_r)^{-d/2}``.

    Computed by the exact recursion ``S_r = S_{r-1} * f`` with ``f(i) = i^{-d/2}``.
    """
    f = np.zeros(n_max + 1)
    f[1:] = np.arange(1, n_max + 1, dtype=float) ** (-d / 2)
    out = np.zeros((r_max + 1, n_max + 1))
    out[0] = f
    for r in range(1, r_max + 1):
        prev = out[r - 1]
        for n in range(n_max + 1):
            out[r, n] = math.fsum(prev[1:n] * f[n - 1:0:-1]) if n >= 2 else 0.0
    return out


def convolution_lhs_direct(d: int, r: int, n: int) -> float:
    """Brute-force sum over ``0 < i_1 < .. < i_r < n`` (small cases only)."""
    from itertools import combinations
    tot = 0.0
    for idx in combinations(range(1, n), r):
        pts = (0,) + idx + (n,)
        tot += math.prod((pts[k + 1] - pts[k]) ** (-d / 2) for k in range(r + 1))
    return tot


def convolution_bound_check(d: int, r_max: int, n_max: int) -> dict:
    """Smallest ``c`` with ``S[r, n] <= c^r n^{-d/2}`` for ``r <= r_max``, ``r+1 <= n <= n_max``."""
    if d < 3:
        raise ValueError("d >= 3 required")
    s = convolution_lhs(d, r_max, n_max)
    c = 0.0
    arg = None
    for r in range(1, r_max + 1):
        for n in range(r + 1, n_max + 1):
            v = (s[r, n] * n ** (d / 2)) ** (1.0 / r)
            if v > c:
                c, arg = v, (r, n)
    from scipy.special import zeta
    proof_c = 2 ** (d / 2) * float(zeta(d / 2))
    return {"d": d, "r_max": r_max, "n_max": n_max, "c": c, "argmax": arg,
            "proof_constant": proof_c, "finite": bool(math.isfinite(c))}


def p_ratio_check(kernel: TransitionKernel, beta: float, t_grid, xi: float, sigma: float = 0.8,
                  tail_eps: float = 1e-12, resolved: float = 1e-9) -> dict:
    """Sup over ``|y| <= t^sigma`` of ``p_{t-2t^xi}^y / p_t^y / exp(beta^2 t^xi)``.

    Sites whose mixture value is below ``resolved`` (where the Poisson
    truncation error is no longer small relative to the value) are skipped
    and counted.
    """
    if not 0 < xi < 1:
        raise ValueError("xi must lie in (0, 1)")
    if not 0.75 < sigma < 1:
        raise ValueError("sigma must lie in (3/4, 1)")
    rows = []
    for t in t_grid:
        s = t - 2 * t**xi
        if poisson_cutoff(t, tail_eps) > kernel.n_max:
            raise ValueError(f"kernel coverage insufficient for t={t}")
        ys = _ball_classes(kernel.d, t**sigma)
        if np.abs(ys).sum(axis=1).max() > kernel.store_radius:
            raise ValueError(f"kernel box too small for |y| <= t^sigma at t={t}")
        pt = p_continuous(kernel, t, ys, tail_eps)
        ps = p_continuous(kernel, s, ys, tail_eps)
        ok = (pt >= resolved) & (ps >= resolved)
        ratio = ps[ok] / pt[ok]
        k = int(np.argmax(ratio))
        sup = float(ratio[k])
        gauss0 = (t / s) ** (kernel.d / 2)
        rows.append({"t": t, "sup_ratio": sup, "argmax": ys[ok][k].tolist(),
                     "scaled": sup / math.exp(beta**2 * t**xi), "gaussian_y0": gauss0,
                     "ratio_y0": float(ratio[0]), "n_sites": int(ok.sum()),
                     "n_skipped": int((~ok).sum())})
    return _stability(rows, "scaled")


def _stability(rows, key) -> dict:
    consts = [r[key] for r in rows]
    running = np.maximum.accumulate(consts)
    stable = bool(len(rows) < 2 or running[-1] <= 1.1 * running[0])
    return {"rows": rows, "C": float(running[-1]), "C_first": float(running[0]),
            "finite": bool(np.all(np.isfinite(consts))), "stable_10pct": stable}


def _ball_classes(d: int, radius: float) -> np.ndarray:
    """One representative per symmetry class with Euclidean norm ``<= radius``, origin first."""
    r = int(math.floor(radius))
    from .walk_kernel import _enumerate_classes
    cl = _enumerate_classes(d, d * r)
    cl = cl[(cl <= r).all(axis=1) & ((cl.astype(float) ** 2).sum(axis=1) <= radius**2 + 1e-9)]
    order = np.lexsort(cl.T[::-1])
    return np.ascontiguousarray(cl[order])


def q_iota_check(kernel: TransitionKernel, t_grid, xi1: float, sigma: float = 0.8,
                 nu: float = 0.6) -> dict:
    """Fitted ``C`` in ``q^y_{m+l} <= C q^y_{iota(y,l)}``.

    ``m`` ranges over ``j_window(2 t^xi1, nu)``, ``l`` over
    ``j_window(t - 2 t^xi1, nu)`` and ``y`` over ``|y| <= t^sigma``.
    """
    if not 0.75 < sigma < 1:
        raise ValueError("sigma must lie in (3/4, 1)")
    if not 0 < xi1 < 1 - sigma:
        raise ValueError("xi1 must lie in (0, 1 - sigma)")
    rows = []
    for t in t_grid:
        ms = list(j_window(2 * t**xi1, nu))
        ls = list(j_window(t - 2 * t**xi1, nu))
        need = max(ms) + max(ls) + 1
        if need > kernel.n_max:
            raise ValueError(f"kernel coverage insufficient for t={t}: need n_max >= {need}")
        ys = _ball_classes(kernel.d, t**sigma)
        if np.abs(ys).sum(axis=1).max() > kernel.store_radius:
            raise ValueError(f"kernel box too small for |y| <= t^sigma at t={t}")
        best = 0.0
        arg = None
        ms_arr = np.array(ms)
        for lo in range(0, len(ys), 2048):
            block = ys[lo:lo + 2048]
            cols = q_matrix(kernel, block, need)
            norms = np.abs(block).sum(axis=1)
            for l in ls:
                den = cols[np.arange(len(block)), l + (norms - l) % 2]
                num = cols[:, ms_arr + l].max(axis=1)
                ok = den > 0
                if not ok.any():
                    continue
                v = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
                k = int(np.argmax(v))
                if v[k] > best:
                    kk = int(np.argmax(cols[k, ms_arr + l]))
                    best, arg = float(v[k]), (block[k].tolist(), ms[kk], l)
        rows.append({"t": t, "C": float(best), "argmax": arg, "n_sites": len(ys),
                     "m_window": [ms[0], ms[-1]], "l_window": [ls[0], ls[-1]]})
    return _stability(rows, "C")
