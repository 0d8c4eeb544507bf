"""The lazy discrete-time polymer and the empirical lower tail of ``Z``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import special, stats

from ._rng import combine, normal, seed_key, uniform
from .environment import site_key
from .partition import ModelParams, PartitionEstimate, _mean_se, z_ensemble


@dataclass(frozen=True)
class LazyModel:
    """Walk that stays put with probability ``N/(N+1)``; disorder variance ``1/N``."""

    d: int
    N: int
    beta: float

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be a positive integer")
        if self.d < 1:
            raise ValueError("d must be >= 1")

    @property
    def stay(self) -> float:
        return self.N / (self.N + 1)

    @property
    def neighbour(self) -> float:
        return 1.0 / (2 * self.d * (self.N + 1))

    def one_step_total(self) -> float:
        return self.stay + 2 * self.d * self.neighbour


def _steps(model: LazyModel, t: float) -> int:
    n = t * model.N
    if abs(n - round(n)) > 1e-9 or n < 1:
        raise ValueError("t * N must be a positive integer")
    return int(round(n))


@njit(cache=True)
def _lazy_move(site, u, d, stay):
    if u < stay:
        return
    k = min(int((u - stay) / (1.0 - stay) * 2 * d), 2 * d - 1)
    if k % 2 == 0:
        site[k // 2] += 1
    else:
        site[k // 2] -= 1


@njit(cache=True)
def _lazy_energies(ekey, d, n_steps, stay, inv_sqrt_n, pkey, env, n_paths, out):
    site = np.zeros(d, dtype=np.int64)
    for p in range(n_paths):
        k = combine(combine(pkey, env), p)
        for i in range(d):
            site[i] = 0
        acc = 0.0
        for i in range(n_steps):
            acc += normal(combine(site_key(ekey, site), i)) * inv_sqrt_n
            _lazy_move(site, uniform(combine(k, i)), d, stay)
        out[p] = acc


@njit(cache=True)
def _disorder(ekey, sites, times, inv_sqrt_n, out):
    for i in range(sites.shape[0]):
        out[i] = normal(combine(site_key(ekey, sites[i]), times[i])) * inv_sqrt_n


def disorder(model: LazyModel, env_seed: int, sites, times) -> np.ndarray:
    """``omega(z, k) ~ N(0, 1/N)`` at the given (site, step) pairs."""
    sites = np.ascontiguousarray(np.asarray(sites, dtype=np.int64).reshape(-1, model.d))
    times = np.asarray(times, dtype=np.int64).reshape(-1)
    out = np.empty(len(sites))
    _disorder(np.uint64(seed_key(int(env_seed))), sites, times, 1 / math.sqrt(model.N), out)
    return out


def z_discrete(model: LazyModel, t: float, env_seed: int, n_paths: int,
               path_seed: int = 0) -> PartitionEstimate:
    """MC over lazy paths of ``exp(beta sum_i omega(S_i, i) - beta^2 t / 2)``."""
    n = _steps(model, t)
    if model.beta == 0:
        return PartitionEstimate(1.0, 0.0, n_paths, quantity="Z_discrete")
    out = np.empty(n_paths)
    pk = np.uint64(seed_key(int(path_seed)))
    _lazy_energies(np.uint64(seed_key(int(env_seed))), model.d, n, model.stay,
                   1 / math.sqrt(model.N), pk, 0, n_paths, out)
    w = np.exp(model.beta * out - 0.5 * model.beta**2 * t)
    m, se = _mean_se(w)
    return PartitionEstimate(m, se, n_paths, quantity="Z_discrete")


def z_discrete_exact(model: LazyModel, t: float, env_seed: int) -> float:
    """Transfer-matrix value of ``Z_t^N`` on the reachable box (no sampling)."""
    n = _steps(model, t)
    d = model.d
    r = n
    size = 2 * r + 1
    u = np.zeros((size,) * d)
    u[(r,) * d] = 1.0
    rng = np.arange(-r, r + 1)
    grid = np.stack(np.meshgrid(*([rng] * d), indexing="ij"), axis=-1).reshape(-1, d)
    for i in range(n):
        om = disorder(model, env_seed, grid, np.full(len(grid), i)).reshape(u.shape)
        u = u * np.exp(model.beta * om - 0.5 * model.beta**2 / model.N)
        if i == n - 1:
            break
        nxt = model.stay * u
        for ax in range(d):
            nxt += model.neighbour * (np.roll(u, 1, axis=ax) + np.roll(u, -1, axis=ax))
        u = nxt
    return float(u.sum())


# ------------------------------------------------------- return probability ---

def _phi_s(k: np.ndarray, model_a: float, model_b: float, d: int) -> np.ndarray:
    return model_a + model_b * np.cos(k).sum(axis=-1) / d


def green_fourier(d: int, N: int, quad_points: int, width: float = 0.5,
                  chunk: int = 1 << 20) -> float:
    """``(2 pi)^-d int 1/(1 - phi_D)`` by midpoint rule outside a small ball.

    The leading singular term ``s(k) = d exp(-|k|^2 / 2 w^2) / (b |k|^2)`` is
    subtracted and integrated analytically over ``R^d``.  The bounded
    remainder is summed outside the ball of radius ``eps = quad_points^(-1/2)``
    and its ball contribution is added as volume times the mean on the
    adjacent shell.
    """
    if d < 3:
        raise ValueError("d >= 3 required")
    a = N / (N + 1)
    b = 1 / (N + 1)
    m = int(quad_points)
    h = 2 * math.pi / m
    axis = -math.pi + (np.arange(m) + 0.5) * h
    eps = m ** -0.5
    total = 0.0
    shell = []
    n_all = m**d
    for start in range(0, n_all, chunk):
        idx = np.arange(start, min(start + chunk, n_all))
        k = np.empty((idx.size, d))
        rem = idx
        for ax in range(d):
            k[:, ax] = axis[rem % m]
            rem = rem // m
        r2 = (k * k).sum(axis=1)
        phi = _phi_s(k, a, b, d)
        val = 1.0 / (1.0 - phi * phi) - d * np.exp(-r2 / (2 * width**2)) / (b * r2)
        out = r2 >= eps * eps
        total += math.fsum(val[out])
        shell.append(val[out & (r2 < 4 * eps * eps)])
    sphere = 2 * math.pi ** (d / 2) / special.gamma(d / 2)
    # int_{R^d} s = (d/b) |S^{d-1}| int_0^inf r^{d-3} exp(-r^2/2w^2) dr
    radial = 0.5 * (2 * width**2) ** ((d - 2) / 2) * special.gamma((d - 2) / 2)
    singular = (d / b) * sphere * radial
    shell = np.concatenate(shell)
    ball = (sphere / d) * eps**d * (float(shell.mean()) if shell.size else 0.0)
    if not np.isfinite(total):
        raise RuntimeError(f"quadrature failed near the singularity (eps={eps:.3g})")
    return (total * h**d + singular + ball) / (2 * math.pi) ** d


def green_series(d: int, N: int, alpha: float, kernel=None, k_max: int = 60) -> tuple[float, float]:
    """``1/(1-q)`` from ``1/(1-phi^2) = (1/(1-phi) + 1/(1+phi))/2``.

    The first part is ``(1 + alpha)(N + 1)``; the second is a fast series in
    the simple-walk return probabilities.  Returns (value, tail bound).
    """
    from .walk_kernel import shared_kernel
    a = N / (N + 1)
    b = 1 / (N + 1)
    rr = b / (1 + a)
    kernel = kernel or shared_kernel(d, k_max)
    q0 = np.array([kernel.q(k, np.zeros(d, dtype=np.int64)) for k in range(k_max + 1)])
    ser = math.fsum(q0 * rr ** np.arange(k_max + 1))
    tail = rr ** (k_max + 1) / (1 - rr)
    val = 0.5 * ((1 + alpha) * (N + 1) + ser / (1 + a))
    return val, 0.5 * tail / (1 + a)


def return_prob_q(d: int, N: int, quad_points: int = 128) -> dict:
    """Return probability ``q`` of the difference of two lazy walks (Fourier route)."""
    g = green_fourier(d, N, quad_points)
    g_half = green_fourier(d, N, quad_points // 2)
    err = abs(g - g_half)
    q = 1 - 1 / g
    if not 0 < q < 1:
        raise RuntimeError(f"quadrature failed: q={q} with eps={quad_points ** -0.5:.3g}")
    return {"q": q, "green": g, "green_error": err, "q_error": err / g**2,
            "eps": quad_points ** -0.5, "N": N, "d": d}


def second_moment_closed(beta: float, N: int, q: float) -> float:
    """``E exp((beta^2/N) L_inf) = e^{b}(1-q)/(1 - e^{b} q)`` with ``b = beta^2/N``."""
    e = math.exp(beta**2 / N)
    if e * q >= 1:
        raise ValueError("regime violation: exp(beta^2/N) q >= 1")
    return e * (1 - q) / (1 - e * q)


def second_moment_series(beta: float, N: int, q: float, k_max: int = 100000) -> float:
    """Direct sum over the geometric law of ``L_inf``."""
    e = math.exp(beta**2 / N)
    k = np.arange(1, k_max + 1)
    return math.fsum((q * e) ** (k - 1) * (1 - q) * e)


@njit(cache=True)
def _pair_local_times(d, n_steps, stay, pkey, n_pairs, out):
    a = np.zeros(d, dtype=np.int64)
    b = np.zeros(d, dtype=np.int64)
    for p in range(n_pairs):
        k = combine(pkey, p)
        for i in range(d):
            a[i] = 0
            b[i] = 0
        cnt = 0
        for i in range(n_steps):
            same = True
            for j in range(d):
                if a[j] != b[j]:
                    same = False
                    break
            if same:
                cnt += 1
            _lazy_move(a, uniform(combine(k, 2 * i)), d, stay)
            _lazy_move(b, uniform(combine(k, 2 * i + 1)), d, stay)
        out[p] = cnt


def pair_local_times(model: LazyModel, t: float, n_pairs: int, seed: int = 0) -> np.ndarray:
    """``L_{tN} = #{0 <= i < tN : S_i = S'_i}`` for independent lazy pairs."""
    n = _steps(model, t)
    out = np.empty(n_pairs, dtype=np.int64)
    _pair_local_times(model.d, n, model.stay, np.uint64(seed_key(int(seed))), n_pairs, out)
    return out


def second_moment_pair_mc(model: LazyModel, t: float, n_pairs: int, seed: int = 0) -> PartitionEstimate:
    lt = pair_local_times(model, t, n_pairs, seed)
    m, se = _mean_se(np.exp(model.beta**2 / model.N * lt))
    return PartitionEstimate(m, se, n_pairs, quantity="discrete_second_moment", extra={"t": t})


def discrete_mean_one(model: LazyModel, t: float, n_env: int, n_paths: int, seed: int = 0) -> dict:
    z = np.array([z_discrete(model, t, seed * 1_000_003 + e, n_paths, path_seed=seed + e).mean
                  for e in range(n_env)])
    m, se = _mean_se(z)
    return {"mean": m, "stderr": se, "n_env": n_env, "pass": bool(abs(m - 1) <= 3 * se + 1e-15)}


def waiting_time_ks(N: int, n_samples: int, seed: int = 0) -> dict:
    """KS distance between ``W/N`` (W geometric with success ``1/(N+1)``) and Exp(1)."""
    rng = np.random.default_rng(seed)
    w = rng.geometric(1.0 / (N + 1), size=n_samples) / N
    emp = float(stats.kstest(w, "expon").statistic)
    # exact distance: the jumps of the step CDF against 1 - exp(-x)
    k = np.arange(0, 50 * (N + 1))
    x = k / N
    cdf = 1 - (N / (N + 1)) ** k
    ex = -np.expm1(-x)
    exact = float(max(np.max(np.abs(cdf - ex)), np.max(np.abs(np.concatenate([[0], cdf[:-1]]) - ex))))
    return {"N": N, "ks_empirical": emp, "ks_exact": exact, "n": n_samples}


# ------------------------------------------------------------ lower tail ---

def _fit(u, logp, w, design):
    x = np.column_stack([np.ones_like(u), design])
    wt = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(x * wt[:, None], logp * wt, rcond=None)
    resid = logp - x @ coef
    dof = max(len(u) - 2, 1)
    s2 = float(np.sum(w * resid**2) / dof)
    cov = s2 * np.linalg.inv((x * w[:, None]).T @ x)
    return coef, cov, float(np.sum(w * resid**2))


def tail_fit(z: np.ndarray, u_grid, min_events: int = 20) -> dict:
    z = np.asarray(z, dtype=float)
    n = z.size
    rows = []
    for u in u_grid:
        c = int(np.sum(z < math.exp(-u)))
        p = c / n
        lo, hi = (stats.beta.ppf(0.025, c, n - c + 1) if c > 0 else 0.0,
                  stats.beta.ppf(0.975, c + 1, n - c) if c < n else 1.0)
        rows.append({"u": float(u), "count": c, "n_env": n,
                     "log_p": math.log(p) if c > 0 else -math.inf,
                     "ci_lo": math.log(lo) if lo > 0 else -math.inf,
                     "ci_hi": math.log(hi)})
    use = [r for r in rows if r["count"] >= min_events]
    out = {"rows": rows, "max_usable_u": use[-1]["u"] if use else None, "n_env": n}
    if len(use) < 3:
        out["error"] = "insufficient tail events"
        return out
    u = np.array([r["u"] for r in use])
    lp = np.array([r["log_p"] for r in use])
    cnt = np.array([r["count"] for r in use], dtype=float)
    w = cnt / (1 - cnt / n)   # inverse variance of log p
    cq, vq, sq = _fit(u, lp, w, u**2)
    cl, vl, sl = _fit(u, lp, w, u)
    b, b_se = -cq[1], math.sqrt(vq[1, 1])
    out.update({
        "quadratic": {"a": cq[0], "b": b, "b_stderr": b_se, "b_ci": (b - 1.96 * b_se, b + 1.96 * b_se),
                      "wsse": sq},
        "linear": {"a": cl[0], "b": -cl[1], "b_stderr": math.sqrt(vl[1, 1]), "wsse": sl},
        "b_positive_95": bool(b - 1.96 * b_se > 0),
        "quadratic_better": bool(sq < sl),
        "monotone": bool(all(use[i + 1]["count"] <= use[i]["count"] for i in range(len(use) - 1))),
    })
    return out


def tail_empirical(params: ModelParams, t: float, n_env: int, n_paths: int, u_grid=None,
                   seed: int = 0, workers: int = 1, min_events: int = 20) -> dict:
    """Empirical ``log Q(Z^t < e^{-u})`` and Gaussian versus exponential decay fits."""
    if not params.weak_disorder:
        raise ValueError("tail experiment needs a weak-disorder beta")
    if u_grid is None:
        u_grid = np.round(np.arange(0.0, 2.0001, 0.05), 10)
    z = z_ensemble(params, [t], n_env, n_paths, seed, workers=workers)[:, 0, 0, 0]
    out = tail_fit(z, u_grid, min_events)
    out.update({"t": t, "n_paths": n_paths, "beta": params.beta, "z_mean": float(z.mean())})
    return out
