"""Monte Carlo estimators of normalized partition functions and second-moment oracles."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, sparse, stats

from . import _paths
from ._parallel import map_envs
from ._rng import combine, seed_key
from .environment import BrownianField, env_field
from .walk_kernel import (KernelError, alpha_d, bridge_count_weights, p_continuous,
                          poisson_cutoff, shared_kernel)

ODE_RTOL = 1e-8
ALPHA_N_MAX = 300

# independent path streams
STREAM_A = 11
STREAM_B = 12
STREAM_PAIR = 13


@lru_cache(maxsize=None)
def alpha_for(d: int, n_max: int = ALPHA_N_MAX):
    """``alpha_d`` estimate from a kernel of depth ``n_max`` (cached per process)."""
    from .walk_kernel import build_kernel
    return alpha_d(build_kernel(d, n_max))


@dataclass(frozen=True)
class ModelParams:
    d: int = 3
    beta: float = 0.2
    nu: float = 0.6
    nu1: float = 0.8
    sigma: float = 0.6
    xi: float = 0.5

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if not 0.5 < self.nu < 1:
            raise ValueError("nu must lie in (1/2, 1)")
        if not 1 / self.nu - 1 < self.nu1 < 1:
            raise ValueError("nu1 must lie in (1/nu - 1, 1)")
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if not 0 < self.xi < 1:
            raise ValueError("xi must lie in (0, 1)")

    @property
    def lam(self) -> float:
        if self.beta >= 1:
            return math.inf
        return self.beta**2 / (1 - self.beta**2)

    @property
    def alpha(self) -> float:
        return alpha_for(self.d).value if self.d >= 3 else math.inf

    @property
    def weak_disorder(self) -> bool:
        return self.alpha * self.lam < 1

    def with_beta(self, beta: float) -> "ModelParams":
        return ModelParams(self.d, beta, self.nu, self.nu1, self.sigma, self.xi)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PartitionEstimate:
    mean: float
    stderr: float
    n_samples: int
    nested: tuple | None = None
    quantity: str = ""
    extra: dict = field(default_factory=dict)

    def record(self, params: ModelParams | None = None, seed=None, wall_time=None) -> dict:
        out = {"quantity": self.quantity, "mean": self.mean, "stderr": self.stderr,
               "n": self.n_samples}
        if self.nested is not None:
            out["nested"] = {"n_env": self.nested[0], "n_paths": self.nested[1]}
        if params is not None:
            out["params"] = params.to_dict()
        out["seed"] = seed
        if wall_time is not None:
            out["wall_time"] = wall_time
        out.update(self.extra)
        return out


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    n = x.size
    if n == 0:
        return math.nan, math.nan
    m = math.fsum(x) / n
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return m, se


def _fargs(field_: BrownianField):
    return field_.key, float(field_.offset), float(field_.direction)


def _pkey(path_seed: int, stream: int):
    return np.uint64(combine(np.uint64(seed_key(int(path_seed))), stream))


def _weights(actions: np.ndarray, beta: float, duration) -> np.ndarray:
    """``exp(beta A - beta^2 T / 2)``; exactly one when ``beta == 0``."""
    if beta == 0:
        return np.ones_like(actions)
    return np.exp(beta * actions - 0.5 * beta * beta * np.asarray(duration))


def forward_actions(field_: BrownianField, x, s: float, horizons, n_paths: int,
                    path_seed: int = 0, env: int = 0, stream: int = STREAM_A) -> np.ndarray:
    """Actions of free walks from ``(x, s)``, shape ``(n_paths, len(horizons))``."""
    horizons = np.ascontiguousarray(horizons, dtype=float).reshape(-1)
    if np.any(np.diff(horizons) < 0) or np.any(horizons < s):
        raise ValueError("horizons must be ascending and >= s")
    out = np.empty((n_paths, horizons.size))
    _paths.forward_actions(*_fargs(field_), np.asarray(x, dtype=np.int64).reshape(field_.d),
                           float(s), horizons, _pkey(path_seed, stream), env, n_paths, out)
    return out


def estimate_z_forward(field_: BrownianField, params: ModelParams, x, s: float, t: float,
                       n_paths: int, path_seed: int = 0, env: int = 0,
                       stream: int = STREAM_A) -> PartitionEstimate:
    """Point-to-line ``Z_{x,s}^t`` for the given environment."""
    if not s < t:
        raise ValueError("need s < t")
    a = forward_actions(field_, x, s, [t], n_paths, path_seed, env, stream)[:, 0]
    m, se = _mean_se(_weights(a, params.beta, t - s))
    return PartitionEstimate(m, se, n_paths, quantity="Z_forward")


def estimate_z_backward(field_: BrownianField, params: ModelParams, y, t: float, s_cutoff: float,
                        n_paths: int, path_seed: int = 0, env: int = 0,
                        stream: int = STREAM_A) -> PartitionEstimate:
    """Line-to-point ``Z_{s_cutoff}^{y,t}`` by walking backwards from ``(y, t)``.

    Uses the reversed field ``-W(-tau)`` so that a forward walk from
    ``(y, -t)`` to ``-s_cutoff`` collects the same increments.
    """
    if not s_cutoff < t:
        raise ValueError("need s_cutoff < t")
    est = estimate_z_forward(field_.reversed(), params, y, -t, -s_cutoff, n_paths, path_seed,
                             env, stream)
    est.quantity = "Z_backward"
    return est


def bridge_actions(field_: BrownianField, x, s: float, y, t: float, n_paths: int, kernel=None,
                   path_seed: int = 0, env: int = 0, stream: int = STREAM_A,
                   tail_eps: float = 1e-12):
    """Actions of exact bridges and their jump counts."""
    x = np.asarray(x, dtype=np.int64).reshape(field_.d)
    y = np.asarray(y, dtype=np.int64).reshape(field_.d)
    kernel = kernel or shared_kernel(field_.d, poisson_cutoff(t - s, tail_eps))
    w = bridge_count_weights(kernel, y - x, t - s, tail_eps)
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    out = np.empty(n_paths)
    counts = np.empty(n_paths, dtype=np.int64)
    ok = _paths.bridge_actions(*_fargs(field_), x, float(s), y, float(t), cdf,
                               _pkey(path_seed, stream), env, n_paths, *kernel.table, out, counts)
    if not ok:
        raise KernelError("bridge left the stored kernel box")
    return out, counts


def estimate_z_bridge(field_: BrownianField, params: ModelParams, x, s: float, y, t: float,
                      n_paths: int, kernel=None, path_seed: int = 0, env: int = 0,
                      stream: int = STREAM_A, tail_eps: float = 1e-12) -> PartitionEstimate:
    """Point-to-point ``Z_{x,s}^{y,t}`` (including the factor ``p_{t-s}^{y-x}``)."""
    if not s < t:
        raise ValueError("need s < t")
    x = np.asarray(x, dtype=np.int64).reshape(field_.d)
    y = np.asarray(y, dtype=np.int64).reshape(field_.d)
    kernel = kernel or shared_kernel(field_.d, poisson_cutoff(t - s, tail_eps))
    p = p_continuous(kernel, t - s, y - x, tail_eps)
    a, _ = bridge_actions(field_, x, s, y, t, n_paths, kernel, path_seed, env, stream, tail_eps)
    m, se = _mean_se(_weights(a, params.beta, t - s))
    return PartitionEstimate(p * m, p * se, n_paths, quantity="Z_bridge", extra={"p": p})


def _box_sites(d: int, center, radius: int) -> np.ndarray:
    """All sites with ``|z - center|_1 <= radius``."""
    rng = np.arange(-radius, radius + 1)
    grid = np.stack(np.meshgrid(*([rng] * d), indexing="ij"), axis=-1).reshape(-1, d)
    grid = grid[np.abs(grid).sum(axis=1) <= radius]
    return grid + np.asarray(center, dtype=np.int64)


def chapman_kolmogorov_check(field_: BrownianField, params: ModelParams, x, s: float, u: float,
                             t: float, box_radius: int, n_paths: int, path_seed: int = 0,
                             tol: float = 1e-6) -> dict:
    """Compare ``Z_{x,s}^t`` with ``sum_z Z_{x,s}^{z,u} Z_{z,u}^t`` over a 1-norm box."""
    if not s < u < t:
        raise ValueError("need s < u < t")
    d = field_.d
    x = np.asarray(x, dtype=np.int64).reshape(d)
    kernel = shared_kernel(d, poisson_cutoff(u - s, 1e-12))
    sites = _box_sites(d, x, box_radius)
    p = p_continuous(kernel, u - s, sites - x)
    truncated = max(0.0, 1.0 - math.fsum(p))
    if truncated > tol:
        raise ValueError(f"box radius {box_radius} leaves mass {truncated:.3g} > {tol:g} outside")
    lhs = estimate_z_forward(field_, params, x, s, t, n_paths, path_seed, 0, STREAM_A)
    terms = np.empty(len(sites))
    var = 0.0
    for i, z in enumerate(sites):
        zb = estimate_z_bridge(field_, params, x, s, z, u, n_paths, kernel, path_seed, i, STREAM_B)
        zf = estimate_z_forward(field_, params, z, u, t, n_paths, path_seed, i, STREAM_PAIR)
        terms[i] = zb.mean * zf.mean
        var += (zb.mean * zf.stderr) ** 2 + (zf.mean * zb.stderr) ** 2 + (zb.stderr * zf.stderr) ** 2
    rhs = math.fsum(terms)
    sigma = math.sqrt(var + lhs.stderr**2)
    residual = abs(lhs.mean - rhs)
    budget = 3 * sigma + truncated * max(1.0, rhs)
    return {"lhs": lhs.mean, "lhs_stderr": lhs.stderr, "rhs": rhs, "rhs_stderr": math.sqrt(var),
            "residual": residual, "sigma": sigma, "truncated_mass": truncated, "budget": budget,
            "n_sites": len(sites), "n_paths": n_paths, "violation": bool(residual > budget)}


# ------------------------------------------------------ environment loops ---

def _z_rows(start, stop, seed, d, x, s, horizons, betas, n_paths, path_seed, streams):
    """Per environment, ``Z`` estimates for every (stream, beta, horizon)."""
    out = np.empty((stop - start, len(streams), len(betas), len(horizons)))
    dur = np.asarray(horizons) - s
    for e in range(start, stop):
        f = env_field(seed, d, e)
        for i, st in enumerate(streams):
            a = forward_actions(f, x, s, horizons, n_paths, path_seed, e, st)
            for j, b in enumerate(betas):
                out[e - start, i, j] = _weights(a, b, dur).mean(axis=0)
    return out


def z_ensemble(params: ModelParams, horizons, n_env: int, n_paths: int, seed: int = 0,
               betas=None, n_replicas: int = 1, workers: int = 1, x=None, s: float = 0.0,
               path_seed: int | None = None) -> np.ndarray:
    """``Z_{x,s}^h`` for ``n_env`` environments; shape ``(n_env, n_replicas, n_beta, n_h)``.

    All betas and horizons share paths; replicas use independent path streams.
    """
    betas = [params.beta] if betas is None else list(betas)
    x = np.zeros(params.d, dtype=np.int64) if x is None else np.asarray(x, dtype=np.int64)
    streams = [STREAM_A, STREAM_B, STREAM_PAIR, 14, 15][:n_replicas]
    path_seed = seed + 1 if path_seed is None else path_seed
    return map_envs(_z_rows, n_env, workers,
                    (seed, params.d, x, s, np.asarray(horizons, dtype=float), betas, n_paths,
                     path_seed, streams))


def mean_one_check(params: ModelParams, t: float, n_env: int, n_paths: int, seed: int = 0,
                   workers: int = 1) -> dict:
    z = z_ensemble(params, [t], n_env, n_paths, seed, workers=workers)[:, 0, 0, 0]
    m, se = _mean_se(z)
    return {"quantity": "mean_one", "t": t, "mean": m, "stderr": se, "n": n_env,
            "n_paths": n_paths, "pass": bool(abs(m - 1) <= 3 * se + 1e-15)}


def second_moment_mc(params: ModelParams, t, n_env: int, n_paths: int, seed: int = 0,
                     workers: int = 1) -> PartitionEstimate | list:
    """``<(Z_{0,0}^t)^2>`` from products of two independent inner replicas."""
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    z = z_ensemble(params, ts, n_env, n_paths, seed, n_replicas=2, workers=workers)
    prod = z[:, 0, 0, :] * z[:, 1, 0, :]
    res = []
    for k in range(ts.size):
        m, se = _mean_se(prod[:, k])
        res.append(PartitionEstimate(m, se, n_env, (n_env, n_paths), "second_moment_mc",
                                     {"t": float(ts[k])}))
    return res[0] if np.ndim(t) == 0 else res


def _escape_bound(d: int, t: float, radius: int) -> float:
    """Chernoff bound on the chance a rate-2 walk leaves ``[-R, R]^d`` before ``t``."""
    mu = 2.0 * t / d
    if mu == 0:
        return 0.0
    r = radius + 1
    th = math.asinh(r / mu)
    return min(1.0, 4 * d * math.exp(mu * (math.cosh(th) - 1) - th * r))


def _difference_generator(d: int, radius: int):
    n = 2 * radius + 1
    shape = (n,) * d
    size = n**d
    idx = np.arange(size).reshape(shape)
    rows, cols = [], []
    for ax in range(d):
        for sh in (1, -1):
            src = idx
            dst = np.roll(idx, -sh, axis=ax)
            sl = [slice(None)] * d
            sl[ax] = slice(n - 1, None) if sh == 1 else slice(0, 1)
            mask = np.ones(shape, dtype=bool)
            mask[tuple(sl)] = False   # neighbour outside the box: Dirichlet zero
            rows.append(src[mask])
            cols.append(dst[mask])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    rate = 2.0 / (2 * d)
    g = sparse.csr_matrix((np.full(rows.size, rate), (rows, cols)), shape=(size, size))
    g = g - sparse.identity(size, format="csr") * 2.0
    origin = int(idx[(radius,) * d])
    return g.tocsr(), origin


def second_moment_oracle(params: ModelParams, t, box_radius: int = 12, rtol: float = ODE_RTOL,
                         escape_tol: float = 1e-6) -> float | np.ndarray:
    """``E exp(beta^2 L_t)`` for the collision time of two independent walks.

    Solves ``w' = G w + beta^2 delta_0 (w + 1)`` with ``w = 0`` outside the box
    (``v = 1 + w``), where ``G`` generates the rate-2 walk of the difference.
    ``t`` may be a scalar or an ascending grid.
    """
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(ts < 0) or np.any(np.diff(ts) < 0):
        raise ValueError("t must be nonnegative and ascending")
    esc = _escape_bound(params.d, float(ts[-1]), box_radius)
    if esc > escape_tol:
        raise ValueError(f"box radius {box_radius} too small for t={ts[-1]}: escape bound {esc:.2g}")
    b2 = params.beta**2
    if b2 == 0:
        return 1.0 if np.ndim(t) == 0 else np.ones_like(ts)
    g, o = _difference_generator(params.d, box_radius)
    src = np.zeros(g.shape[0])
    src[o] = b2

    def rhs(_, w):
        out = g @ w
        out[o] += b2 * w[o]
        return out + src

    sol = integrate.solve_ivp(rhs, (0.0, float(ts[-1])), np.zeros(g.shape[0]), method="RK45",
                              t_eval=ts, rtol=rtol, atol=rtol * 1e-3)
    if not sol.success:
        raise RuntimeError(sol.message)
    v = 1.0 + sol.y[o]
    return float(v[0]) if np.ndim(t) == 0 else v


def plateau_closed_form(beta: float, alpha: float) -> float:
    """``E exp(beta^2 L_inf)``: geometric number of Exp(2) visits to the origin."""
    p = alpha / (1 + alpha)
    m = 2.0 / (2.0 - beta**2) if beta**2 < 2 else math.inf
    return (1 - p) * m / (1 - p * m) if p * m < 1 else math.inf


def collision_mc(params: ModelParams, t: float, n_pairs: int, seed: int = 0) -> PartitionEstimate:
    """MC of ``E exp(beta^2 L_t)`` over independent walk pairs."""
    lt = collision_times(params.d, t, n_pairs, seed)
    m, se = _mean_se(np.exp(params.beta**2 * lt))
    return PartitionEstimate(m, se, n_pairs, quantity="collision_mc", extra={"t": t})


def collision_times(d: int, t: float, n_pairs: int, seed: int = 0) -> np.ndarray:
    out = np.empty(n_pairs)
    _paths.pair_collision_times(d, float(t), _pkey(seed, STREAM_PAIR), n_pairs, out)
    return out


def alpha_pair_mc(d: int, n_steps: int, n_pairs: int, seed: int = 0) -> PartitionEstimate:
    """``alpha_d`` from simulated pairs of discrete walks, independent of the kernel table.

    Coincidences are counted for ``1 <= n <= n_steps``; beyond that the
    asymptotic tail ``2 (d/(4 pi))^(d/2) zeta(d/2, n_steps + 1)`` is added.
    """
    if d < 3:
        raise ValueError("alpha_d is infinite for d < 3")
    from scipy import special
    out = np.empty(n_pairs)
    _paths.discrete_pair_coincidences(d, int(n_steps), _pkey(seed, STREAM_PAIR), n_pairs, out)
    m, se = _mean_se(out)
    tail = 2.0 * (d / (4 * math.pi)) ** (d / 2) * float(special.zeta(d / 2, n_steps + 1))
    return PartitionEstimate(m + tail, se, n_pairs, quantity="alpha_pair_mc",
                             extra={"partial": m, "tail_estimate": tail, "n_steps": n_steps})


def weak_disorder_threshold(d: int, alpha=None) -> dict:
    """``beta* = 1/sqrt(1 + alpha_d)`` with the interval implied by the alpha tail bound."""
    if alpha is None:
        alpha = alpha_for(d)
    if isinstance(alpha, (int, float)):
        lo = hi = val = float(alpha)
    else:
        val = alpha.value
        lo, hi = alpha.interval
    f = lambda a: 1.0 / math.sqrt(1.0 + a)
    return {"beta_star": f(val), "interval": (f(hi), f(lo)), "alpha": val,
            "alpha_interval": (lo, hi)}


def _slope_fit(t, y, se):
    """Weighted least squares of ``log y`` on ``log t``; returns (theta, se_theta)."""
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    se = np.asarray(se, float)
    ok = y > 0
    if ok.sum() < 2:
        return math.nan, math.nan
    lx = np.log(t[ok])
    ly = np.log(y[ok])
    w = 1.0 / np.maximum(se[ok] / y[ok], 1e-300) ** 2
    xm = np.sum(w * lx) / w.sum()
    ym = np.sum(w * ly) / w.sum()
    sxx = np.sum(w * (lx - xm) ** 2)
    slope = np.sum(w * (lx - xm) * (ly - ym)) / sxx
    return -slope, math.sqrt(1.0 / sxx)


def l2_rate_probe(params: ModelParams, t_grid, horizon_mult: float = 3.0, n_env: int = 1000,
                  n_paths: int = 100, seed: int = 0, workers: int = 1) -> dict:
    """Cauchy differences ``<(Z^t - Z^{Mt})^2>`` and their decay exponent."""
    t_grid = np.sort(np.asarray(t_grid, dtype=float))
    hz = np.unique(np.concatenate([t_grid, horizon_mult * t_grid]))
    z = z_ensemble(params, hz, n_env, n_paths, seed, n_replicas=2, workers=workers)[:, :, 0, :]
    rows = []
    for t in t_grid:
        i = int(np.searchsorted(hz, t))
        j = int(np.searchsorted(hz, horizon_mult * t))
        diff = (z[:, 0, i] - z[:, 0, j]) * (z[:, 1, i] - z[:, 1, j])
        m, se = _mean_se(diff)
        rows.append({"t": float(t), "mean": m, "stderr": se})
    theta, theta_se = _slope_fit([r["t"] for r in rows], [r["mean"] for r in rows],
                                 [r["stderr"] for r in rows])
    return {"quantity": "l2_rate", "horizon_mult": horizon_mult, "rows": rows, "theta": theta,
            "theta_stderr": theta_se,
            "theta_positive_95": bool(theta - 1.645 * theta_se > 0) if theta == theta else False}


def positivity_probe(params: ModelParams, t_grid, n_env: int, n_paths: int, seed: int = 0,
                     eps_grid=(0.5, 0.25, 0.1, 0.05, 0.01), workers: int = 1) -> dict:
    t_grid = np.sort(np.asarray(t_grid, dtype=float))
    z = z_ensemble(params, t_grid, n_env, n_paths, seed, workers=workers)[:, 0, 0, :]
    mins = z.min(axis=1)
    probs = []
    for eps in sorted(eps_grid, reverse=True):
        k = int(np.sum(mins < eps))
        probs.append({"eps": eps, "count": k, "prob": k / n_env,
                      "stderr": math.sqrt(max(k, 1) * (1 - k / n_env)) / n_env})
    return {"quantity": "positivity", "min_estimate": float(mins.min()),
            "all_positive": bool(np.all(z > 0)), "rows": probs, "n_env": n_env}


def wall_clock():
    return time.perf_counter()


def ks_same_law(a, b) -> float:
    """Two-sample KS p-value."""
    return float(stats.ks_2samp(a, b).pvalue)
