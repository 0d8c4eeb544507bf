"""Factorization error ``delta = Z^{y,t}/p_t^y - Z^H Z_{t-H}^{y,t}``.

Two estimators are provided.  ``method="bridge"`` uses the path Monte Carlo
estimators of :mod:`polymerlab.partition` on one environment.  The lattice
method evaluates the three partition functions exactly (no path sampling) for
the time-discretized polymer obtained from the SHE splitting scheme with a
dyadic step ``dt``: the walk stays with probability ``1 - dt`` and otherwise
jumps to a uniform neighbour, and collects ``exp(beta dW - beta^2 dt/2)`` per
step.  All times in a sweep share one forward run and one periodic box per
environment, and the backward runs read the same noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np

from ._parallel import map_envs
from .environment import BrownianField, env_field
from .partition import (ModelParams, PartitionEstimate, STREAM_B, STREAM_PAIR,
                        estimate_z_backward, estimate_z_bridge, estimate_z_forward)
from .she import NOISE_CHUNK, laplacian
from .walk_kernel import KernelError

LATTICE_DT = 0.5
BOX_SIGMAS = 4.0


class HorizonError(ValueError):
    pass


@dataclass
class FactorizationCell:
    t: float
    y: list
    horizon: float
    z_bridge: PartitionEstimate
    z_fwd: PartitionEstimate
    z_bwd: PartitionEstimate
    delta: float
    stderr: float
    method: str = "bridge"
    extra: dict = dc_field(default_factory=dict)

    def record(self, seed=None) -> dict:
        return {"t": self.t, "y": list(self.y), "horizon": self.horizon, "delta": self.delta,
                "stderr": self.stderr, "z_bridge": self.z_bridge.mean,
                "z_fwd": self.z_fwd.mean, "z_bwd": self.z_bwd.mean, "method": self.method,
                "seed": seed}


def _check(t, y, H, sigma):
    if not 0 < H <= t / 2:
        raise HorizonError(f"horizon {H} must lie in (0, t/2]")
    if sigma is not None and np.abs(y).sum() >= t**sigma and np.any(y):
        raise KernelError(f"|y| must be below t^sigma = {t ** sigma:.3g}")


def delta_estimate(field: BrownianField, params: ModelParams, t: float, y, H: float | None = None,
                   n_paths: int = 1000, path_seed: int = 0, env: int = 0,
                   method: str = "bridge", dt: float = LATTICE_DT) -> FactorizationCell:
    """One factorization cell on the environment ``field``."""
    d = field.d
    y = np.asarray(y, dtype=np.int64).reshape(d)
    H = t / 3 if H is None else H
    _check(t, y, H, params.sigma)
    if method == "lattice":
        return _lattice_cell(field, params, t, y, H, dt)
    if method != "bridge":
        raise ValueError(f"unknown method {method!r}")
    zero = np.zeros(d, dtype=np.int64)
    zb = estimate_z_bridge(field, params, zero, 0.0, y, t, n_paths, path_seed=path_seed, env=env)
    p = zb.extra["p"]
    ratio = PartitionEstimate(zb.mean / p, zb.stderr / p, n_paths, quantity="Z_bridge/p")
    zf = estimate_z_forward(field, params, zero, 0.0, H, n_paths, path_seed, env, STREAM_B)
    zw = estimate_z_backward(field, params, y, t, t - H, n_paths, path_seed, env, STREAM_PAIR)
    delta = ratio.mean - zf.mean * zw.mean
    se = math.sqrt(ratio.stderr**2 + (zw.mean * zf.stderr) ** 2 + (zf.mean * zw.stderr) ** 2)
    return FactorizationCell(t, y.tolist(), H, ratio, zf, zw, delta, se, "bridge", {"p": p})


# ------------------------------------------------------------ lattice method ---

@dataclass(frozen=True)
class LatticePlan:
    """Box and step indices shared by every environment of a sweep."""

    d: int
    dt: float
    t_list: tuple
    y_max: tuple          # largest displacement along e1 per t
    radius: int           # transverse half width
    e1_hi: int            # box covers e1 in [-radius, e1_hi]
    h_steps: tuple
    t_steps: tuple

    @property
    def shape(self):
        side = 2 * self.radius + 1
        return (self.e1_hi + self.radius + 1,) + (side,) * (self.d - 1)

    def sites(self) -> np.ndarray:
        r = np.arange(-self.radius, self.radius + 1)
        axes = [np.arange(-self.radius, self.e1_hi + 1)] + [r] * (self.d - 1)
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)

    def y_index(self, k: int):
        """Array index of ``k e1``."""
        return (k + self.radius,) + (self.radius,) * (self.d - 1)

    @property
    def n_values(self) -> int:
        return int(np.prod(self.shape)) * (self.t_steps[-1] + 1)


def make_plan(d: int, t_list, sigma: float, dt: float = LATTICE_DT, horizon_frac: float = 1 / 3,
              sigmas: float = BOX_SIGMAS, radius: int | None = None) -> LatticePlan:
    """Box from the bridge and free-walk spreads at the largest time.

    Transverse half width: ``sigmas`` standard deviations of the larger of the
    bridge midpoint spread ``sqrt(t/4d)`` and the free spread at the horizon.
    """
    t_list = tuple(sorted(float(t) for t in t_list))
    ts, hs, ym = [], [], []
    for t in t_list:
        n = t / dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError("every t must be a multiple of dt")
        ts.append(int(round(n)))
        hs.append(int(math.floor(horizon_frac * t / dt + 1e-9)))
        # strict inequality |y| < t^sigma
        ym.append(int(math.ceil(t**sigma)) - 1)
    tmax = t_list[-1]
    spread = max(math.sqrt(tmax / (4 * d)), math.sqrt(horizon_frac * tmax / d))
    r = radius if radius is not None else int(math.ceil(sigmas * spread)) + 1
    return LatticePlan(d, dt, t_list, tuple(ym), r, max(ym) + r, tuple(hs), tuple(ts))


def _lattice_run(field, beta: float, plan: LatticePlan):
    """Forward run from ``delta_0`` with the backward runs started in lockstep.

    Returns per time: ``u(k e1, t)`` for ``k <= y_max``, ``sum u(., H)`` and the
    backward values ``u_bwd(k e1, t)``.
    """
    d, dt = plan.d, plan.dt
    shape = plan.shape
    origin = plan.y_index(0)
    fwd = np.zeros(shape)
    fwd[origin] = 1.0
    n = plan.t_steps[-1]
    starts = {plan.t_steps[i] - plan.h_steps[i]: i for i in range(len(plan.t_list))}
    ends = {plan.t_steps[i]: i for i in range(len(plan.t_list))}
    hmarks = {}
    for i, h in enumerate(plan.h_steps):
        hmarks.setdefault(h, []).append(i)
    bwd = {}
    res_u = [None] * len(plan.t_list)
    res_b = [None] * len(plan.t_list)
    res_f = [None] * len(plan.t_list)
    comp = 0.5 * beta * beta * dt
    sites = plan.sites() if beta != 0 else None
    for c0 in range(0, n, NOISE_CHUNK):
        c1 = min(c0 + NOISE_CHUNK, n)
        if beta != 0:
            dw = np.diff(field.grid_values(sites, dt * np.arange(c0, c1 + 1)), axis=1)
        for k in range(c0, c1):
            if k in starts:
                bwd[starts[k]] = np.ones(shape)
            noise = np.exp(beta * dw[:, k - c0].reshape(shape) - comp) if beta != 0 else None
            fwd = fwd + dt * laplacian(fwd)
            if noise is not None:
                fwd *= noise
            for i in list(bwd):
                b = bwd[i] + dt * laplacian(bwd[i])
                bwd[i] = b * noise if noise is not None else b
            for i in hmarks.get(k + 1, ()):
                res_f[i] = math.fsum(fwd.ravel())
            if k + 1 in ends:
                i = ends[k + 1]
                ym = plan.y_max[i]
                idx = (np.arange(ym + 1) + plan.radius,) + tuple(
                    np.full(ym + 1, plan.radius) for _ in range(d - 1))
                res_u[i] = fwd[idx].copy()
                res_b[i] = bwd.pop(i)[idx].copy()
    if not np.all(np.isfinite(fwd)):
        raise FloatingPointError("non-finite lattice state")
    return res_u, res_f, res_b


@lru_cache(maxsize=8)
def _heat_reference(plan: LatticePlan):
    u, _, _ = _lattice_run(None, 0.0, plan)
    return tuple(u)


def lattice_deltas(field: BrownianField, params: ModelParams, plan: LatticePlan) -> list[dict]:
    """Per time: ``y`` along e1, ratio ``Z^{y,t}/p``, ``Z^H``, ``Z_{t-H}^{y,t}`` and ``delta``."""
    ref = _heat_reference(plan)
    if params.beta == 0:
        return [{"t": t, "k": np.arange(ym + 1), "ratio": np.ones(ym + 1), "z_fwd": 1.0,
                 "z_bwd": np.ones(ym + 1), "delta": np.zeros(ym + 1)}
                for t, ym in zip(plan.t_list, plan.y_max)]
    u, zf, zb = _lattice_run(field, params.beta, plan)
    out = []
    for i, t in enumerate(plan.t_list):
        ratio = u[i] / ref[i]
        out.append({"t": t, "k": np.arange(plan.y_max[i] + 1), "ratio": ratio, "z_fwd": zf[i],
                    "z_bwd": zb[i], "delta": ratio - zf[i] * zb[i]})
    return out


def _lattice_cell(field, params, t, y, H, dt):
    d = field.d
    if np.count_nonzero(y[1:]) or y[0] < 0:
        raise ValueError("lattice method takes y on the positive e1 axis")
    if abs(H - dt * math.floor(H / dt + 1e-9)) > 1e-9:
        raise ValueError("H must lie on the dt grid for the lattice method")
    k = int(y[0])
    ym = max(k, int(math.ceil(t ** params.sigma)) - 1)
    plan = make_plan(d, [t], params.sigma, dt, H / t)
    plan = LatticePlan(d, dt, plan.t_list, (ym,), plan.radius, ym + plan.radius,
                       (int(round(H / dt)),), plan.t_steps)
    r = lattice_deltas(field, params, plan)[0]
    est = lambda v, q: PartitionEstimate(float(v), 0.0, 0, quantity=q)
    return FactorizationCell(t, y.tolist(), H, est(r["ratio"][k], "Z_bridge/p"),
                             est(r["z_fwd"], "Z_fwd"), est(r["z_bwd"][k], "Z_bwd"),
                             float(r["delta"][k]), 0.0, "lattice", {"dt": dt})


# ------------------------------------------------------------------ sweep ---

def _sweep_rows(start, stop, seed, params, plan):
    n_t = len(plan.t_list)
    w = max(plan.y_max) + 1
    out = np.full((stop - start, 3, n_t, w), np.nan)
    for e in range(start, stop):
        res = lattice_deltas(env_field(seed, params.d, e), params, plan)
        for i, r in enumerate(res):
            m = len(r["k"])
            out[e - start, 0, i, :m] = r["delta"]
            out[e - start, 1, i, :m] = r["z_fwd"]
            out[e - start, 2, i, :m] = r["z_bwd"]
    return out


def _sup_mean_abs(delta):
    """``sup_y <|delta|>`` per time; ``delta`` has shape (n_env, n_t, n_y), NaN padded."""
    a = np.abs(delta)
    ok = ~np.isnan(a)
    mean = np.where(ok, a, 0.0).sum(axis=0) / np.maximum(ok.sum(axis=0), 1)
    return np.where(ok.any(axis=0), mean, -np.inf).max(axis=-1)


def _theta(t, v):
    v = np.asarray(v, dtype=float)
    if len(v) < 2 or not np.all(v > 0) or not np.all(np.isfinite(v)):
        return math.nan
    return -np.polyfit(np.log(t), np.log(v), 1)[0]


def _corr(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 0 else math.nan


def delta_sweep(params: ModelParams, sigma: float | None = None, t_list=(20, 40, 80),
                n_env: int = 2000, n_paths: int = 0, seed: int = 0, workers: int = 1,
                dt: float = LATTICE_DT, n_boot: int = 2000, radius: int | None = None) -> dict:
    """Decay table of ``sup_y <|delta|>`` over the environments, lattice method.

    ``n_paths`` is accepted for interface symmetry with the bridge method and
    ignored.  Bootstrap resamples environments jointly across all times.
    """
    sigma = params.sigma if sigma is None else sigma
    if not 0 < sigma < 1:
        raise ValueError("sigma must lie in (0, 1)")
    plan = make_plan(params.d, t_list, sigma, dt, radius=radius)
    raw = map_envs(_sweep_rows, n_env, workers, (seed, params, plan))
    delta = raw[:, 0]
    t = np.asarray(plan.t_list)
    sup = _sup_mean_abs(delta)
    at0 = np.nanmean(np.abs(delta[:, :, 0]), axis=0)
    rng = np.random.default_rng(seed)
    boot = np.empty((n_boot, len(t)))
    for b in range(n_boot):
        boot[b] = _sup_mean_abs(delta[rng.integers(0, n_env, n_env)])
    thetas = np.array([_theta(t, row) for row in boot])
    lo, hi = np.quantile(boot, [0.025, 0.975], axis=0)
    diff = boot[:, 0] - boot[:, -1]
    # disjoint slabs: Z^H and Z_{t-H}^{0,t} should be uncorrelated across environments
    corr = [_corr(raw[:, 1, i, 0], raw[:, 2, i, 0]) for i in range(len(t))]
    rows = [{"t": float(t[i]), "horizon": plan.h_steps[i] * dt, "y_max": plan.y_max[i],
             "sup_mean_abs_delta": float(sup[i]), "ci_lo": float(lo[i]), "ci_hi": float(hi[i]),
             "mean_abs_delta_y0": float(at0[i]), "corr_fwd_bwd": corr[i]} for i in range(len(t))]
    theta = _theta(t, sup)
    return {
        "rows": rows,
        "theta": float(theta),
        "theta_ci": [float(np.quantile(thetas, 0.025)), float(np.quantile(thetas, 0.975))],
        "theta_positive_95": bool(np.quantile(thetas, 0.05) > 0),
        "last_below_first_95": bool(np.quantile(diff, 0.05) > 0),
        "n_env": n_env, "dt": dt, "sigma": sigma, "box": list(plan.shape),
        "method": "lattice", "delta": delta,
    }
