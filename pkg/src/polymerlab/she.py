"""Semidiscrete stochastic heat equation on a periodic box.

``du = Delta u dt + beta u dW``, Ito, integrated by splitting: a heat step
``u + dt Delta u`` followed by the exact mean-one factor
``exp(beta dW - beta^2 dt / 2)`` per site.  By default ``Delta`` is the
generator of the rate-1 walk, ``(1/2d) sum_e (f(y+e) - f(y))``; the graph
Laplacian (no ``1/2d``) is available as ``laplacian="graph"``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .environment import BrownianField, env_field
from .partition import ModelParams, _mean_se, estimate_z_bridge
from .walk_kernel import p_continuous, poisson_cutoff, shared_kernel
from ._parallel import map_envs

DT_MAX = 0.1
NOISE_CHUNK = 256


class IntegrationError(RuntimeError):
    pass


@dataclass
class LatticeFunction:
    """Values on the periodic cube ``[-R, R]^d``; ``values[y + R]`` is the value at ``y``."""

    radius: int
    values: np.ndarray
    time: float = 0.0
    meta: dict = dc_field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.values.ndim

    def __post_init__(self):
        side = 2 * self.radius + 1
        if any(n != side for n in self.values.shape):
            raise ValueError("values must have side 2*radius+1 on every axis")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("initial data must be finite")

    def at(self, y) -> float:
        idx = tuple(int(c) % (2 * self.radius + 1) for c in np.asarray(y) + self.radius)
        return float(self.values[idx])

    def sites(self) -> np.ndarray:
        r = np.arange(-self.radius, self.radius + 1)
        return np.stack(np.meshgrid(*([r] * self.d), indexing="ij"), axis=-1).reshape(-1, self.d)

    def copy(self) -> "LatticeFunction":
        return LatticeFunction(self.radius, self.values.copy(), self.time, dict(self.meta))

    @classmethod
    def constant(cls, d: int, radius: int, c: float = 1.0, time: float = 0.0):
        return cls(radius, np.full((2 * radius + 1,) * d, float(c)), time)

    @classmethod
    def delta(cls, d: int, radius: int, y=None, time: float = 0.0):
        v = np.zeros((2 * radius + 1,) * d)
        y = np.zeros(d, dtype=int) if y is None else np.asarray(y)
        v[tuple(int(c) + radius for c in y)] = 1.0
        return cls(radius, v, time)

    def dump(self, stem) -> dict:
        """Flat little-endian float64 file plus a JSON manifest."""
        stem = Path(stem)
        raw = np.ascontiguousarray(self.values, dtype="<f8").tobytes()
        stem.with_suffix(".bin").write_bytes(raw)
        man = {"d": self.d, "radius": self.radius, "shape": list(self.values.shape),
               "dtype": "<f8", "order": "C", "time": self.time,
               "sha256": hashlib.sha256(raw).hexdigest(), "meta": self.meta}
        stem.with_suffix(".json").write_text(json.dumps(man, indent=1, sort_keys=True))
        return man

    @classmethod
    def load(cls, stem) -> "LatticeFunction":
        stem = Path(stem)
        man = json.loads(stem.with_suffix(".json").read_text())
        raw = stem.with_suffix(".bin").read_bytes()
        if hashlib.sha256(raw).hexdigest() != man["sha256"]:
            raise ValueError("checkpoint checksum mismatch")
        vals = np.frombuffer(raw, dtype=man["dtype"]).reshape(man["shape"]).copy()
        return cls(man["radius"], vals, man["time"], man.get("meta", {}))


def laplacian(u: np.ndarray, kind: str = "walk", axes=None) -> np.ndarray:
    axes = range(u.ndim) if axes is None else axes
    d = len(axes)
    acc = -2 * d * u
    for ax in axes:
        acc = acc + np.roll(u, 1, axis=ax) + np.roll(u, -1, axis=ax)
    if kind == "walk":
        return acc / (2 * d)
    if kind == "graph":
        return acc
    raise ValueError(f"unknown laplacian {kind!r}")


def _n_steps(t_span: float, dt: float) -> int:
    n = t_span / dt
    k = int(round(n))
    if k < 1 or abs(n - k) > 1e-9 * max(1.0, n):
        raise ValueError("t_end - f0.time must be a positive multiple of dt")
    return k


def _advance(field, beta, u, radius, t0, n, dt, kind, marks=(), on_mark=None):
    """Advance a stack ``u`` of shape ``(m, side, ..., side)`` by ``n`` steps."""
    d = u.ndim - 1
    axes = tuple(range(1, d + 1))
    comp = 0.5 * beta * beta * dt
    r = np.arange(-radius, radius + 1)
    sites = np.stack(np.meshgrid(*([r] * d), indexing="ij"), axis=-1).reshape(-1, d)
    shape = u.shape[1:]
    nonneg = bool(np.all(u >= 0))
    # overflow is detected explicitly below, so numpy's warnings are muted
    with np.errstate(over="ignore", invalid="ignore"):
        for c0 in range(0, n, NOISE_CHUNK):
            c1 = min(c0 + NOISE_CHUNK, n)
            if beta != 0:
                times = t0 + dt * np.arange(c0, c1 + 1)
                dw = np.diff(field.grid_values(sites, times), axis=1)
            for k in range(c0, c1):
                u = u + dt * laplacian(u, kind, axes)
                if beta != 0:
                    u = u * np.exp(beta * dw[:, k - c0].reshape(shape) - comp)
                if not np.all(np.isfinite(u)):
                    raise IntegrationError(f"non-finite value at step {k + 1}")
                if nonneg and u.min() < 0:
                    raise IntegrationError(f"positivity lost at step {k + 1}")
                if (k + 1) in marks and on_mark is not None:
                    res = on_mark(k + 1, u)
                    if res is not None:
                        u = res
    return u


def integrate(field: BrownianField, params: ModelParams, f0: LatticeFunction, t_end: float,
              dt: float, laplacian_kind: str = "walk", checkpoints=(),
              on_checkpoint=None) -> LatticeFunction:
    """Advance ``f0`` from ``f0.time`` to ``t_end``.

    ``on_checkpoint(lf)`` is called at each time in ``checkpoints`` (on the
    step grid); its return value, if not None, replaces the state.
    """
    if not 0 < dt <= DT_MAX:
        raise ValueError(f"dt must lie in (0, {DT_MAX}]")
    if field.d != f0.d:
        raise ValueError("dimension mismatch")
    n = _n_steps(t_end - f0.time, dt)
    t0 = f0.time
    marks = {_n_steps(c - t0, dt) for c in checkpoints}

    def hook(k, u):
        res = on_checkpoint(LatticeFunction(f0.radius, u[0], t0 + k * dt))
        return None if res is None else res.values[None]

    u = _advance(field, params.beta, f0.values[None].astype(float), f0.radius, t0, n, dt,
                 laplacian_kind, marks, hook if on_checkpoint else None)
    return LatticeFunction(f0.radius, u[0], t0 + n * dt, {"dt": dt, "laplacian": laplacian_kind})


def periodic_kernel(kernel, t: float, y, radius: int, images: int = 1) -> float:
    """``p_t^y`` on the torus of side ``2R+1`` (sum over nearby images)."""
    d = len(y)
    side = 2 * radius + 1
    shifts = np.stack(np.meshgrid(*([np.arange(-images, images + 1)] * d), indexing="ij"),
                      axis=-1).reshape(-1, d)
    pts = np.asarray(y, dtype=np.int64) + side * shifts
    ok = np.abs(pts).sum(axis=1) <= kernel.radius
    return float(np.sum(p_continuous(kernel, t, pts[ok])))


def feynman_kac_crosscheck(field: BrownianField, params: ModelParams, y, t: float, dt,
                           n_paths: int, box_radius: int = 8, path_seed: int = 0,
                           kernel=None) -> dict:
    """Integrator value at ``(y, t)`` from ``delta_0`` versus the bridge estimate.

    ``dt`` may be a list; each entry gives one integrator leg against the same
    bridge estimate.
    """
    d = field.d
    y = np.asarray(y, dtype=np.int64).reshape(d)
    dts = [dt] if np.isscalar(dt) else list(dt)
    kernel = kernel or shared_kernel(d, poisson_cutoff(t, 1e-12))
    fk = estimate_z_bridge(field, params, np.zeros(d, dtype=np.int64), 0.0, y, t, n_paths,
                           kernel, path_seed)
    p_free = fk.extra["p"]
    p_per = periodic_kernel(kernel, t, y, box_radius)
    legs = []
    for h in dts:
        u = integrate(field, params, LatticeFunction.delta(d, box_radius), t, h).at(y)
        # image correction: the torus adds paths winding around the box
        fk_val = fk.mean * p_per / p_free
        rel = abs(u - fk_val) / fk_val
        legs.append({"dt": h, "integrator": u, "rel_diff": rel})
    out = {"y": y.tolist(), "t": t, "beta": params.beta, "box_radius": box_radius,
           "fk": fk.mean, "fk_stderr": fk.stderr, "fk_rel_stderr": fk.stderr / fk.mean,
           "p_free": p_free, "p_periodic": p_per, "n_paths": n_paths, "legs": legs}
    if len(legs) > 1:
        out["shrink"] = [legs[i]["rel_diff"] / legs[i + 1]["rel_diff"] for i in range(len(legs) - 1)]
        # Richardson estimate of the integrator's dt-bias at the coarsest step
        out["dt_bias_estimate"] = abs(legs[0]["integrator"] - legs[1]["integrator"]) / fk.mean
    return out


def noise_factor_mean(beta: float, dt: float, n: int, seed: int = 0, d: int = 3) -> dict:
    """Sample mean of ``exp(beta dW - beta^2 dt/2)`` over ``n`` field increments."""
    f = env_field(seed, d, 0)
    side = max(1, int(round(n ** (1 / d))))
    r = np.arange(side)
    sites = np.stack(np.meshgrid(*([r] * d), indexing="ij"), axis=-1).reshape(-1, d)
    n_t = max(1, -(-n // len(sites)))
    dw = np.diff(f.grid_values(sites, dt * np.arange(n_t + 1)), axis=1).ravel()[:n]
    m, se = _mean_se(np.exp(beta * dw - 0.5 * beta * beta * dt))
    return {"mean": m, "stderr": se, "n": int(dw.size), "pass": bool(abs(m - 1) <= 3 * se)}


def _gap(u1: np.ndarray, u2: np.ndarray, idx, origin) -> float:
    r1 = u1[idx] / u1[origin]
    r2 = u2[idx] / u2[origin]
    return float(np.max(np.abs(r1 - r2)))


def _ratio_rows(start, stop, seed, params, v1, v2, radius, y_set, checkpoints, dt, lap):
    out = np.empty((stop - start, len(checkpoints)))
    origin = (slice(None),) + (radius,) * params.d
    idx = tuple(np.asarray(y_set).T + radius)
    marks = {_n_steps(c, dt): j for j, c in enumerate(checkpoints)}
    for e in range(start, stop):
        f = env_field(seed, params.d, e)

        def hook(k, u, e=e):
            out[e - start, marks[k]] = _gap(u[0], u[1], idx, (radius,) * params.d)
            # renormalize by the value at the origin; ratios are unchanged
            return u / u[origin].reshape((2,) + (1,) * params.d)

        _advance(f, params.beta, np.stack([v1, v2]).astype(float), radius, 0.0,
                 _n_steps(checkpoints[-1], dt), dt, lap, set(marks), hook)
    return out


def ratio_compare(params: ModelParams, f1: LatticeFunction, f2: LatticeFunction, y_set,
                  checkpoints, dt: float, n_env: int, seed: int = 0, workers: int = 1,
                  laplacian_kind: str = "walk") -> dict:
    """Median over environments of ``max_y |u1(y)/u1(0) - u2(y)/u2(0)|`` at checkpoints."""
    if f1.radius != f2.radius or f1.d != f2.d:
        raise ValueError("f1 and f2 must live on the same box")
    if np.any(f1.values <= 0) or np.any(f2.values <= 0):
        raise ValueError("initial data must be strictly positive")
    checkpoints = sorted(float(c) for c in checkpoints)
    y_set = np.asarray(y_set, dtype=np.int64).reshape(-1, f1.d)
    gaps = map_envs(_ratio_rows, n_env, workers,
                    (seed, params, f1.values, f2.values, f1.radius, y_set, checkpoints, dt,
                     laplacian_kind))
    med = np.median(gaps, axis=0)
    rows = [{"t": c, "median_gap": float(m), "mean_gap": float(gaps[:, j].mean()),
             "q25": float(np.quantile(gaps[:, j], 0.25)), "q75": float(np.quantile(gaps[:, j], 0.75))}
            for j, (c, m) in enumerate(zip(checkpoints, med))]
    decreasing = bool(np.all(np.diff(med) < 0))
    return {"rows": rows, "decreasing": decreasing, "n_env": n_env, "dt": dt,
            "box_radius": f1.radius, "beta": params.beta, "gaps": gaps}
