"""Command-line front end: ``polymerlab <subcommand> [mode] [options]``.

Options may also come from a flat ``key = value`` file given with
``--config``; command-line flags win over the file, which wins over the
built-in defaults.  Every run writes a JSON report (and CSV tables where the
result is a grid) into ``--out``; wall-clock times go to a separate
``*.timing.json`` sidecar so that the reports themselves are byte-identical
on replay.

Exit codes: 0 success, 1 a check failed, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import REPORT_VERSION, __version__

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2
# options that change how a run executes but not what it computes; they are
# recorded in the sidecar so the report stays identical across machines
EXECUTION_KEYS = {"workers", "out", "kernel_cache", "plot_data"}


class ConfigError(ValueError):
    pass


def _floats(s: str) -> list:
    return [float(v) for v in str(s).replace(" ", "").split(",") if v]


def _ints(s: str) -> list:
    return [int(v) for v in str(s).replace(" ", "").split(",") if v]


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# name: (parser, help)
OPTIONS = {
    "d": (int, "lattice dimension (>= 3)"),
    "beta": (float, "inverse temperature"),
    "betas": (_floats, "comma list of inverse temperatures"),
    "nu": (float, "window parameter nu in (1/2, 1)"),
    "nu1": (float, "gap-count parameter nu1"),
    "sigma": (float, "displacement exponent"),
    "xi": (float, "time-shift exponent for the p-ratio check"),
    "xi1": (float, "time-shift exponent for the q-iota check"),
    "seed": (int, "master seed"),
    "workers": (int, "worker processes (results do not depend on it)"),
    "out": (str, "output directory"),
    "kernel_cache": (str, "directory for cached transition kernels"),
    "plot_data": (_bool, "also write tidy long-format CSV for plotting"),
    "nsigma": (float, "width of statistical acceptance bands in standard errors"),
    "t": (_floats, "time or comma list of times"),
    "n_env": (int, "number of environments"),
    "n_paths": (int, "paths per environment"),
    "n_pairs": (int, "walk pairs"),
    "n_steps": (int, "discrete steps per walk pair"),
    "n_samples": (int, "Monte Carlo samples"),
    "n_max": (int, "kernel step count"),
    "radius": (int, "displacement radius for tables"),
    "y": (_ints, "target site, comma separated"),
    "box_radius": (int, "box radius"),
    "dt": (_floats, "time step or comma list of steps"),
    "horizon_mult": (float, "horizon multiplier M for Cauchy differences"),
    "r_max": (int, "largest gap count"),
    "l_grid": (_ints, "jump counts"),
    "r_grid": (_ints, "gap counts"),
    "N": (_ints, "laziness parameters"),
    "u_grid": (_floats, "tail thresholds u"),
    "quad_points": (int, "quadrature points per axis"),
    "method": (str, "estimator variant"),
    "laplacian": (str, "walk or graph"),
    "env_index": (int, "environment index within the seeded ensemble"),
}

MODES = {
    "constants": [None],
    "transition": [None],
    "partition": ["mean-one", "second-moment", "collision", "forward", "bridge", "l2-rate",
                  "positivity", "chapman-kolmogorov"],
    "moments": ["lambda", "a", "a-bound", "convolution", "p-ratio", "q-iota"],
    "factorization": ["sweep", "cell"],
    "she": ["fk", "ratio", "run", "noise"],
    "tail": ["empirical", "discrete"],
    "selftest": [None],
    "schema": [None],
}


# ------------------------------------------------------------------ config ---

def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise ConfigError(f"{path}:{no}: unknown key '{key}'")
        try:
            out[key] = OPTIONS[key][0](val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{no}: bad value for '{key}': {exc}") from None
    return out


class RunConfig:
    """Resolved options; records every default it hands out so reports can echo it."""

    def __init__(self, subcommand: str, mode, explicit: dict):
        self.subcommand = subcommand
        self.mode = mode
        self.values = dict(explicit)
        self.resolved = dict(explicit)

    def get(self, key, default=None):
        if key not in OPTIONS:
            raise KeyError(key)
        v = self.values.get(key, default)
        self.resolved[key] = v
        return v

    def scalar(self, key, default):
        v = self.get(key, default)
        if isinstance(v, list):
            if len(v) != 1:
                raise ConfigError(f"option '{key}' takes a single value")
            v = v[0]
            self.resolved[key] = v
        return v

    def params(self):
        from .partition import ModelParams
        try:
            return ModelParams(d=self.get("d", 3), beta=self.scalar("beta", 0.2),
                               nu=self.get("nu", 0.6), nu1=self.get("nu1", 0.8),
                               sigma=self.get("sigma", 0.6), xi=self.get("xi", 0.5))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def record(self) -> dict:
        return {"subcommand": self.subcommand, "mode": self.mode,
                "options": {k: self.resolved[k] for k in sorted(self.resolved)
                            if k not in EXECUTION_KEYS}}

    def execution(self) -> dict:
        return {k: self.resolved.get(k) for k in sorted(EXECUTION_KEYS)}


# ----------------------------------------------------------------- output ---

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        x = float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


class Emitter:
    def __init__(self, out: Path, stem: str, plot: bool):
        self.out = out
        self.stem = stem
        self.plot = plot
        self.files = []
        self.long_rows = []

    def table(self, name: str, rows: list, columns=None):
        if not rows:
            return
        columns = columns or list(rows[0].keys())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
        self._write(f"{self.stem}_{name}.csv", buf.getvalue())

    def series(self, name: str, xs, ys, errs):
        for x, y, e in zip(xs, ys, errs):
            self.long_rows.append({"series": name, "x": x, "y": y, "y_err": e})

    def report(self, cfg: RunConfig, seed, results: dict, checks: list, wall: float):
        body = {"version": REPORT_VERSION, "package_version": __version__,
                "config": cfg.record(), "seed": seed, "results": _jsonable(results),
                "checks": _jsonable(checks),
                "status": "PASS" if all(c["pass"] for c in checks) else "FAIL"}
        self._write(f"{self.stem}.json", json.dumps(body, indent=1, sort_keys=True) + "\n")
        if self.plot and self.long_rows:
            self.table("plot", self.long_rows, ["series", "x", "y", "y_err"])
        side = {"wall_time_s": round(wall, 3), "report": f"{self.stem}.json",
                "execution": cfg.execution()}
        (self.out / f"{self.stem}.timing.json").write_text(json.dumps(side, sort_keys=True) + "\n")

    def _write(self, name, text):
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / name).write_text(text)
        self.files.append(name)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    return "" if v is None else str(v)


def check(name, ok, value=None, tolerance=None, **extra) -> dict:
    c = {"name": name, "pass": bool(ok), "value": value, "tolerance": tolerance}
    c.update(extra)
    return c


# --------------------------------------------------------------- commands ---

def cmd_constants(cfg: RunConfig, em: Emitter):
    """Constants alpha_d, beta* and lambda(beta) with error bounds."""
    from .moments import RegimeError, lam
    from .partition import alpha_for, weak_disorder_threshold
    d = cfg.get("d", 3)
    n_max = cfg.get("n_max", 300)
    a = alpha_for(d, n_max)
    ws = weak_disorder_threshold(d, a)
    betas = cfg.get("betas", [0.1, 0.2, 0.3])
    lams = []
    for b in betas:
        try:
            lv = lam(b)
        except RegimeError:
            lv = math.inf
        lams.append({"beta": b, "lambda": lv, "tolerance": 0.0, "alpha_lambda": a.value * lv,
                     "weak_disorder": bool(a.value * lv < 1)})
    res = {"d": d, "alpha": a.value, "alpha_partial": a.partial, "alpha_tail_estimate":
           a.tail_estimate, "alpha_tail_bound": a.tail_bound, "alpha_interval": a.interval,
           "n_max": a.n_max, "beta_star": ws["beta_star"], "beta_star_interval": ws["interval"],
           "lambda": lams}
    print(f"alpha_{d} = {a.value:.6f} +/- {a.tail_bound:.2e}  (partial {a.partial:.6f}, n_max {a.n_max})")
    print(f"beta*   = {ws['beta_star']:.6f}  in [{ws['interval'][0]:.6f}, {ws['interval'][1]:.6f}]")
    for r in lams:
        print(f"lambda({r['beta']:g}) = {r['lambda']:.6g}   alpha*lambda = {r['alpha_lambda']:.4g}")
    em.table("lambda", lams)
    checks = [check("alpha_finite", math.isfinite(a.value) and a.tail_bound < a.value,
                    a.value, a.tail_bound)]
    n_pairs = cfg.get("n_pairs", 0)
    if n_pairs and d >= 3:
        from .partition import alpha_pair_mc
        mc = alpha_pair_mc(d, cfg.get("n_steps", 2000), n_pairs, cfg.get("seed", 0))
        rel = abs(mc.mean - a.value) / a.value
        res["alpha_pair_mc"] = mc.record()
        print(f"pair-walk MC alpha = {mc.mean:.5f} +/- {mc.stderr:.1e}  (rel diff {rel:.2%})")
        checks.append(check("alpha_pair_mc_within_1pct", rel <= 0.01, rel, 0.01))
    return res, checks


def cmd_transition(cfg: RunConfig, em: Emitter):
    """Transition probabilities p_t^y against the local CLT."""
    from .moments import _ball_classes
    from .walk_kernel import lclt_approx, p_continuous, poisson_cutoff, shared_kernel
    d = cfg.get("d", 3)
    ts = cfg.get("t", [1.0, 10.0, 50.0])
    radius = cfg.get("radius", 4)
    n_need = max(cfg.get("n_max", 0), max(poisson_cutoff(t, 1e-12) for t in ts))
    k = shared_kernel(d, n_need, cfg.get("kernel_cache"))
    mass = [abs(math.fsum(k.q_many(n, _all_sites(d, n)).tolist()) - 1) for n in
            range(0, min(k.n_max, 40) + 1)]
    ys = _ball_classes(d, radius)
    rows = []
    for t in ts:
        p = p_continuous(k, t, ys)
        for y, pv in zip(ys, p):
            g = lclt_approx(d, t, y)
            rows.append({"t": t, **{f"y{i + 1}": int(c) for i, c in enumerate(y)}, "p": pv,
                         "truncation_bound": 1e-12, "lclt": g, "ratio": pv / g})
        em.series(f"p_t={t:g}", [float(np.linalg.norm(y)) for y in ys], p.tolist(),
                  [1e-12] * len(ys))
    em.table("p", rows)
    res = {"kernel": k.manifest(), "max_mass_error_n_le_40": max(mass)}
    print(f"kernel d={d} n_max={k.n_max}; max |sum q_n - 1| (n<=40) = {max(mass):.2e}")
    return res, [check("kernel_mass", max(mass) <= 1e-12, max(mass), 1e-12)]


def _all_sites(d, n):
    r = np.arange(-n, n + 1)
    g = np.stack(np.meshgrid(*([r] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return g[np.abs(g).sum(axis=1) <= n]


def cmd_partition(cfg: RunConfig, em: Emitter):
    """Partition function estimators and second-moment checks."""
    from . import partition as P
    from .environment import env_field
    params = cfg.params()
    seed = cfg.get("seed", 0)
    workers = cfg.get("workers", 1)
    ns = cfg.get("nsigma", 3.0)
    mode = cfg.mode
    if mode == "mean-one":
        ts = cfg.get("t", [5.0])
        betas = cfg.get("betas", [params.beta])
        n_env, n_paths = cfg.get("n_env", 1000), cfg.get("n_paths", 100)
        z = P.z_ensemble(params, ts, n_env, n_paths, seed, betas=betas, workers=workers)
        rows, checks = [], []
        for j, b in enumerate(betas):
            for i, t in enumerate(ts):
                m, se = P._mean_se(z[:, 0, j, i])
                ok = abs(m - 1) <= ns * se + 1e-15
                rows.append({"beta": b, "t": t, "mean": m, "stderr": se, "n_env": n_env,
                             "n_paths": n_paths, "pass": ok})
                checks.append(check(f"mean_one_beta{b:g}_t{t:g}", ok, m, ns * se))
                print(f"beta={b:g} t={t:g}: <Z> = {m:.5f} +/- {se:.5f}  {'PASS' if ok else 'FAIL'}")
            em.series(f"mean_Z_beta={b:g}", ts, [r["mean"] for r in rows[-len(ts):]],
                      [r["stderr"] for r in rows[-len(ts):]])
        em.table("mean_one", rows)
        return {"rows": rows}, checks
    if mode == "second-moment":
        ts = cfg.get("t", [1.0, 2.0, 5.0])
        box = cfg.get("box_radius", 12)
        n_env, n_paths = cfg.get("n_env", 2000), cfg.get("n_paths", 100)
        n_pairs = cfg.get("n_pairs", 200_000)
        mc = P.second_moment_mc(params, ts, n_env, n_paths, seed, workers)
        orc = P.second_moment_oracle(params, ts, box)
        rows, checks = [], []
        for t, e, o in zip(ts, mc, orc):
            pm = P.collision_mc(params, t, n_pairs, seed)
            tol1 = ns * e.stderr + 1e-2 * o
            tol2 = ns * pm.stderr + 1e-2 * o
            rows.append({"t": t, "oracle": o, "oracle_rtol": P.ODE_RTOL, "mc": e.mean,
                         "mc_stderr": e.stderr, "pair_mc": pm.mean, "pair_stderr": pm.stderr})
            checks.append(check(f"mc_vs_oracle_t{t:g}", abs(e.mean - o) <= tol1,
                                abs(e.mean - o), tol1))
            checks.append(check(f"pair_vs_oracle_t{t:g}", abs(pm.mean - o) <= tol2,
                                abs(pm.mean - o), tol2))
            print(f"t={t:g}: oracle {o:.6f}  mc {e.mean:.5f}+/-{e.stderr:.5f}  "
                  f"pair {pm.mean:.6f}+/-{pm.stderr:.6f}")
        em.table("second_moment", rows)
        em.series("oracle", ts, list(orc), [P.ODE_RTOL] * len(ts))
        return {"rows": rows, "box_radius": box}, checks
    if mode == "collision":
        t = cfg.scalar("t", 5.0)
        e = P.collision_mc(params, t, cfg.get("n_pairs", 200_000), seed)
        print(f"E exp(beta^2 L_t) = {e.mean:.6f} +/- {e.stderr:.6f}")
        return e.record(params, seed), [check("finite", math.isfinite(e.mean), e.mean, e.stderr)]
    if mode in ("forward", "bridge"):
        t = cfg.scalar("t", 5.0)
        f = env_field(seed, params.d, cfg.get("env_index", 0))
        n_paths = cfg.get("n_paths", 10_000)
        if mode == "forward":
            e = P.estimate_z_forward(f, params, np.zeros(params.d, int), 0.0, t, n_paths, seed + 1)
        else:
            y = cfg.get("y", [0] * params.d)
            e = P.estimate_z_bridge(f, params, np.zeros(params.d, int), 0.0, y, t, n_paths,
                                    path_seed=seed + 1)
        print(f"{e.quantity} = {e.mean:.6g} +/- {e.stderr:.3g}")
        return {**e.record(params, seed), "field": f.manifest()}, [
            check("positive", e.mean > 0, e.mean, e.stderr)]
    if mode == "l2-rate":
        r = P.l2_rate_probe(params, cfg.get("t", [1.0, 2.0, 4.0, 8.0]),
                            cfg.get("horizon_mult", 3.0), cfg.get("n_env", 1000),
                            cfg.get("n_paths", 100), seed, workers)
        em.table("l2_rate", r["rows"])
        em.series("l2_diff", [x["t"] for x in r["rows"]], [x["mean"] for x in r["rows"]],
                  [x["stderr"] for x in r["rows"]])
        print(f"theta = {r['theta']:.3f} +/- {r['theta_stderr']:.3f}")
        return r, [check("finite_theta", math.isfinite(r["theta"]), r["theta"], r["theta_stderr"])]
    if mode == "positivity":
        r = P.positivity_probe(params, cfg.get("t", [1.0, 2.0, 5.0, 10.0]),
                               cfg.get("n_env", 1000), cfg.get("n_paths", 100), seed,
                               workers=workers)
        em.table("positivity", r["rows"])
        return r, [check("all_positive", r["all_positive"], r["min_estimate"], 0.0)]
    if mode == "chapman-kolmogorov":
        ts = cfg.get("t", [0.5, 1.0, 2.0])
        if len(ts) != 3:
            raise ConfigError("chapman-kolmogorov needs t = s,u,t")
        f = env_field(seed, params.d, cfg.get("env_index", 0))
        r = P.chapman_kolmogorov_check(f, params, np.zeros(params.d, int), ts[0], ts[1], ts[2],
                                       cfg.get("box_radius", 6), cfg.get("n_paths", 2000), seed + 1)
        print(f"residual {r['residual']:.3g} budget {r['budget']:.3g}")
        return r, [check("ck_residual", not r["violation"], r["residual"], r["budget"])]
    raise ConfigError(f"unknown partition mode {mode!r}")


def cmd_moments(cfg: RunConfig, em: Emitter):
    """Gap moments, lambda products and kernel-ratio constants."""
    from . import moments as M
    from .walk_kernel import shared_kernel
    mode = cfg.mode
    seed = cfg.get("seed", 0)
    if mode == "lambda":
        betas = cfg.get("betas", [0.1, 0.3, 0.5])
        rs = cfg.get("r_grid", [1, 2, 3, 5])
        n = cfg.get("n_samples", 1_000_000)
        rows = [M.lambda_product_check(b, r, n, seed) for b in betas for r in rs]
        em.table("lambda", rows)
        return {"rows": rows}, [check(f"lambda_b{x['beta']:g}_r{x['r']}", x["pass"],
                                      x["mc"] - x["target"], 3 * x["stderr"]) for x in rows]
    if mode == "a":
        beta = cfg.scalar("beta", 0.3)
        t = cfg.scalar("t", 5.0)
        ls = cfg.get("l_grid", [2, 4, 8])
        rs = cfg.get("r_grid", [1, 2, 3])
        n = cfg.get("n_samples", 200_000)
        rows, checks = [], []
        for l in ls:
            for r in rs:
                if r > l + 1:
                    continue
                mc = M.a_mc(t, l, r, beta, n, seed)
                qd = M.a_quadrature(t, l, r, beta)
                tol = 3 * mc.stderr + 1e-9
                rows.append({"t": t, "l": l, "r": r, "mc": mc.value, "mc_stderr": mc.stderr,
                             "quadrature": qd.value, "quad_tol": 1e-9})
                checks.append(check(f"a_t{t:g}_l{l}_r{r}", abs(mc.value - qd.value) <= tol,
                                    abs(mc.value - qd.value), tol))
        em.table("a", rows)
        return {"rows": rows}, checks
    if mode == "a-bound":
        r = M.a_bound_check(cfg.get("t", [1.0, 2.0, 5.0]), cfg.get("l_grid", [1, 2, 4, 8]),
                            cfg.get("r_grid", [1, 2, 3]), cfg.scalar("beta", 0.3),
                            cfg.get("nu", 0.6), cfg.get("nu1", 0.8),
                            n_samples=cfg.get("n_samples", 200_000), seed=seed)
        em.table("a_bound", r["cells"])
        return r, [check("finite_constants", r["finite"], r["C"], None, C_psi=r["C_psi"])]
    if mode == "convolution":
        d = cfg.get("d", 3)
        rmax = cfg.get("r_max", 5)
        nmax = cfg.get("n_max", 100)
        r = M.convolution_bound_check(d, rmax, nmax)
        r2 = M.convolution_bound_check(d, rmax, 2 * nmax)
        r["c_doubled"] = r2["c"]
        print(f"c(n_max={nmax}) = {r['c']:.6f} at {r['argmax']}; c({2 * nmax}) = {r2['c']:.6f}; "
              f"proof constant {r['proof_constant']:.4f}")
        return r, [check("finite_c", r["finite"], r["c"], 0.0),
                   check("nonincreasing_in_n_max", r2["c"] <= r["c"] + 1e-12, r2["c"] - r["c"],
                         1e-12)]
    if mode in ("p-ratio", "q-iota"):
        ts = cfg.get("t", [200.0, 400.0])
        sig = cfg.get("sigma", 0.8)
        k = shared_kernel(cfg.get("d", 3), cfg.get("n_max", 700), cfg.get("kernel_cache"))
        if mode == "p-ratio":
            r = M.p_ratio_check(k, cfg.scalar("beta", 0.2), ts, cfg.get("xi", 0.5), sig)
        else:
            r = M.q_iota_check(k, ts, cfg.get("xi1", 0.1), sig, cfg.get("nu", 0.6))
        em.table(mode.replace("-", "_"), r["rows"])
        print(f"C = {r['C']:.6g} (first {r['C_first']:.6g}); stable within 10%: {r['stable_10pct']}")
        return r, [check("finite", r["finite"], r["C"], None),
                   check("stable_10pct", r["stable_10pct"], r["C"], 1.1 * r["C_first"])]
    raise ConfigError(f"unknown moments mode {mode!r}")


def cmd_factorization(cfg: RunConfig, em: Emitter):
    """Factorization error delta, one cell or a decay sweep."""
    from . import factorization as F
    from .environment import env_field
    params = cfg.params()
    seed = cfg.get("seed", 0)
    if cfg.mode == "sweep":
        ts = cfg.get("t", [20.0, 40.0, 80.0])
        dt = cfg.scalar("dt", F.LATTICE_DT)
        r = F.delta_sweep(params, params.sigma, ts, cfg.get("n_env", 200), 0, seed,
                          cfg.get("workers", 1), dt)
        delta = r.pop("delta")
        cells = []
        for e in range(delta.shape[0]):
            for i, t in enumerate(r["rows"]):
                for k in range(t["y_max"] + 1):
                    cells.append({"t": t["t"], "env": e, "y1": k,
                                  **{f"y{j + 2}": 0 for j in range(params.d - 1)},
                                  "delta": delta[e, i, k], "stderr": 0.0, "seed": seed})
        em.table("cells", cells)
        em.table("decay", r["rows"])
        em.series("sup_mean_abs_delta", [x["t"] for x in r["rows"]],
                  [x["sup_mean_abs_delta"] for x in r["rows"]],
                  [(x["ci_hi"] - x["ci_lo"]) / 3.92 for x in r["rows"]])
        for x in r["rows"]:
            print(f"t={x['t']:g}: sup_y <|delta|> = {x['sup_mean_abs_delta']:.5f} "
                  f"[{x['ci_lo']:.5f}, {x['ci_hi']:.5f}]")
        print(f"theta = {r['theta']:.3f}  95% CI {r['theta_ci']}")
        return r, [check("last_below_first_95", r["last_below_first_95"],
                         r["rows"][-1]["sup_mean_abs_delta"], r["rows"][0]["ci_lo"]),
                   check("theta_positive_95", r["theta_positive_95"], r["theta"], r["theta_ci"])]
    if cfg.mode == "cell":
        t = cfg.scalar("t", 20.0)
        y = cfg.get("y", [0] * params.d)
        f = env_field(seed, params.d, cfg.get("env_index", 0))
        c = F.delta_estimate(f, params, t, y, None, cfg.get("n_paths", 2000), seed + 1,
                             method=cfg.get("method", "bridge"))
        rec = c.record(seed)
        em.table("cell", [{"t": t, **{f"y{i + 1}": v for i, v in enumerate(c.y)},
                           "delta": c.delta, "stderr": c.stderr, "z_bridge": c.z_bridge.mean,
                           "z_fwd": c.z_fwd.mean, "z_bwd": c.z_bwd.mean, "seed": seed}])
        print(f"delta = {c.delta:.5g} +/- {c.stderr:.3g}")
        return rec, [check("finite", math.isfinite(c.delta), c.delta, c.stderr)]
    raise ConfigError(f"unknown factorization mode {cfg.mode!r}")


def cmd_she(cfg: RunConfig, em: Emitter):
    """Semidiscrete SHE integrator, Feynman-Kac check and ratio comparison."""
    from . import she as S
    from .environment import env_field
    params = cfg.params()
    seed = cfg.get("seed", 0)
    lap = cfg.get("laplacian", "walk")
    if cfg.mode == "fk":
        f = env_field(seed, params.d, cfg.get("env_index", 0))
        r = S.feynman_kac_crosscheck(f, params, cfg.get("y", [0] * params.d),
                                     cfg.scalar("t", 2.0), cfg.get("dt", [1e-3, 5e-4]),
                                     cfg.get("n_paths", 1_000_000), cfg.get("box_radius", 8),
                                     seed + 1)
        em.table("fk", r["legs"])
        checks = [check(f"rel_diff_dt{x['dt']:g}", x["rel_diff"] <= 0.05, x["rel_diff"], 0.05,
                        mc_rel_stderr=r["fk_rel_stderr"]) for x in r["legs"]]
        if "shrink" in r:
            checks.append(check("shrink_1.5x", min(r["shrink"]) >= 1.5, min(r["shrink"]), 1.5))
        for x in r["legs"]:
            print(f"dt={x['dt']:g}: u={x['integrator']:.6g} fk={r['fk']:.6g}"
                  f"+/-{r['fk_stderr']:.2g} rel={x['rel_diff']:.3g}")
        return r, checks
    if cfg.mode == "ratio":
        R = cfg.get("box_radius", 12)
        f1 = S.LatticeFunction.constant(params.d, R)
        f2 = S.LatticeFunction.constant(params.d, R)
        f2.values[(R,) * params.d] += 1.0
        ys = [[1 if i == j else 0 for i in range(params.d)] for j in range(params.d)]
        r = S.ratio_compare(params, f1, f2, ys, cfg.get("t", [2.0, 4.0, 8.0]),
                            cfg.scalar("dt", 1 / 16), cfg.get("n_env", 100), seed,
                            cfg.get("workers", 1), lap)
        r.pop("gaps")
        em.table("ratio", r["rows"])
        em.series("median_gap", [x["t"] for x in r["rows"]], [x["median_gap"] for x in r["rows"]],
                  [(x["q75"] - x["q25"]) / 2 for x in r["rows"]])
        for x in r["rows"]:
            print(f"t={x['t']:g}: median gap {x['median_gap']:.5g}")
        return r, [check("decreasing", r["decreasing"], r["rows"][-1]["median_gap"],
                         r["rows"][0]["median_gap"])]
    if cfg.mode == "run":
        f = env_field(seed, params.d, cfg.get("env_index", 0))
        R = cfg.get("box_radius", 8)
        u = S.integrate(f, params, S.LatticeFunction.delta(params.d, R), cfg.scalar("t", 2.0),
                        cfg.scalar("dt", 1 / 64), lap)
        u.meta.update({"seed": seed, "beta": params.beta, "field": f.manifest()})
        man = u.dump(em.out / f"{em.stem}_state")
        em.files += [f"{em.stem}_state.bin", f"{em.stem}_state.json"]
        print(f"u(0,t) = {u.at(np.zeros(params.d, int)):.6g}; mass {u.values.sum():.6g}")
        return {"state": man, "u0": u.at(np.zeros(params.d, int)), "mass": float(u.values.sum())}, [
            check("nonnegative", bool(np.all(u.values >= 0)), float(u.values.min()), 0.0)]
    if cfg.mode == "noise":
        r = S.noise_factor_mean(params.beta, cfg.scalar("dt", 0.01),
                                cfg.get("n_samples", 1_000_000), seed, params.d)
        return r, [check("mean_one", r["pass"], r["mean"], 3 * r["stderr"])]
    raise ConfigError(f"unknown she mode {cfg.mode!r}")


def cmd_tail(cfg: RunConfig, em: Emitter):
    """Lower tail of Z and the lazy discrete model."""
    from . import tail as T
    from .partition import alpha_for
    seed = cfg.get("seed", 0)
    if cfg.mode == "empirical":
        params = cfg.params()
        r = T.tail_empirical(params, cfg.scalar("t", 5.0), cfg.get("n_env", 10_000),
                             cfg.get("n_paths", 100), cfg.get("u_grid", None), seed,
                             cfg.get("workers", 1))
        em.table("tail", r["rows"], ["u", "count", "n_env", "log_p", "ci_lo", "ci_hi"])
        usable = [x for x in r["rows"] if x["count"] > 0]
        em.series("log_p", [x["u"] for x in usable], [x["log_p"] for x in usable],
                  [(x["ci_hi"] - x["ci_lo"]) / 3.92 for x in usable])
        if "error" in r:
            print(f"{r['error']}; max usable u = {r['max_usable_u']}")
            return r, [check("enough_tail_events", False, r["max_usable_u"], None)]
        q = r["quadratic"]
        print(f"b = {q['b']:.4g} 95% CI [{q['b_ci'][0]:.4g}, {q['b_ci'][1]:.4g}]; "
              f"wsse quadratic {q['wsse']:.4g} vs linear {r['linear']['wsse']:.4g}")
        return r, [check("b_positive_95", r["b_positive_95"], q["b"], q["b_stderr"]),
                   check("quadratic_better", r["quadratic_better"], q["wsse"], r["linear"]["wsse"]),
                   check("monotone", r["monotone"], None, None)]
    if cfg.mode == "discrete":
        d = cfg.get("d", 3)
        beta = cfg.scalar("beta", 0.2)
        Ns = cfg.get("N", [1, 2, 4, 8, 16, 32])
        ts = cfg.get("t", [1.0, 4.0, 16.0])
        qp = cfg.get("quad_points", 128)
        n_env, n_paths = cfg.get("n_env", 1000), cfg.get("n_paths", 200)
        n_pairs = cfg.get("n_pairs", 100_000)
        a = alpha_for(d)
        rows, checks = [], []
        for N in Ns:
            q = T.return_prob_q(d, N, qp)
            gs, gtail = T.green_series(d, N, a.value)
            tol = q["green_error"] + gtail + 0.5 * (N + 1) * a.tail_bound
            row = {"N": N, "q": q["q"], "q_error": q["q_error"], "N_1_minus_q": N * (1 - q["q"]),
                   "green_fourier": q["green"], "green_series": gs, "green_tol": tol,
                   "ln_inv_q_times_N": N * math.log(1 / q["q"])}
            checks.append(check(f"q_routes_agree_N{N}", abs(q["green"] - gs) <= tol,
                                abs(q["green"] - gs), tol))
            model = T.LazyModel(d, N, beta)
            closed = T.second_moment_closed(beta, N, q["q"])
            row["closed_form"] = closed
            row["closed_form_tol"] = closed * q["q_error"] * 10
            mo = T.discrete_mean_one(model, ts[0], n_env, n_paths, seed)
            row.update({"mean_one": mo["mean"], "mean_one_stderr": mo["stderr"]})
            checks.append(check(f"mean_one_N{N}", mo["pass"], mo["mean"], 3 * mo["stderr"]))
            prev = None
            for t in ts:
                pm = T.second_moment_pair_mc(model, t, n_pairs, seed)
                ok = pm.mean <= closed + 3 * pm.stderr + row["closed_form_tol"]
                checks.append(check(f"envelope_N{N}_t{t:g}", ok, pm.mean - closed,
                                    3 * pm.stderr))
                row[f"pair_mc_t{t:g}"] = pm.mean
                row[f"pair_mc_t{t:g}_stderr"] = pm.stderr
                if prev is not None:
                    checks.append(check(f"approaches_N{N}_t{t:g}",
                                        closed - pm.mean < closed - prev + 3 * pm.stderr,
                                        closed - pm.mean, closed - prev))
                prev = pm.mean
            rows.append(row)
            print(f"N={N}: q={q['q']:.6f} N(1-q)={row['N_1_minus_q']:.4f} closed={closed:.5f}")
        vals = [r["N_1_minus_q"] for r in rows if r["N"] >= 2]
        c1, c2 = (min(vals), max(vals)) if vals else (math.nan, math.nan)
        limit = 2 / (1 + a.value)
        em.table("discrete", rows)
        em.series("N_1_minus_q", [r["N"] for r in rows], [r["N_1_minus_q"] for r in rows],
                  [r["N"] * r["q_error"] for r in rows])
        res = {"rows": rows, "c1": c1, "c2": c2, "limit_2_over_1_plus_alpha": limit,
               "beta_sq_bound": min(r["ln_inv_q_times_N"] for r in rows)}
        checks.append(check("N_1_minus_q_bracketed", 0 < c1 <= c2 < limit + 1e-3, [c1, c2], limit))
        return res, checks
    raise ConfigError(f"unknown tail mode {cfg.mode!r}")


def report_schema() -> dict:
    """Fields of every report and table written by the CLI."""
    est = {"quantity": "name of the estimated object", "mean": "estimate",
           "stderr": "standard error", "n": "sample count", "seed": "master seed",
           "wall_time": "seconds (timing sidecar only)"}
    return {
        "version": REPORT_VERSION,
        "report": {"version": "schema/report version stamp",
                   "package_version": "polymerlab version",
                   "config": "resolved options (CLI > file > defaults) with subcommand and mode",
                   "seed": "master seed", "results": "subcommand specific, see tables",
                   "checks": "list of {name, pass, value, tolerance}",
                   "status": "PASS if every check passed"},
        "estimate": est,
        "tables": {
            "transition_p": ["t", "y1..yd", "p", "truncation_bound", "lclt", "ratio"],
            "partition_mean_one": ["beta", "t", "mean", "stderr", "n_env", "n_paths", "pass"],
            "partition_second_moment": ["t", "oracle", "oracle_rtol", "mc", "mc_stderr",
                                        "pair_mc", "pair_stderr"],
            "factorization_cells": ["t", "env", "y1..yd", "delta", "stderr", "seed"],
            "factorization_decay": ["t", "horizon", "y_max", "sup_mean_abs_delta", "ci_lo",
                                    "ci_hi", "mean_abs_delta_y0", "corr_fwd_bwd"],
            "she_fk": ["dt", "integrator", "rel_diff"],
            "she_ratio": ["t", "median_gap", "mean_gap", "q25", "q75"],
            "tail_tail": ["u", "count", "n_env", "log_p", "ci_lo", "ci_hi"],
            "tail_discrete": ["N", "q", "q_error", "N_1_minus_q", "green_fourier",
                              "green_series", "green_tol", "closed_form", "mean_one",
                              "mean_one_stderr", "pair_mc_t*", "pair_mc_t*_stderr"],
            "plot": ["series", "x", "y", "y_err"],
        },
        "timing_sidecar": {"wall_time_s": "elapsed seconds", "report": "report file name",
                           "execution": "workers, out, kernel_cache, plot_data"},
        "exit_codes": {"0": "success", "1": "a check failed", "2": "configuration error"},
    }


def cmd_schema(cfg: RunConfig, em: Emitter):
    """Print the report and table schema as JSON."""
    print(json.dumps(report_schema(), indent=1, sort_keys=True))
    return None, []


SELFTEST_RUNS = [
    ["partition", "mean-one", "--t", "1,2", "--n-env", "300", "--n-paths", "20"],
    ["factorization", "sweep", "--t", "4,8", "--n-env", "140", "--sigma", "0.6"],
    ["tail", "empirical", "--t", "1", "--n-env", "300", "--n-paths", "20"],
    ["she", "ratio", "--t", "1,2", "--n-env", "130", "--box-radius", "4", "--dt", "0.125"],
]


def cmd_selftest(cfg: RunConfig, em: Emitter):
    """Replay small runs with one and two workers and compare artifacts byte for byte."""
    seed = cfg.get("seed", 0)
    checks = []
    with tempfile.TemporaryDirectory() as tmp:
        for i, argv in enumerate(SELFTEST_RUNS):
            outs = []
            for w in (1, 2, 1):
                o = Path(tmp) / f"run{i}_w{w}_{len(outs)}"
                code = main(argv + ["--seed", str(seed), "--workers", str(w), "--out", str(o)],
                            quiet=True)
                files = {p.name: p.read_bytes() for p in sorted(o.iterdir())
                         if not p.name.endswith(".timing.json")}
                outs.append((code, files))
            same = all(x[1] == outs[0][1] for x in outs[1:]) and bool(outs[0][1])
            name = " ".join(argv[:2])
            checks.append(check(f"replay_{name.replace(' ', '_')}", same,
                                sorted(outs[0][1]), "byte-identical"))
            print(f"{name:28s} {'PASS' if same else 'FAIL'} ({len(outs[0][1])} artifacts)")
    return {"runs": [" ".join(a) for a in SELFTEST_RUNS]}, checks


COMMANDS = {"constants": cmd_constants, "transition": cmd_transition,
            "partition": cmd_partition, "moments": cmd_moments,
            "factorization": cmd_factorization, "she": cmd_she, "tail": cmd_tail,
            "selftest": cmd_selftest, "schema": cmd_schema}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file")
    for name, (_, hlp) in OPTIONS.items():
        flag = "--" + name.replace("_", "-")
        if name == "plot_data":
            common.add_argument(flag, action="store_const", const="true", default=argparse.SUPPRESS,
                                help=hlp)
        else:
            common.add_argument(flag, dest=name, default=argparse.SUPPRESS, help=hlp)
    p = argparse.ArgumentParser(prog="polymerlab", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name, modes in MODES.items():
        sp = sub.add_parser(name, parents=[common], help=(COMMANDS[name].__doc__ or name))
        if modes[0] is not None:
            sp.add_argument("mode", choices=modes)
    return p


def resolve(ns: argparse.Namespace) -> RunConfig:
    args = vars(ns).copy()
    sub = args.pop("subcommand")
    mode = args.pop("mode", None)
    cfg_path = args.pop("config", None)
    explicit = read_config_file(cfg_path) if cfg_path else {}
    for k, v in args.items():
        try:
            explicit[k] = OPTIONS[k][0](v)
        except ValueError as exc:
            raise ConfigError(f"--{k.replace('_', '-')}: {exc}") from None
    return RunConfig(sub, mode, explicit)


def main(argv=None, quiet: bool = False) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(ns)
        if cfg.get("kernel_cache"):
            os.environ["POLYMERLAB_CACHE"] = cfg.resolved["kernel_cache"]
        stem = cfg.subcommand + (f"_{cfg.mode.replace('-', '_')}" if cfg.mode else "")
        em = Emitter(Path(cfg.get("out", "polymerlab_out")), stem, cfg.get("plot_data", False))
        t0 = time.perf_counter()
        old = sys.stdout
        if quiet:
            sys.stdout = io.StringIO()
        try:
            res, checks = COMMANDS[cfg.subcommand](cfg, em)
        finally:
            sys.stdout = old
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.subcommand == "schema":
        return EXIT_OK
    em.report(cfg, cfg.get("seed", 0), res, checks, time.perf_counter() - t0)
    failed = [c["name"] for c in checks if not c["pass"]]
    if not quiet:
        print(("FAIL: " + ", ".join(failed)) if failed else "PASS")
    return EXIT_CHECK if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
