"""Transition probabilities of the simple symmetric random walk on Z^d.

Discrete-time probabilities ``q_n^z`` are tabulated by repeated convolution on
the hyperoctahedral quotient of the lattice: a class is the sorted vector of
absolute coordinates, so one stored number covers up to ``2**d * d!`` sites.
Continuous-time probabilities are Poisson mixtures of the table.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy import special

FORMAT_VERSION = 1
DEFAULT_MEMORY_LIMIT = 2 * 1024**3


class KernelError(ValueError):
    """Raised when a kernel cannot answer a query at the requested accuracy."""


class MemoryBudgetError(KernelError):
    pass


# ---------------------------------------------------------------- lattice ---

def unit_moves(d: int) -> np.ndarray:
    moves = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        moves[2 * i, i] = 1
        moves[2 * i + 1, i] = -1
    return moves


def canonical(z) -> np.ndarray:
    """Sorted absolute coordinates (descending); works on stacked rows."""
    z = np.abs(np.asarray(z, dtype=np.int64))
    return -np.sort(-z, axis=-1)


def _enumerate_classes(d: int, radius: int) -> np.ndarray:
    rows = np.arange(radius + 1, dtype=np.int64)[:, None]
    sums = rows[:, 0].copy()
    for _ in range(1, d):
        cap = np.minimum(rows[:, -1], radius - sums)
        counts = cap + 1
        rep = np.repeat(np.arange(rows.shape[0]), counts)
        starts = np.repeat(np.cumsum(counts) - counts, counts)
        offs = np.arange(counts.sum(), dtype=np.int64) - starts
        rows = np.column_stack([rows[rep], offs])
        sums = sums[rep] + offs
    return rows


def _orbit_sizes(classes: np.ndarray) -> np.ndarray:
    d = classes.shape[1]
    nonzero = (classes > 0).sum(axis=1)
    sizes = np.full(classes.shape[0], math.factorial(d), dtype=np.int64)
    # divide by the factorials of runs of equal values
    vals = classes
    run = np.ones(classes.shape[0], dtype=np.int64)
    for i in range(1, d):
        same = vals[:, i] == vals[:, i - 1]
        run = np.where(same, run + 1, 1)
        sizes //= np.where(same, run, 1)
    return sizes * (2 ** nonzero)


@njit(cache=True)
def _class_index(keys_sorted, order, key):
    i = np.searchsorted(keys_sorted, key)
    if i < keys_sorted.shape[0] and keys_sorted[i] == key:
        return order[i]
    return -1


@njit(cache=True)
def _canon_key(z, base):
    """Key of the class of ``z`` plus its 1-norm (no allocation beyond a copy)."""
    d = z.shape[0]
    a = np.empty(d, dtype=np.int64)
    norm = 0
    for i in range(d):
        v = z[i] if z[i] >= 0 else -z[i]
        a[i] = v
        norm += v
    # insertion sort, descending
    for i in range(1, d):
        v = a[i]
        j = i - 1
        while j >= 0 and a[j] < v:
            a[j + 1] = a[j]
            j -= 1
        a[j + 1] = v
    key = 0
    mult = 1
    for i in range(d):
        key += a[i] * mult
        mult *= base
    return key, norm


@njit(cache=True)
def q_lookup(n, z, base, keys0, order0, keys1, order1, values, offsets, rowlen, store_radius):
    """``q_n^z`` from the packed table; ``nan`` when ``z`` lies outside the stored box."""
    key, norm = _canon_key(z, base)
    if norm > n or (norm - n) % 2 != 0:
        return 0.0
    if norm > store_radius:
        return np.nan
    if n % 2 == 0:
        idx = _class_index(keys0, order0, key)
    else:
        idx = _class_index(keys1, order1, key)
    if idx < 0 or idx >= rowlen[n]:
        return np.nan
    return values[offsets[n] + idx]


@njit(cache=True)
def _convolve(n_max, radius, nb0, nb1, upto0, upto1, inv2d, mult0, mult1,
              values, offsets, rowlen, mass, coll):
    size = max(nb0.shape[0], nb1.shape[0])
    cur = np.zeros(size)
    nxt = np.zeros(size)
    cur[0] = 1.0
    twod = nb0.shape[1]
    for n in range(n_max + 1):
        p = n % 2
        curlen = upto0[min(n, radius)] if p == 0 else upto1[min(n, radius)]
        # invariants of row n (Neumaier-compensated)
        s = 0.0
        c = 0.0
        s2 = 0.0
        c2 = 0.0
        for i in range(curlen):
            m = mult0[i] if p == 0 else mult1[i]
            v = m * cur[i]
            t = s + v
            if abs(s) >= abs(v):
                c += (s - t) + v
            else:
                c += (v - t) + s
            s = t
            v2 = m * cur[i] * cur[i]
            t2 = s2 + v2
            if abs(s2) >= abs(v2):
                c2 += (s2 - t2) + v2
            else:
                c2 += (v2 - t2) + s2
            s2 = t2
        mass[n] = s + c
        coll[n] = s2 + c2
        off = offsets[n]
        for i in range(rowlen[n]):
            values[off + i] = cur[i]
        if n == n_max:
            break
        q = 1 - p
        newlen = upto0[min(n + 1, radius)] if q == 0 else upto1[min(n + 1, radius)]
        for i in range(newlen):
            acc = 0.0
            comp = 0.0
            for k in range(twod):
                j = nb0[i, k] if q == 0 else nb1[i, k]
                if j >= 0 and j < curlen:
                    v = cur[j]
                    t = acc + v
                    if abs(acc) >= abs(v):
                        comp += (acc - t) + v
                    else:
                        comp += (v - t) + acc
                    acc = t
            nxt[i] = (acc + comp) * inv2d
        for i in range(newlen, size):
            nxt[i] = 0.0
        tmp = cur
        cur = nxt
        nxt = tmp


@dataclass
class TransitionKernel:
    """Packed table of ``q_n^z`` for ``0 <= n <= n_max``.

    The convolution runs on the box ``|z|_1 <= radius``; rows are stored for
    ``|z|_1 <= store_radius``.  Entries are exact (up to rounding) whenever
    ``|z|_1 <= 2*radius + 1 - n``.
    """

    d: int
    n_max: int
    radius: int
    store_radius: int
    classes: tuple  # (even classes, odd classes), rows sorted by 1-norm
    values: np.ndarray
    offsets: np.ndarray
    rowlen: np.ndarray
    mass: np.ndarray
    collision: np.ndarray
    _lookup: tuple = field(default=None, repr=False)

    def __post_init__(self):
        base = self.radius + 2
        keys = []
        for cl in self.classes:
            k = (cl * base ** np.arange(self.d, dtype=np.int64)).sum(axis=1)
            order = np.argsort(k, kind="stable")
            keys.append((np.ascontiguousarray(k[order]), order.astype(np.int64)))
        self._lookup = (base, keys[0][0], keys[0][1], keys[1][0], keys[1][1])

    # -- numba-facing bundle ------------------------------------------------
    @property
    def table(self) -> tuple:
        base, k0, o0, k1, o1 = self._lookup
        return (base, k0, o0, k1, o1, self.values, self.offsets, self.rowlen, self.store_radius)

    def q(self, n: int, z) -> float:
        return q(self, n, z)

    def q_many(self, n: int, zs) -> np.ndarray:
        zs = np.asarray(zs, dtype=np.int64).reshape(-1, self.d)
        return np.array([_q_checked(self, n, z) for z in zs])

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "d": self.d,
            "n_max": self.n_max,
            "radius": self.radius,
            "store_radius": self.store_radius,
        }

    def save(self, path) -> Path:
        """Write ``<path>.npz`` plus a ``<path>.json`` manifest with a SHA-256 checksum."""
        path = Path(path)
        blob = path.with_suffix(".npz")
        np.savez(blob, values=self.values, offsets=self.offsets, rowlen=self.rowlen,
                 mass=self.mass, collision=self.collision)
        manifest = self.manifest()
        manifest["checksum"] = hashlib.sha256(blob.read_bytes()).hexdigest()
        manifest["blob"] = blob.name
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return blob

    @classmethod
    def load(cls, path) -> "TransitionKernel":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        if manifest.get("format_version") != FORMAT_VERSION:
            raise KernelError(f"unsupported kernel format {manifest.get('format_version')}")
        blob = path.with_suffix(".npz")
        if hashlib.sha256(blob.read_bytes()).hexdigest() != manifest["checksum"]:
            raise KernelError(f"checksum mismatch for {blob}")
        data = np.load(blob)
        classes = _split_classes(manifest["d"], manifest["radius"])
        return cls(manifest["d"], manifest["n_max"], manifest["radius"], manifest["store_radius"],
                   classes, data["values"], data["offsets"], data["rowlen"], data["mass"],
                   data["collision"])


def _split_classes(d: int, radius: int):
    cl = _enumerate_classes(d, radius)
    norms = cl.sum(axis=1)
    out = []
    for p in (0, 1):
        sel = cl[norms % 2 == p]
        sel = sel[np.argsort(sel.sum(axis=1), kind="stable")]
        out.append(np.ascontiguousarray(sel))
    return tuple(out)


def _neighbour_table(d, radius, src, dst_keys, dst_order):
    base = radius + 2
    powers = base ** np.arange(d, dtype=np.int64)
    nb = np.empty((src.shape[0], 2 * d), dtype=np.int64)
    for k, mv in enumerate(unit_moves(d)):
        z = canonical(src + mv)
        key = (z * powers).sum(axis=1)
        pos = np.searchsorted(dst_keys, key)
        pos = np.minimum(pos, dst_keys.size - 1)
        hit = (dst_keys[pos] == key) & (z.sum(axis=1) <= radius)
        nb[:, k] = np.where(hit, dst_order[pos], -1)
    return nb


def build_kernel(d: int, n_max: int, radius: int | None = None, store_radius: int | None = None,
                 memory_limit: int = DEFAULT_MEMORY_LIMIT) -> TransitionKernel:
    """Tabulate ``q_n^z`` by repeated convolution.

    ``radius`` defaults to ``n_max`` (exact everywhere); ``store_radius``
    defaults to ``radius``.
    """
    if d < 1 or n_max < 0:
        raise ValueError("need d >= 1 and n_max >= 0")
    radius = n_max if radius is None else int(radius)
    store_radius = radius if store_radius is None else min(int(store_radius), radius)
    if (radius + 2) ** d >= 2**62:
        raise MemoryBudgetError("radius too large for 64-bit class keys")
    classes = _split_classes(d, radius)
    upto = []
    for cl in classes:
        norms = cl.sum(axis=1)
        upto.append(np.searchsorted(norms, np.arange(radius + 1), side="right").astype(np.int64))
    # store only entries the truncated convolution gets exactly right
    exact = [min(n, store_radius, 2 * radius + 1 - n) for n in range(n_max + 1)]
    rowlen = np.array([upto[n % 2][e] if e >= 0 else 0 for n, e in enumerate(exact)], dtype=np.int64)
    work = sum(cl.shape[0] for cl in classes) * (2 * d + 2) * 8
    need = int(rowlen.sum()) * 8 + work
    if need > memory_limit:
        raise MemoryBudgetError(
            f"kernel d={d} n_max={n_max} radius={radius} needs {need / 2**20:.0f} MiB "
            f"(limit {memory_limit / 2**20:.0f} MiB)")
    offsets = np.zeros(n_max + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(rowlen)[:-1]
    keyed = []
    base = radius + 2
    powers = base ** np.arange(d, dtype=np.int64)
    for cl in classes:
        k = (cl * powers).sum(axis=1)
        order = np.argsort(k, kind="stable")
        keyed.append((k[order], order))
    nb0 = _neighbour_table(d, radius, classes[0], *keyed[1])
    nb1 = _neighbour_table(d, radius, classes[1], *keyed[0])
    values = np.empty(int(rowlen.sum()))
    mass = np.empty(n_max + 1)
    coll = np.empty(n_max + 1)
    _convolve(n_max, radius, nb0, nb1, upto[0], upto[1], 1.0 / (2 * d),
              _orbit_sizes(classes[0]).astype(np.float64), _orbit_sizes(classes[1]).astype(np.float64),
              values, offsets, rowlen, mass, coll)
    return TransitionKernel(d, n_max, radius, store_radius, classes, values, offsets, rowlen,
                            mass, coll)


def load_or_build(d: int, n_max: int, radius: int | None = None, store_radius: int | None = None,
                  cache: str | Path | None = None) -> TransitionKernel:
    """Build a kernel, reusing ``cache`` (a path stem) when its manifest matches."""
    if cache is not None:
        stem = Path(cache)
        if stem.with_suffix(".json").exists():
            k = TransitionKernel.load(stem)
            want_r = n_max if radius is None else radius
            want_s = want_r if store_radius is None else min(store_radius, want_r)
            if (k.d, k.n_max, k.radius, k.store_radius) == (d, n_max, want_r, want_s):
                return k
        k = build_kernel(d, n_max, radius, store_radius)
        stem.parent.mkdir(parents=True, exist_ok=True)
        k.save(stem)
        return k
    return build_kernel(d, n_max, radius, store_radius)


# ------------------------------------------------------------- operations ---

def _q_checked(kernel: TransitionKernel, n: int, z) -> float:
    if not 0 <= n <= kernel.n_max:
        raise KernelError(f"n={n} outside 0..{kernel.n_max}")
    z = np.asarray(z, dtype=np.int64).reshape(kernel.d)
    v = q_lookup(int(n), z, *kernel.table)
    if np.isnan(v):
        raise KernelError(f"site {z.tolist()} lies outside the stored box (|z|_1 <= {kernel.store_radius})")
    return float(v)


def q(kernel: TransitionKernel, n: int, z) -> float:
    """``P(gamma_n = z | gamma_0 = 0)``."""
    return _q_checked(kernel, n, z)


def poisson_cutoff(t: float, tail_eps: float) -> int:
    """Smallest ``n`` with the Chernoff bound on ``P(Poisson(t) > n)`` at most ``tail_eps``."""
    n = max(int(math.ceil(t)), 0)
    while True:
        m = n + 1
        # P(N >= m) <= exp(-t) (e t / m)^m  for m > t
        log_bound = -t + m * (1.0 + math.log(t / m)) if t > 0 else -math.inf
        if m > t and log_bound <= math.log(tail_eps):
            return n
        n += 1


def poisson_weights(t: float, n_hi: int) -> np.ndarray:
    n = np.arange(n_hi + 1)
    return np.exp(-t + n * math.log(t) - special.gammaln(n + 1)) if t > 0 else (n == 0).astype(float)


@njit(cache=True)
def _q_matrix(zs, n_hi, base, k0, o0, k1, o1, vals, offs, rowlen, srad, out):
    for i in range(zs.shape[0]):
        for n in range(n_hi + 1):
            out[i, n] = q_lookup(n, zs[i], base, k0, o0, k1, o1, vals, offs, rowlen, srad)


@njit(cache=True)
def _mixture(zs, w, base, k0, o0, k1, o1, vals, offs, rowlen, srad, out):
    for i in range(zs.shape[0]):
        acc = 0.0
        comp = 0.0
        for n in range(w.shape[0]):
            v = w[n] * q_lookup(n, zs[i], base, k0, o0, k1, o1, vals, offs, rowlen, srad)
            tt = acc + v
            if abs(acc) >= abs(v):
                comp += (acc - tt) + v
            else:
                comp += (v - tt) + acc
            acc = tt
        out[i] = acc + comp


def q_matrix(kernel: TransitionKernel, zs, n_hi: int) -> np.ndarray:
    """``q_n^z`` for each row ``z`` of ``zs`` and ``n = 0..n_hi``."""
    if n_hi > kernel.n_max:
        raise KernelError(f"need n up to {n_hi}, kernel has n_max={kernel.n_max}")
    zs = np.ascontiguousarray(zs, dtype=np.int64).reshape(-1, kernel.d)
    out = np.empty((zs.shape[0], n_hi + 1))
    _q_matrix(zs, int(n_hi), *kernel.table, out)
    if np.isnan(out).any():
        raise KernelError("a site lies outside the stored kernel box")
    return out


def q_column(kernel: TransitionKernel, z, n_hi: int) -> np.ndarray:
    """``q_n^z`` for ``n = 0..n_hi``."""
    return q_matrix(kernel, np.asarray(z).reshape(1, kernel.d), n_hi)[0]


def p_continuous(kernel: TransitionKernel, t: float, y, tail_eps: float = 1e-12):
    """``P(eta_t = y)`` for the rate-1 walk; ``y`` may be one site or a stack of sites."""
    if not t > 0:
        raise ValueError("t must be positive")
    n_hi = poisson_cutoff(t, tail_eps)
    if n_hi > kernel.n_max:
        raise KernelError(
            f"t={t} needs n_max >= {n_hi} for tail {tail_eps:g}; kernel has {kernel.n_max}")
    w = poisson_weights(t, n_hi)
    ys = np.asarray(y, dtype=np.int64)
    single = ys.ndim == 1
    ys = np.ascontiguousarray(ys.reshape(-1, kernel.d))
    out = np.empty(ys.shape[0])
    _mixture(ys, w, *kernel.table, out)
    if np.isnan(out).any():
        raise KernelError("a site lies outside the stored kernel box")
    return float(out[0]) if single else out


def lclt_approx(d: int, t: float, y) -> float:
    """Gaussian main term ``(d/(2 pi t))^(d/2) exp(-d |y|^2 / (2t))``."""
    y = np.asarray(y, dtype=float)
    r2 = np.sum(y * y, axis=-1)
    return (d / (2 * math.pi * t)) ** (d / 2) * np.exp(-d * r2 / (2 * t))


def iota(y, n: int) -> int:
    """``n`` when ``|y|_1`` and ``n`` have equal parity, else ``n + 1``."""
    norm = int(np.abs(np.asarray(y, dtype=np.int64)).sum())
    return n if (norm - n) % 2 == 0 else n + 1


def _strict_bounds(lo: float, hi: float, tol: float = 1e-9) -> tuple[int, int]:
    k = round(lo)
    first = k + 1 if abs(lo - k) < tol * max(1.0, abs(lo)) else math.floor(lo) + 1
    k = round(hi)
    last = k - 1 if abs(hi - k) < tol * max(1.0, abs(hi)) else math.floor(hi)
    return first, last


def j_window(t: float, nu: float) -> range:
    """Integers ``n >= 1`` with ``nu t < n < (2 - nu) t``."""
    if not 0.5 < nu < 1:
        raise ValueError("nu must lie in (1/2, 1)")
    if not t > 0:
        raise ValueError("t must be positive")
    first, last = _strict_bounds(nu * t, (2 - nu) * t)
    return range(max(first, 1), last + 1)


@dataclass(frozen=True)
class AlphaEstimate:
    value: float        # partial sum plus asymptotic tail estimate
    partial: float      # sum over 1 <= n <= n_max
    tail_estimate: float
    tail_bound: float
    n_max: int

    @property
    def interval(self) -> tuple[float, float]:
        return self.partial, self.partial + self.tail_bound


def alpha_d(kernel: TransitionKernel, tol: float | None = None) -> AlphaEstimate:
    """Expected number of coincidences of two independent discrete walks.

    Uses ``sum_z (q_n^z)^2 = q_{2n}^0 ~ 2 (d / (4 pi n))^(d/2)``.  The tail
    constant is the larger of the asymptotic constant and the largest
    ``n^(d/2) sum_z (q_n^z)^2`` seen on the upper half of the table.
    """
    d = kernel.d
    if d < 3:
        raise KernelError("alpha_d is infinite for d < 3")
    n_max = kernel.n_max
    if n_max > kernel.radius:
        raise KernelError("alpha_d needs radius >= n_max")
    coll = kernel.collision[1:n_max + 1]
    partial = math.fsum(coll)
    c_asym = 2.0 * (d / (4 * math.pi)) ** (d / 2)
    n = np.arange(1, n_max + 1)
    upper = n >= max(1, n_max // 2)
    c_emp = float(np.max(coll[upper] * n[upper] ** (d / 2))) if n_max >= 1 else c_asym
    zeta_tail = float(special.zeta(d / 2, n_max + 1))
    tail_est = c_asym * zeta_tail
    tail_bound = max(c_asym, c_emp) * zeta_tail
    if tol is not None and tail_bound > tol:
        raise KernelError(f"tail bound {tail_bound:.3g} exceeds tolerance {tol:g}; raise n_max")
    return AlphaEstimate(partial + tail_est, partial, tail_est, tail_bound, n_max)


# ------------------------------------------------------------- skeletons ---

@dataclass
class Skeleton:
    """A realized continuous-time path: start, jump times and unit steps."""

    start_site: np.ndarray
    start_time: float
    end_time: float
    jump_times: np.ndarray
    steps: np.ndarray

    def __post_init__(self):
        self.start_site = np.asarray(self.start_site, dtype=np.int64)
        self.jump_times = np.asarray(self.jump_times, dtype=float)
        self.steps = np.asarray(self.steps, dtype=np.int64).reshape(-1, self.start_site.size)
        if self.jump_times.size != self.steps.shape[0]:
            raise ValueError("one step per jump time")
        jt = self.jump_times
        if jt.size and (jt[0] <= self.start_time or jt[-1] >= self.end_time or np.any(np.diff(jt) <= 0)):
            raise ValueError("jump times must increase strictly inside (start, end)")
        if self.steps.size and np.any(np.abs(self.steps).sum(axis=1) != 1):
            raise ValueError("steps must be unit moves")

    @property
    def n_jumps(self) -> int:
        return int(self.jump_times.size)

    def sites(self) -> np.ndarray:
        """Visited sites ``gamma_0 .. gamma_n``."""
        path = np.zeros((self.n_jumps + 1, self.start_site.size), dtype=np.int64)
        path[0] = self.start_site
        if self.n_jumps:
            path[1:] = self.start_site + np.cumsum(self.steps, axis=0)
        return path

    def position(self, tau: float) -> np.ndarray:
        k = int(np.searchsorted(self.jump_times, tau, side="left"))
        return self.start_site + self.steps[:k].sum(axis=0)

    @property
    def end_site(self) -> np.ndarray:
        return self.sites()[-1]


def sample_walk(x, s: float, t: float, rng: np.random.Generator) -> Skeleton:
    """Free rate-1 walk from ``(x, s)`` observed on ``[s, t]``."""
    x = np.asarray(x, dtype=np.int64)
    if t < s:
        raise ValueError("need s <= t")
    n = rng.poisson(t - s) if t > s else 0
    times = np.sort(rng.uniform(s, t, size=n))
    moves = unit_moves(x.size)[rng.integers(0, 2 * x.size, size=n)]
    return Skeleton(x, s, t, times, moves)


def bridge_count_weights(kernel: TransitionKernel, dz, dt: float, tail_eps: float = 1e-12) -> np.ndarray:
    """Normalized law of the jump count of a bridge with displacement ``dz`` over ``dt``."""
    n_hi = poisson_cutoff(dt, tail_eps)
    if n_hi > kernel.n_max:
        raise KernelError(f"bridge over {dt} needs n_max >= {n_hi}")
    w = poisson_weights(dt, n_hi) * q_column(kernel, dz, n_hi)
    total = w.sum()
    if not total > 0:
        raise KernelError(f"endpoint {np.asarray(dz).tolist()} unreachable at this truncation")
    return w / total


def sample_bridge(kernel: TransitionKernel, x, s: float, y, t: float, rng: np.random.Generator,
                  tail_eps: float = 1e-12) -> Skeleton:
    """Exact draw from the walk started at ``(x, s)`` conditioned on ``eta_t = y``."""
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if not s < t:
        raise ValueError("need s < t")
    w = bridge_count_weights(kernel, y - x, t - s, tail_eps)
    n = int(rng.choice(w.size, p=w))
    moves = unit_moves(kernel.d)
    rel = y - x
    steps = np.empty((n, kernel.d), dtype=np.int64)
    for k in range(n - 1, -1, -1):
        cand = rel - moves          # gamma_k candidates given gamma_{k+1} = rel
        p = np.array([q_lookup(k, c, *kernel.table) for c in cand])
        if np.isnan(p).any():
            raise KernelError("bridge left the stored kernel box")
        j = int(rng.choice(p.size, p=p / p.sum()))
        steps[k] = moves[j]
        rel = cand[j]
    times = np.sort(rng.uniform(s, t, size=n))
    return Skeleton(x, s, t, times, steps)


# ------------------------------------------------------------ shared use ---

CACHE_ENV = "POLYMERLAB_CACHE"
_SHARED: dict = {}


def shared_kernel(d: int, n_min: int, cache_dir: str | Path | None = None) -> TransitionKernel:
    """Process-wide kernel with ``n_max >= n_min`` (grown by doubling, optionally cached on disk)."""
    k = _SHARED.get(d)
    if k is not None and k.n_max >= n_min:
        return k
    n = max(int(n_min), 64, 2 * k.n_max if k is not None else 0)
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    stem = Path(cache_dir) / f"kernel_d{d}_n{n}" if cache_dir else None
    k = load_or_build(d, n, cache=stem)
    _SHARED[d] = k
    return k


def set_shared_kernel(kernel: TransitionKernel) -> None:
    _SHARED[kernel.d] = kernel
