"""Compiled path samplers and action accumulators.

Path randomness is counter based: draw ``i`` of path ``p`` in environment
``e`` is a function of ``(path key, e, p, i)`` only.  Actions are returned
without the inverse temperature, so one set of paths serves every beta and
every horizon (common random numbers).
"""

import math

import numpy as np
from numba import njit

from ._rng import combine, uniform
from .environment import site_key, w_view
from .walk_kernel import q_lookup


@njit(cache=True)
def path_key(pkey, env, p):
    return combine(combine(pkey, env), p)


@njit(cache=True)
def _move(site, u, d):
    k = min(int(u * 2 * d), 2 * d - 1)
    if k % 2 == 0:
        site[k // 2] += 1
    else:
        site[k // 2] -= 1


@njit(cache=True)
def forward_actions(fkey, offset, direction, x, s, horizons, pkey, env, n_paths, out):
    """Actions of free rate-1 walks from ``(x, s)`` up to each horizon.

    ``horizons`` is ascending with every entry ``>= s``; ``out`` has shape
    ``(n_paths, len(horizons))``.
    """
    d = x.shape[0]
    n_h = horizons.shape[0]
    site = np.empty(d, dtype=np.int64)
    for p in range(n_paths):
        k = path_key(pkey, env, p)
        for i in range(d):
            site[i] = x[i]
        tau = s
        acc = 0.0
        h = 0
        c = 0
        while h < n_h:
            nxt = tau - math.log(uniform(combine(k, c)))
            c += 1
            sk = site_key(fkey, site)
            w0 = w_view(sk, tau, offset, direction)
            while h < n_h and horizons[h] <= nxt:
                out[p, h] = acc + w_view(sk, horizons[h], offset, direction) - w0
                h += 1
            if h == n_h:
                break
            acc += w_view(sk, nxt, offset, direction) - w0
            _move(site, uniform(combine(k, c)), d)
            c += 1
            tau = nxt


@njit(cache=True)
def forward_endpoints(x, s, t, pkey, env, n_paths, out):
    """End sites of the walks used by :func:`forward_actions` (same draws)."""
    d = x.shape[0]
    site = np.empty(d, dtype=np.int64)
    for p in range(n_paths):
        k = path_key(pkey, env, p)
        for i in range(d):
            site[i] = x[i]
        tau = s
        c = 0
        while True:
            tau = tau - math.log(uniform(combine(k, c)))
            c += 1
            if tau >= t:
                break
            _move(site, uniform(combine(k, c)), d)
            c += 1
        for i in range(d):
            out[p, i] = site[i]


@njit(cache=True)
def _bridge_skeleton(k, x, rel_end, n, s, t, base, k0, o0, k1, o1, vals, offs, rowlen, srad,
                     sites, times):
    """Fill ``sites`` (n+1 rows) and ``times`` (n+2 entries) for one bridge draw."""
    d = x.shape[0]
    rel = rel_end.copy()
    cand = np.empty(d, dtype=np.int64)
    w = np.empty(2 * d)
    c = 1
    for i in range(d):
        sites[n, i] = x[i] + rel[i]
    for step in range(n - 1, -1, -1):
        tot = 0.0
        for j in range(2 * d):
            for i in range(d):
                cand[i] = rel[i]
            if j % 2 == 0:
                cand[j // 2] -= 1
            else:
                cand[j // 2] += 1
            v = q_lookup(step, cand, base, k0, o0, k1, o1, vals, offs, rowlen, srad)
            if np.isnan(v):
                return False
            w[j] = v
            tot += v
        u = uniform(combine(k, c)) * tot
        c += 1
        j = 0
        run = w[0]
        while run < u and j < 2 * d - 1:
            j += 1
            run += w[j]
        while w[j] == 0.0:
            j -= 1
        if j % 2 == 0:
            rel[j // 2] -= 1
        else:
            rel[j // 2] += 1
        for i in range(d):
            sites[step, i] = x[i] + rel[i]
    # uniform order statistics from normalized exponential spacings
    total = 0.0
    for i in range(n + 1):
        e = -math.log(uniform(combine(k, c)))
        c += 1
        total += e
        times[i + 1] = total
    times[0] = s
    for i in range(1, n + 1):
        times[i] = s + (t - s) * (times[i] / total)
    times[n + 1] = t
    return True


@njit(cache=True)
def bridge_actions(fkey, offset, direction, x, s, y, t, cdf, pkey, env, n_paths,
                   base, k0, o0, k1, o1, vals, offs, rowlen, srad, out, counts):
    """Actions of exact bridges from ``(x, s)`` to ``(y, t)``.

    ``cdf`` is the cumulative law of the jump count.  Returns False if a
    bridge would need kernel entries outside the stored box.
    """
    d = x.shape[0]
    rel_end = y - x
    n_hi = cdf.shape[0] - 1
    sites = np.empty((n_hi + 1, d), dtype=np.int64)
    times = np.empty(n_hi + 2)
    for p in range(n_paths):
        k = path_key(pkey, env, p)
        u = uniform(combine(k, 0))
        n = 0
        while n < n_hi and cdf[n] < u:
            n += 1
        ok = _bridge_skeleton(k, x, rel_end, n, s, t, base, k0, o0, k1, o1, vals, offs,
                              rowlen, srad, sites, times)
        if not ok:
            return False
        acc = 0.0
        for j in range(n + 1):
            sk = site_key(fkey, sites[j])
            acc += w_view(sk, times[j + 1], offset, direction) - w_view(sk, times[j], offset, direction)
        out[p] = acc
        counts[p] = n
    return True


@njit(cache=True)
def bridge_draw(x, s, y, t, cdf, pkey, env, p, base, k0, o0, k1, o1, vals, offs, rowlen, srad):
    """One bridge skeleton (sites and the n+2 segment boundaries)."""
    d = x.shape[0]
    k = path_key(pkey, env, p)
    u = uniform(combine(k, 0))
    n_hi = cdf.shape[0] - 1
    n = 0
    while n < n_hi and cdf[n] < u:
        n += 1
    sites = np.empty((n + 1, d), dtype=np.int64)
    times = np.empty(n + 2)
    ok = _bridge_skeleton(k, x, y - x, n, s, t, base, k0, o0, k1, o1, vals, offs, rowlen, srad,
                          sites, times)
    return ok, sites, times


@njit(cache=True)
def pair_collision_times(d, t, pkey, n_pairs, out):
    """Time two independent rate-1 walks from the origin spend together on ``[0, t]``."""
    a = np.zeros(d, dtype=np.int64)
    b = np.zeros(d, dtype=np.int64)
    for p in range(n_pairs):
        k = combine(pkey, p)
        for i in range(d):
            a[i] = 0
            b[i] = 0
        ca = 0
        cb = 1
        ta = -math.log(uniform(combine(k, ca)))
        tb = -math.log(uniform(combine(k, cb)))
        ca += 2
        cb += 2
        tau = 0.0
        local = 0.0
        same = True
        while tau < t:
            nxt = min(ta, tb, t)
            if same:
                local += nxt - tau
            tau = nxt
            if tau >= t:
                break
            if ta <= tb:
                _move(a, uniform(combine(k, ca)), d)
                ca += 2
                ta = tau - math.log(uniform(combine(k, ca)))
                ca += 2
            else:
                _move(b, uniform(combine(k, cb)), d)
                cb += 2
                tb = tau - math.log(uniform(combine(k, cb)))
                cb += 2
            same = True
            for i in range(d):
                if a[i] != b[i]:
                    same = False
                    break
        out[p] = local


@njit(cache=True)
def discrete_pair_coincidences(d, n_steps, pkey, n_pairs, out):
    """Per pair, number of ``1 <= n <= n_steps`` with ``S_n = S'_n`` for two simple walks."""
    a = np.zeros(d, dtype=np.int64)
    for p in range(n_pairs):
        k = combine(pkey, p)
        for i in range(d):
            a[i] = 0
        cnt = 0
        for n in range(n_steps):
            # the difference of two independent steps
            _move(a, uniform(combine(k, 2 * n)), d)
            _move(a, uniform(combine(k, 2 * n + 1)), d)
            z = True
            for i in range(d):
                if a[i] != 0:
                    z = False
                    break
            if z:
                cnt += 1
        out[p] = cnt
