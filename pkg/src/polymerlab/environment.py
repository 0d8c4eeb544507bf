"""Reproducible two-sided Wiener field indexed by lattice sites.

``W^x(t)`` is built by a Levy (dyadic bisection) construction whose Gaussian
draws are keyed by ``(seed, site, dyadic node)``:

* anchors ``W(2**k)`` for ``k >= 0`` form a chain of independent increments,
* every dyadic midpoint is drawn from the Brownian bridge between its two
  parents,
* below cells of width ``2**-FINE_LEVEL`` the remaining bridge fluctuation is
  keyed by the query time itself.

Negative times use an independent stream, which gives a two-sided process with
``W(0) = 0``.  Nothing is stored: a value is a pure function of the seed, the
site and the time, so any query order, any process split and any refinement
give the same numbers bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from ._rng import combine, normal, seed_key

FINE_LEVEL = 20
_FINE_LEN = 2.0 ** -FINE_LEVEL
_TWO52 = 2.0 ** 52
_TAG_CHAIN = 1
_TAG_NODE = 2
_TAG_RESID = 3
_MAXDEPTH = 128


@njit(cache=True)
def site_key(fkey, coords):
    h = fkey
    for c in coords:
        h = combine(h, c)
    return h


@njit(cache=True)
def site_key3(fkey, coords, i):
    """Key of row ``i`` of a 2-d coordinate array (no slicing in hot loops)."""
    h = fkey
    for k in range(coords.shape[1]):
        h = combine(h, coords[i, k])
    return h


@njit(cache=True)
def _top(skey, stream, u):
    """Top-level interval containing ``u > 0``.

    Returns ``(a, b, wa, wb, e, exact)``: interval ``(a, b]`` of length
    ``2**e`` with endpoint values; ``exact`` flags that ``u`` is a chain
    anchor, in which case its value is ``wb``.
    """
    base = combine(skey, stream * 8 + _TAG_CHAIN)
    m, ex = math.frexp(u)
    if ex <= 0 or (ex == 1 and m == 0.5):
        # 0 < u <= 1
        w1 = normal(combine(base, 0))
        return 0.0, 1.0, 0.0, w1, 0, u == 1.0
    if m == 0.5:
        k = ex - 1
        w = normal(combine(base, 0))
        scale = 1.0
        for i in range(1, k + 1):
            w += math.sqrt(scale) * normal(combine(base, i))
            scale *= 2.0
        return u, u, w, w, 0, True
    k = ex - 1
    w = normal(combine(base, 0))
    scale = 1.0
    for i in range(1, k + 1):
        w += math.sqrt(scale) * normal(combine(base, i))
        scale *= 2.0
    wb = w + math.sqrt(scale) * normal(combine(base, k + 1))
    return math.ldexp(1.0, k), math.ldexp(1.0, k + 1), w, wb, k, False


@njit(cache=True)
def _midpoint(skey, stream, a, wa, wb, e):
    """Value at the midpoint of an interval of length ``2**e`` starting at ``a``."""
    half = math.ldexp(1.0, e - 1)
    m = a + half
    j = np.int64(math.ldexp(m, 1 - e))
    key = combine(combine(combine(skey, stream * 8 + _TAG_NODE), e - 1), j)
    return m, 0.5 * (wa + wb) + math.sqrt(0.5 * half) * normal(key)


@njit(cache=True)
def _residual(skey, stream, u, a, b, wa, wb):
    length = b - a
    jc = np.int64(math.ldexp(a, FINE_LEVEL))
    frac = (u - a) / length
    f = np.int64(frac * _TWO52)
    key = combine(combine(combine(skey, stream * 8 + _TAG_RESID), jc), f)
    sd = math.sqrt((u - a) * (b - u) / length)
    return wa + frac * (wb - wa) + sd * normal(key)


@njit(cache=True)
def w_half(skey, stream, u):
    """Value of one half-line stream at ``u >= 0``."""
    if u == 0.0:
        return 0.0
    a, b, wa, wb, e, exact = _top(skey, stream, u)
    if exact:
        return wb
    while True:
        if u == a:
            return wa
        if u == b:
            return wb
        if e <= -FINE_LEVEL:
            return _residual(skey, stream, u, a, b, wa, wb)
        m, wm = _midpoint(skey, stream, a, wa, wb, e)
        e -= 1
        if u == m:
            return wm
        if u < m:
            b = m
            wb = wm
        else:
            a = m
            wa = wm


@njit(cache=True)
def w_base(skey, tau):
    if tau > 0.0:
        return w_half(skey, 0, tau)
    if tau < 0.0:
        return w_half(skey, 1, -tau)
    return 0.0


@njit(cache=True)
def w_view(skey, tau, offset, direction):
    """Value of the shifted/reversed view ``dir * (W(dir*tau + off) - W(off))``."""
    if offset == 0.0:
        return direction * w_base(skey, direction * tau)
    return direction * (w_base(skey, direction * tau + offset) - w_base(skey, offset))


@njit(cache=True)
def w_half_sorted(skey, stream, us, out):
    """Values at ascending ``us > 0``; reuses the descent path between queries.

    Produces exactly the same numbers as :func:`w_half` called per point.
    """
    sa = np.empty(_MAXDEPTH)
    sb = np.empty(_MAXDEPTH)
    swa = np.empty(_MAXDEPTH)
    swb = np.empty(_MAXDEPTH)
    se = np.empty(_MAXDEPTH, dtype=np.int64)
    depth = -1
    top_b = -1.0
    for qi in range(us.shape[0]):
        u = us[qi]
        if u == 0.0:
            out[qi] = 0.0
            continue
        if depth < 0 or u > top_b or u <= sa[0]:
            a, b, wa, wb, e, exact = _top(skey, stream, u)
            if exact:
                out[qi] = wb
                depth = -1
                continue
            depth = 0
            sa[0] = a
            sb[0] = b
            swa[0] = wa
            swb[0] = wb
            se[0] = e
            top_b = b
        else:
            while depth > 0 and not (sa[depth] <= u and u <= sb[depth]):
                depth -= 1
        a = sa[depth]
        b = sb[depth]
        wa = swa[depth]
        wb = swb[depth]
        e = se[depth]
        while True:
            if u == a:
                out[qi] = wa
                break
            if u == b:
                out[qi] = wb
                break
            if e <= -FINE_LEVEL:
                out[qi] = _residual(skey, stream, u, a, b, wa, wb)
                break
            m, wm = _midpoint(skey, stream, a, wa, wb, e)
            e -= 1
            if u == m:
                out[qi] = wm
                break
            if u < m:
                b = m
                wb = wm
            else:
                a = m
                wa = wm
            depth += 1
            sa[depth] = a
            sb[depth] = b
            swa[depth] = wa
            swb[depth] = wb
            se[depth] = e


@njit(cache=True)
def _grid_fill(fkey, coords, pos_u, pos_idx, neg_u, neg_idx, base_at_offset_idx,
               direction, out):
    """W-view values for every site (rows of ``coords``) at a shared time set.

    ``pos_u``/``neg_u`` are the ascending absolute base times on each half
    line with their output column indices; ``base_at_offset_idx`` selects the
    column holding ``W(offset)`` (or -1 when the offset is zero).
    """
    n_sites = coords.shape[0]
    tmp_p = np.empty(pos_u.shape[0])
    tmp_n = np.empty(neg_u.shape[0])
    n_t = out.shape[1]
    n_raw = n_t + 1 if base_at_offset_idx >= 0 else n_t
    raw = np.empty(n_raw)
    for i in range(n_sites):
        sk = site_key3(fkey, coords, i)
        if pos_u.shape[0] > 0:
            w_half_sorted(sk, 0, pos_u, tmp_p)
        if neg_u.shape[0] > 0:
            w_half_sorted(sk, 1, neg_u, tmp_n)
        for k in range(n_raw):
            raw[k] = 0.0
        for k in range(pos_u.shape[0]):
            raw[pos_idx[k]] = tmp_p[k]
        for k in range(neg_u.shape[0]):
            raw[neg_idx[k]] = tmp_n[k]
        w0 = 0.0
        if base_at_offset_idx >= 0:
            w0 = raw[base_at_offset_idx]
        for k in range(n_t):
            out[i, k] = direction * (raw[k] - w0)


@njit(cache=True)
def _point_values(fkey, coords, taus, offset, direction, out):
    for i in range(coords.shape[0]):
        sk = site_key3(fkey, coords, i)
        out[i] = w_view(sk, taus[i], offset, direction)


@dataclass(frozen=True)
class BrownianField:
    """Lazily evaluated field ``omega(x, t)``; optionally a shifted or reversed view.

    The view maps the base field ``W`` to ``direction * (W(direction*t + offset)
    - W(offset))``.  ``offset=0, direction=1`` is the field itself.
    """

    seed: int
    d: int
    offset: float = 0.0
    direction: int = 1
    stream: int = -1

    @property
    def key(self):
        k = seed_key(self.seed)
        return np.uint64(k if self.stream < 0 else combine(np.uint64(k), self.stream))

    def values(self, x, times) -> np.ndarray:
        """``W^x`` at each time in ``times`` (site ``x`` fixed)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        coords = np.repeat(np.asarray(x, dtype=np.int64).reshape(1, self.d),
                           times.size, axis=0)
        return self.point_values(coords, times)

    def point_values(self, coords, times) -> np.ndarray:
        coords = np.ascontiguousarray(coords, dtype=np.int64).reshape(-1, self.d)
        times = np.ascontiguousarray(times, dtype=float).reshape(-1)
        out = np.empty(times.size)
        _point_values(self.key, coords, times, float(self.offset), int(self.direction), out)
        return out

    def grid_values(self, coords, times) -> np.ndarray:
        """Values for many sites at one shared, arbitrary set of times.

        Returns an array of shape ``(n_sites, n_times)``; identical to
        :meth:`point_values` element by element but much cheaper on dense
        grids because the dyadic descent is shared between neighbouring times.
        """
        coords = np.ascontiguousarray(coords, dtype=np.int64).reshape(-1, self.d)
        times = np.asarray(times, dtype=float).reshape(-1)
        base = self.direction * times + self.offset
        extra = self.offset != 0.0
        if extra:
            base = np.append(base, self.offset)
        n_t = base.size
        pos = np.flatnonzero(base > 0)
        neg = np.flatnonzero(base < 0)
        pos = pos[np.argsort(base[pos], kind="stable")]
        neg = neg[np.argsort(-base[neg], kind="stable")]
        out = np.empty((coords.shape[0], times.size))
        _grid_fill(self.key, coords, np.ascontiguousarray(base[pos]), pos.astype(np.int64),
                   np.ascontiguousarray(-base[neg]), neg.astype(np.int64),
                   n_t - 1 if extra else -1, int(self.direction), out)
        return out

    def increment(self, x, s: float, t: float) -> float:
        if s == t:
            return 0.0
        w = self.values(x, [s, t])
        return float(w[1] - w[0])

    def shifted(self, s: float) -> "BrownianField":
        return BrownianField(self.seed, self.d, self.offset + self.direction * s, self.direction,
                             self.stream)

    def reversed(self) -> "BrownianField":
        """Time-reversed field ``-W(-t)``, again a two-sided Wiener field."""
        return BrownianField(self.seed, self.d, self.offset, -self.direction, self.stream)

    def manifest(self) -> dict:
        return {
            "seed": int(self.seed),
            "d": int(self.d),
            "offset": float(self.offset),
            "direction": int(self.direction),
            "stream": int(self.stream),
            "anchor_spacing": 1.0,
            "fine_level": FINE_LEVEL,
        }


def new_field(seed: int, d: int) -> BrownianField:
    return BrownianField(int(seed), int(d))


def env_field(seed: int, d: int, index: int) -> BrownianField:
    """Environment number ``index`` of an ensemble drawn from ``seed``."""
    return BrownianField(int(seed), int(d), stream=int(index))


def increment(field: BrownianField, x, s: float, t: float) -> float:
    if s > t:
        raise ValueError("increment requires s <= t")
    return field.increment(x, s, t)


def h(field: BrownianField, beta: float, z, s: float, t: float) -> float:
    """Centered multiplicative noise block ``exp(b dW - b^2 (t-s)/2) - 1``."""
    if not s < t:
        raise ValueError("h requires s < t")
    dw = field.increment(z, s, t)
    return math.exp(beta * dw - 0.5 * beta * beta * (t - s)) - 1.0


def wiener_shift(field: BrownianField, s: float) -> BrownianField:
    return field.shifted(s)


def action(field: BrownianField, skeleton) -> float:
    """Sum of field increments along the sites visited by a skeleton."""
    sites = skeleton.sites()
    times = np.concatenate(([skeleton.start_time], skeleton.jump_times, [skeleton.end_time]))
    w_end = field.point_values(sites, times[1:])
    w_start = field.point_values(sites, times[:-1])
    return float(np.sum(w_end - w_start))
