"""Lattice geometry in the l1 norm and the i.i.d. Pareto potential.

Sites are integer tuples ``(z_1, ..., z_d)``; bulk operations use ``(n, d)``
int64 arrays.  The potential is realised by a counter-based hash of
``(seed, z)``, so a site's value never depends on which box asked for it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import CoordinateRangeError, DomainError, InsufficientSitesError

MAX_DIM = 3
COORD_BITS = 21
COORD_LIMIT = 1 << (COORD_BITS - 1)  # |z_i| < 2**20

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_M53 = 2.0 ** -53


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finaliser on a uint64 array (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        x = x ^ (x >> np.uint64(30))
        x = x * _M1
        x = x ^ (x >> np.uint64(27))
        x = x * _M2
        x = x ^ (x >> np.uint64(31))
    return x


def l1_norm(coords) -> np.ndarray | int:
    arr = np.asarray(coords)
    if arr.ndim == 1:
        return int(np.abs(arr).sum())
    return np.abs(arr).sum(axis=1)


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Pack ``(n, d)`` coordinates into uint64 keys, first coordinate most significant.

    Sorting the keys therefore sorts the sites lexicographically.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
    d = coords.shape[1]
    if d < 1 or d > MAX_DIM:
        raise DomainError(f"dimension must be in 1..{MAX_DIM}, got {d}")
    if coords.size and np.abs(coords).max() >= COORD_LIMIT:
        raise CoordinateRangeError(
            f"coordinate magnitude {int(np.abs(coords).max())} exceeds hash range {COORD_LIMIT - 1}"
        )
    fields = (coords + COORD_LIMIT).astype(np.uint64)
    key = np.zeros(coords.shape[0], dtype=np.uint64)
    for i in range(d):
        key = (key << np.uint64(COORD_BITS)) | fields[:, i]
    return key


def pareto_quantile(u, alpha: float):
    """Inverse of ``F(x) = 1 - x**-alpha`` on ``[0, 1)``."""
    if alpha <= 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    arr = np.asarray(u, dtype=float)
    if np.any(arr < 0) or np.any(arr >= 1) or np.any(np.isnan(arr)):
        raise DomainError("pareto_quantile needs 0 <= u < 1")
    out = (1.0 - arr) ** (-1.0 / alpha)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PotentialField:
    """The random environment: i.i.d. Pareto(alpha) values on Z^d.

    ``seed`` fully determines the field; it is reduced modulo 2**64.
    """

    seed: int
    alpha: float
    d: int = 1
    _key: np.ndarray = dc_field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 1 <= self.d <= MAX_DIM:
            raise DomainError(f"dimension must be in 1..{MAX_DIM}, got {self.d}")
        if self.alpha <= self.d:
            raise DomainError(f"need alpha > d, got alpha={self.alpha}, d={self.d}")
        seed = np.array([self.seed % (1 << 64)], dtype=np.uint64)
        with np.errstate(over="ignore"):
            key = _mix64(seed + _GOLDEN * np.uint64(self.d))
        object.__setattr__(self, "_key", key)

    def uniforms(self, coords: np.ndarray) -> np.ndarray:
        packed = pack_coords(coords)
        with np.errstate(over="ignore"):
            h = _mix64(self._key ^ packed)
            h = _mix64(h + self._key)
        return (h >> np.uint64(11)).astype(np.float64) * _TWO_M53

    def values(self, coords) -> np.ndarray:
        """Potential values at an ``(n, d)`` array of sites."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.d)
        return (1.0 - self.uniforms(coords)) ** (-1.0 / self.alpha)


def site_value(field: PotentialField, z: Sequence[int]) -> float:
    z = tuple(int(c) for c in z)
    if len(z) != field.d:
        raise DomainError(f"site {z} has dimension {len(z)}, field has d={field.d}")
    return float(field.values(np.array([z]))[0])


# ----------------------------------------------------------------------------
# Counting and enumeration


def ball_count(d: int, r: int) -> int:
    """Exact |B_r| for the l1 ball; 0 for negative r."""
    if r < 0:
        return 0
    return sum((1 << k) * math.comb(d, k) * math.comb(r, k) for k in range(d + 1))


def sphere_count(d: int, r: int) -> int:
    """Number of sites with |z| = r (this is the inner boundary of B_r)."""
    if r < 0:
        return 0
    if r == 0:
        return 1
    return sum((1 << k) * math.comb(d, k) * math.comb(r - 1, k - 1) for k in range(1, d + 1))


def shell_counts(d: int, r: int) -> tuple[int, int]:
    """``(|inner boundary of B_r|, |B_r|)``."""
    if r < 0:
        raise DomainError(f"radius must be nonnegative, got {r}")
    return sphere_count(d, r), ball_count(d, r)


def sphere_count_bound_constant(d: int) -> float:
    """K with sphere_count(d, r) <= K * r**(d-1) for every r >= 1."""
    return float(sum((1 << k) * math.comb(d, k) / math.factorial(k - 1) for k in range(1, d + 1)))


def ball_sites(d: int, R: int, r_min: int = 0) -> np.ndarray:
    """All sites with ``r_min <= |z| <= R`` as an ``(n, d)`` array in lexicographic order."""
    if R < 0 or R < r_min:
        return np.zeros((0, d), dtype=np.int64)
    r_min = max(r_min, 0)
    if d == 1:
        if r_min == 0:
            return np.arange(-R, R + 1, dtype=np.int64)[:, None]
        neg = np.arange(-R, -r_min + 1, dtype=np.int64)
        pos = np.arange(r_min, R + 1, dtype=np.int64)
        return np.concatenate([neg, pos])[:, None]
    parts = []
    for x0 in range(-R, R + 1):
        a = abs(x0)
        sub = ball_sites(d - 1, R - a, r_min - a)
        if len(sub):
            head = np.full((len(sub), 1), x0, dtype=np.int64)
            parts.append(np.hstack([head, sub]))
    if not parts:
        return np.zeros((0, d), dtype=np.int64)
    return np.vstack(parts)


def iter_annuli(d: int, r_lo: int, r_hi: int, max_sites: int = 2_000_000) -> Iterator[np.ndarray]:
    """Yield site arrays covering ``r_lo <= |z| <= r_hi`` in chunks of whole shells."""
    r = max(r_lo, 0)
    while r <= r_hi:
        hi = r
        total = sphere_count(d, r)
        while hi < r_hi and total + sphere_count(d, hi + 1) <= max_sites:
            hi += 1
            total += sphere_count(d, hi)
        yield ball_sites(d, hi, r)
        r = hi + 1


def unrank_sphere(d: int, r: int, j: int) -> tuple[int, ...]:
    """The ``j``-th site (0-based) of the sphere |z| = r, a bijection onto the sphere."""
    if r == 0:
        return (0,) * d
    if d == 1:
        return (-r,) if j == 0 else (r,)

    def cum(x):  # number of sphere sites whose first coordinate is <= x
        if x < -r:
            return 0
        if x <= 0:
            return ball_count(d - 1, r + x)
        return ball_count(d - 1, r) + ball_count(d - 1, r - 1) - ball_count(d - 1, r - x - 1)

    lo, hi = -r, r
    while lo < hi:
        mid = (lo + hi) // 2
        if cum(mid) > j:
            hi = mid
        else:
            lo = mid + 1
    x = lo
    return (x,) + unrank_sphere(d - 1, r - abs(x), j - cum(x - 1))


def unrank_ball(d: int, g: int) -> tuple[int, ...]:
    """The ``g``-th site of the ball ordering (shell by shell, outward)."""
    lo, hi = 0, 1
    while ball_count(d, hi) <= g:
        hi *= 2
    while lo < hi:
        mid = (lo + hi) // 2
        if ball_count(d, mid) > g:
            hi = mid
        else:
            lo = mid + 1
    r = lo
    return unrank_sphere(d, r, g - ball_count(d, r - 1))


def unrank_ball_many(d: int, g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.int64)
    if d == 1:
        r = (g + 1) // 2
        j = g - (2 * r - 1)
        return np.where(j == 0, -r, r).astype(np.int64)[:, None]
    out = np.array([unrank_ball(d, int(x)) for x in g], dtype=np.int64)
    return out.reshape(-1, d)


# ----------------------------------------------------------------------------
# Order statistics


@dataclass(frozen=True)
class OrderStats:
    max1: float
    argmax1: tuple[int, ...]
    max2: float
    argmax2: tuple[int, ...]
    radius: int
    taboo: frozenset = frozenset()


def _lex_less(a: Sequence[int], b: Sequence[int]) -> bool:
    return tuple(a) < tuple(b)


class TopTwo:
    """Running top-two of (value, site) pairs; ties go to the lexicographically smaller site."""

    def __init__(self):
        self.items: list[tuple[float, tuple[int, ...]]] = []

    def _better(self, a, b) -> bool:
        return a[0] > b[0] or (a[0] == b[0] and _lex_less(a[1], b[1]))

    def offer(self, value: float, site: tuple[int, ...]) -> None:
        cand = (float(value), tuple(int(c) for c in site))
        items = self.items + [cand]
        items.sort(key=lambda it: (-it[0], it[1]))
        self.items = items[:2]

    def offer_many(self, values: np.ndarray, coords: np.ndarray) -> None:
        if len(values) == 0:
            return
        k = min(2, len(values))
        # candidates: top-k values, then every site sharing the k-th value (ties)
        part = np.argpartition(-values, k - 1)[:k] if len(values) > k else np.arange(len(values))
        cutoff = values[part].min()
        idx = np.flatnonzero(values >= cutoff)
        for i in idx:
            self.offer(values[i], coords[i])

    @property
    def second_value(self) -> float:
        return self.items[1][0] if len(self.items) == 2 else -math.inf


def box_order_stats(field: PotentialField, R: int, taboo: Iterable = ()) -> OrderStats:
    """Exact top two of the potential over ``B_R`` minus ``taboo``, by full enumeration."""
    if R < 0:
        raise DomainError(f"radius must be nonnegative, got {R}")
    taboo_set = frozenset(tuple(int(c) for c in z) for z in taboo)
    taboo_keys = pack_coords(np.array(sorted(taboo_set), dtype=np.int64).reshape(-1, field.d)) if taboo_set else None
    top = TopTwo()
    n_sites = 0
    for coords in iter_annuli(field.d, 0, R):
        if taboo_keys is not None:
            coords = coords[~np.isin(pack_coords(coords), taboo_keys)]
        n_sites += len(coords)
        top.offer_many(field.values(coords), coords)
    if n_sites < 2:
        raise InsufficientSitesError(f"B_{R} minus taboo has {n_sites} site(s); need at least 2")
    (v1, z1), (v2, z2) = top.items
    return OrderStats(v1, z1, v2, z2, R, taboo_set)


# ----------------------------------------------------------------------------
# Exceedance sampling


def _sample_distinct(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    """``k`` distinct integers uniformly from ``range(n)``."""
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    if k >= n:
        return np.arange(n, dtype=np.int64)
    if n <= 10_000_000 or 4 * k > n:
        return rng.choice(n, size=k, replace=False).astype(np.int64)
    chosen: dict[int, None] = {}
    while len(chosen) < k:
        for x in rng.integers(0, n, size=k - len(chosen)):
            chosen.setdefault(int(x), None)
    return np.fromiter(chosen.keys(), dtype=np.int64, count=k)


def exceedance_annulus(
    rng: np.random.Generator, d: int, alpha: float, r_lo: int, r_hi: int, m: float
) -> tuple[np.ndarray, np.ndarray]:
    """Sites in ``r_lo <= |z| <= r_hi`` whose potential exceeds ``m``, with their values.

    Exact thinning: the count is Binomial(#sites, m**-alpha), positions are a
    uniform subset and values are Pareto conditioned on exceeding ``m``.
    """
    if m < 1:
        raise DomainError(f"threshold must be >= 1, got {m}")
    lo_idx = ball_count(d, r_lo - 1)
    n = ball_count(d, r_hi) - lo_idx
    if n <= 0:
        return np.zeros((0, d), dtype=np.int64), np.zeros(0)
    p = m ** (-alpha)
    k = int(rng.binomial(n, p)) if p < 1.0 else n
    idx = _sample_distinct(rng, n, k)
    coords = unrank_ball_many(d, idx + lo_idx)
    values = m * (1.0 - rng.random(k)) ** (-1.0 / alpha)
    order = np.lexsort(coords.T[::-1]) if k else np.zeros(0, dtype=np.int64)
    return coords[order], values[order]


def exceedance_sample(rng: np.random.Generator, d: int, alpha: float, r: int, m: float):
    """Sites on the shell |z| = r with potential above ``m``: list of ``(site, value)``.

    Uses its own randomness and is not consistent with :func:`site_value`.
    """
    if r < 0:
        raise DomainError(f"radius must be nonnegative, got {r}")
    coords, values = exceedance_annulus(rng, d, alpha, r, r, m)
    return [(tuple(int(c) for c in z), float(v)) for z, v in zip(coords, values)]


class PlantedField:
    """A field with some site values overridden; used for planted-maximum tests."""

    def __init__(self, base, planted: dict):
        self.base = base
        self.d = base.d
        self.alpha = base.alpha
        self.seed = getattr(base, "seed", None)
        self.planted = {tuple(int(c) for c in z): float(v) for z, v in planted.items()}
        sites = sorted(self.planted)
        self._keys = pack_coords(np.array(sites, dtype=np.int64).reshape(-1, self.d))
        self._vals = np.array([self.planted[z] for z in sites])

    def values(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.d)
        out = self.base.values(coords)
        if len(self._keys):
            keys = pack_coords(coords)
            pos = np.searchsorted(self._keys, keys)
            pos = np.minimum(pos, len(self._keys) - 1)
            hit = self._keys[pos] == keys
            out[hit] = self._vals[pos[hit]]
        return out


class ConstantField:
    """xi identically equal to ``c`` (not a Pareto sample; for oracle checks)."""

    def __init__(self, c: float, d: int = 1, alpha: float = 2.0):
        self.c, self.d, self.alpha, self.seed = float(c), d, alpha, None

    def values(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.d)
        pack_coords(coords)  # same range check as the hashed field
        return np.full(len(coords), self.c)
