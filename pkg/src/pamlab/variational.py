"""The functional Psi_t, certified top-two maximisers and the scaling functions."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .errors import CertificationError, CoordinateRangeError, DomainError
from .laws import beta_fn, mu_constant, q_exponent
from .lattice import (
    COORD_LIMIT,
    PotentialField,
    TopTwo,
    ball_count,
    exceedance_annulus,
    iter_annuli,
    site_value,
    sphere_count_bound_constant,
)

TAIL_CHUNK = 1024
TAIL_MAX_CHUNKS = 256
TAIL_STOP_RATIO = 1e-3


@dataclass(frozen=True)
class ScalingConstants:
    d: int
    alpha: float
    q: float
    mu: float
    t: float
    r_t: float
    a_t: float


def scaling(t: float, d: int, alpha: float) -> ScalingConstants:
    """q, mu and the scales r_t = (t/log t)^(q+1), a_t = (t/log t)^q."""
    if alpha <= d:
        raise DomainError(f"need alpha > d, got alpha={alpha}, d={d}")
    if t <= 1:
        raise DomainError(f"scaling needs t > 1, got {t}")
    q = q_exponent(d, alpha)
    base = t / math.log(t)
    return ScalingConstants(d, float(alpha), q, mu_constant(d, alpha), float(t), base ** (q + 1), base ** q)


def penalty(r, t: float, d: int):
    """(r/t) log(r/(2det)), with value 0 at r = 0."""
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(r > 0, (r / t) * np.log(r / (2 * d * math.e * t)), 0.0)
    return float(out) if out.ndim == 0 else out


def psi(field: PotentialField, z: Sequence[int], t: float) -> float:
    if t <= 0:
        raise DomainError(f"psi needs t > 0, got {t}")
    r = sum(abs(int(c)) for c in z)
    return site_value(field, z) - penalty(r, t, field.d)


def _sphere_counts_float(r: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros_like(r, dtype=float)
    for k in range(1, d + 1):
        out += 2 ** k * math.comb(d, k) * special.comb(r - 1, k - 1)
    return out


def tail_bound(m: float, R: int, t: float, d: int, alpha: float) -> float:
    """Union bound on P(some site with |z| > R has Psi_t > m).

    Explicit summation over shells until a summand drops below 1e-3 of the
    running total, then an integral majorant for the remainder.
    """
    if m < 1:
        raise DomainError(f"tail_bound needs m >= 1, got {m}")
    if R <= 2 * d * math.e * t:
        raise DomainError(f"radius too small to certify: need R > 2det = {2 * d * math.e * t:.6g}, got {R}")
    total = 0.0
    r0 = R + 1
    for _ in range(TAIL_MAX_CHUNKS):
        r = np.arange(r0, r0 + TAIL_CHUNK, dtype=float)
        terms = _sphere_counts_float(r, d) * (m + penalty(r, t, d)) ** (-alpha)
        total += terms.sum()
        r0 += TAIL_CHUNK
        if terms[-1] < TAIL_STOP_RATIO * total:
            break
    # for r >= r0: pen(r) >= c r and |dB_r| <= K r^(d-1); compare the sum with an integral from r0 - 1
    c = math.log(r0 / (2 * d * math.e * t)) / t
    K = sphere_count_bound_constant(d)
    s0 = r0 - 1
    rest = K * (1 + 1 / s0) ** (d - 1) * power_tail_integral(m, c, s0, d, alpha)
    return min(1.0, total + rest)


def power_tail_integral(m: float, c: float, s0: float, d: int, alpha: float) -> float:
    """Closed form of the integral of s^(d-1) (m + c s)^-alpha over (s0, inf)."""
    w = m / (m + c * s0)
    return c ** (-d) * m ** (d - alpha) * beta_fn(d, alpha - d) * special.betainc(alpha - d, d, w)


@dataclass(frozen=True)
class PsiArgmaxResult:
    Z1: tuple
    psi1: float
    Z2: tuple
    psi2: float
    searched_radius: int
    tail_probability: float
    t: float
    xi1: float
    xi2: float
    mode: str = "field"


def initial_radius(t: float, d: int, alpha: float) -> int:
    sc = scaling(t, d, alpha)
    return max(math.ceil(4 * sc.r_t), math.floor(2 * d * math.e * t) + 1)


def _required_radius(m: float, R: int, t: float, d: int, alpha: float, delta: float) -> int:
    """Smallest doubling of R that certifies delta; a lower bound once R passes 2^62."""
    while R < 2 ** 62 and tail_bound(m, R, t, d, alpha) > delta:
        R *= 2
    return R


def _check_args(t: float, delta: float) -> None:
    if not t > math.e:
        raise DomainError(f"argmax_top2 needs t > e, got {t}")
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")


def _result(top: TopTwo, xis: dict, R: int, tb: float, t: float, mode: str) -> PsiArgmaxResult:
    (p1, z1), (p2, z2) = top.items
    return PsiArgmaxResult(z1, p1, z2, p2, int(R), float(tb), float(t), xis[z1], xis[z2], mode)


def _offer(top: TopTwo, xis: dict, coords: np.ndarray, values: np.ndarray, t: float, d: int) -> None:
    if len(coords) == 0:
        return
    pv = values - penalty(np.abs(coords).sum(axis=1), t, d)
    before = {z for _, z in top.items}
    top.offer_many(pv, coords)
    for _, z in top.items:
        if z not in before:
            # recover xi for a newly admitted site
            i = np.flatnonzero((coords == np.array(z)).all(axis=1))[0]
            xis[z] = float(values[i])


def argmax_top2_field(field: PotentialField, t: float, delta: float, max_chunk: int = 2_000_000) -> PsiArgmaxResult:
    """Exact top two of Psi_t over a growing box, certified by :func:`tail_bound`."""
    _check_args(t, delta)
    d, alpha = field.d, field.alpha
    R = initial_radius(t, d, alpha)
    top, xis = TopTwo(), {}
    lo = 0
    while True:
        if R >= COORD_LIMIT:
            m = top.second_value if len(top.items) == 2 else 1.0
            need = _required_radius(max(m, 1.0), max(lo - 1, initial_radius(t, d, alpha)), t, d, alpha, delta)
            raise CertificationError(
                f"certification needs radius {need}, beyond the hash coordinate range {COORD_LIMIT - 1}",
                required_radius=need,
            )
        for coords in iter_annuli(d, lo, R, max_chunk):
            _offer(top, xis, coords, field.values(coords), t, d)
        tb = tail_bound(top.second_value, R, t, d, alpha)
        if tb <= delta:
            return _result(top, xis, R, tb, t, "field")
        lo, R = R + 1, 2 * R


def argmax_top2_exceedance(d: int, alpha: float, t: float, delta: float, rng: np.random.Generator) -> PsiArgmaxResult:
    """Top two of Psi_t for a fresh i.i.d. field, materializing only relevant sites.

    Radii are processed in blocks of geometrically growing width.  In a block
    only sites with xi above the current second-best Psi plus the smallest
    penalty in the block can enter the top two, so only those are sampled.
    """
    _check_args(t, delta)
    if alpha <= d:
        raise DomainError(f"need alpha > d, got alpha={alpha}, d={d}")
    two_det = 2 * d * math.e * t
    top, xis = TopTwo(), {}
    lo, hi = 0, 1
    while True:
        if len(top.items) < 2:
            m = 1.0
        else:
            # penalty is convex with minimum at r = 2dt
            r_star = min(max(2 * d * t, lo), hi)
            m = max(1.0, top.second_value + float(penalty(r_star, t, d)))
        if ball_count(d, hi) >= 1 << 62:
            raise CoordinateRangeError(f"site index range exceeded at radius {hi}")
        coords, values = exceedance_annulus(rng, d, alpha, lo, hi, m)
        _offer(top, xis, coords, values, t, d)
        if hi > two_det and len(top.items) == 2:
            tb = tail_bound(top.second_value, hi, t, d, alpha)
            if tb <= delta:
                return _result(top, xis, hi, tb, t, "exceedance")
        lo, hi = hi + 1, 2 * hi + 1


def argmax_top2(field: PotentialField | None, t: float, delta: float, mode: str = "field",
                rng: np.random.Generator | None = None, d: int | None = None,
                alpha: float | None = None) -> PsiArgmaxResult:
    """Certified top-two maximisers of Psi_t.

    ``mode="field"`` enumerates the seeded field; ``mode="exceedance"`` draws a
    fresh field from ``rng`` (``d`` and ``alpha`` default to the field's).
    """
    if mode == "field":
        if field is None:
            raise DomainError("field mode needs a PotentialField")
        return argmax_top2_field(field, t, delta)
    if mode == "exceedance":
        if rng is None:
            raise DomainError("exceedance mode needs a random generator")
        d = d if d is not None else field.d
        alpha = alpha if alpha is not None else field.alpha
        return argmax_top2_exceedance(d, alpha, t, delta, rng)
    raise DomainError(f"unknown argmax mode {mode!r}")


def neighbour_lower_bound(field: PotentialField, t: float) -> float:
    """min(Psi_t(0), Psi_t(e_1)): a lower bound for the second maximum of Psi_t."""
    e1 = (1,) + (0,) * (field.d - 1)
    origin = (0,) * field.d
    return min(site_value(field, origin), site_value(field, e1) + math.log(2 * field.d * math.e * t) / t)


@dataclass(frozen=True)
class RadiusPolicy:
    h_t: float
    R_t: float
    h_raw: float
    clamped: bool


def h_default(t: float) -> float:
    """(log log t)^2 / sqrt(log t), before clamping."""
    if not t > math.e:
        raise DomainError(f"h_t needs t > e so that log log t > 0, got {t}")
    ll = math.log(math.log(t))
    return ll * ll / math.sqrt(math.log(t))


def radius_policy(Z1: Sequence[int], t: float, clamp: bool = True) -> RadiusPolicy:
    """R_t = |Z1| (1 + h_t) with h_t clamped to at most 1."""
    raw = h_default(t)
    h = min(raw, 1.0) if clamp else raw
    r1 = sum(abs(int(c)) for c in Z1)
    return RadiusPolicy(h, r1 * (1 + h), raw, clamp and raw > 1.0)
