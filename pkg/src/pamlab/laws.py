"""Limiting distributions: the density of the rescaled concentration site, the
law of the rescaled maximum of Psi and the joint law of its top two values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import DomainError


def beta_fn(a: float, b: float) -> float:
    """Euler Beta function via log-Gamma."""
    if a <= 0 or b <= 0:
        raise DomainError(f"Beta function needs positive arguments, got ({a}, {b})")
    return math.exp(math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))


def q_exponent(d: int, alpha: float) -> float:
    return d / (alpha - d)


def mu_constant(d: int, alpha: float) -> float:
    """mu = (alpha-d)^d 2^d B(alpha-d, d) / (d^d (d-1)!)."""
    return (alpha - d) ** d * 2 ** d * beta_fn(alpha - d, d) / (d ** d * math.factorial(d - 1))


def sphere_measure(r, d: int):
    """Surface measure of the l1 sphere of radius r in R^d."""
    return 2 ** d * np.asarray(r, dtype=float) ** (d - 1) / math.factorial(d - 1)


@dataclass(frozen=True)
class LawsContext:
    d: int
    alpha: float
    q: float
    mu: float
    tol: float = 1e-10

    @classmethod
    def make(cls, d: int, alpha: float, tol: float = 1e-10) -> "LawsContext":
        if d < 1:
            raise DomainError(f"dimension must be >= 1, got {d}")
        if alpha <= d:
            raise DomainError(f"need alpha > d, got alpha={alpha}, d={d}")
        return cls(d, float(alpha), q_exponent(d, alpha), mu_constant(d, alpha), tol)

    @property
    def gamma(self) -> float:
        """alpha - d, the exponent of the Frechet-type law of Y."""
        return self.alpha - self.d


def shell_integral(y: float, ctx: LawsContext) -> float:
    """Closed form of the integral of (y + q|x|)^-(alpha+1) over R^d."""
    if y <= 0:
        raise DomainError(f"shell_integral needs y > 0, got {y}")
    d, a = ctx.d, ctx.alpha
    return 2 ** d * ctx.q ** (-d) / math.factorial(d - 1) * beta_fn(a + 1 - d, d) * y ** (d - a - 1)


def _split_integral(f_of_y, ctx: LawsContext) -> float:
    """Integrate exp(-mu y^(d-alpha)) f(y) over (0, inf).

    On (0, 1) the substitution u = y^(d-alpha) turns the flat-to-all-orders
    factor into exp(-mu u) on (1, inf); on (1, inf) the substitution y = 1/s
    gives a smooth integrand on (0, 1).
    """
    g, mu = ctx.gamma, ctx.mu

    def lower(u):
        y = u ** (-1.0 / g)
        return math.exp(-mu * u) * f_of_y(y) * y / (g * u)

    def upper(s):
        if s == 0.0:
            return 0.0
        y = 1.0 / s
        return math.exp(-mu * s ** g) * f_of_y(y) * y * y

    opts = dict(epsabs=0.0, epsrel=ctx.tol, limit=200)
    lo, _ = integrate.quad(lower, 1.0, np.inf, **opts)
    hi, _ = integrate.quad(upper, 0.0, 1.0, **opts)
    return lo + hi


def density_p(x, ctx: LawsContext) -> float:
    """Limit density of Z_t / r_t at the point ``x`` (a scalar is read as |x|)."""
    r = float(np.abs(np.atleast_1d(np.asarray(x, dtype=float))).sum())
    a, qr = ctx.alpha, ctx.q * r
    return a * _split_integral(lambda y: (y + qr) ** (-(a + 1)), ctx)


def density_p_radial(r: float, ctx: LawsContext) -> float:
    """Radial density of |X|: sphere measure times p."""
    return float(sphere_measure(r, ctx.d)) * density_p(r, ctx)


def normalization(ctx: LawsContext) -> tuple[float, float]:
    """Numerical integral of p over R^d, by nested quadrature in (radius, y).

    Returns ``(value, error_estimate)``.
    """
    opts = dict(epsabs=0.0, epsrel=1e-10, limit=400)
    # split the radius at the scale where the density turns into its power tail
    head, e1 = integrate.quad(lambda r: density_p_radial(r, ctx), 0.0, 1.0, **opts)
    tail, e2 = integrate.quad(lambda r: density_p_radial(r, ctx), 1.0, np.inf, **opts)
    return head + tail, e1 + e2


def radial_cdf_X(s: float, ctx: LawsContext) -> float:
    """P(|X| <= s).

    The radial integral is done in closed form with the regularized incomplete
    Beta function, leaving a single quadrature in y.
    """
    if s < 0:
        raise DomainError(f"radius must be nonnegative, got {s}")
    if s == 0:
        return 0.0
    if math.isinf(s):
        return 1.0
    d, a, q = ctx.d, ctx.alpha, ctx.q
    pref = a * 2 ** d * beta_fn(d, a + 1 - d) / (math.factorial(d - 1) * q ** d)
    qs = q * s

    def f(y):
        return y ** (d - a - 1) * special.betainc(d, a + 1 - d, qs / (y + qs))

    return min(1.0, pref * _split_integral(f, ctx))


def radial_cdf_X_many(s, ctx: LawsContext) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return np.array([radial_cdf_X(float(v), ctx) for v in s.ravel()]).reshape(s.shape)


def cdf_Y(y, ctx: LawsContext):
    """P(Y <= y) = exp(-mu y^(d-alpha)); zero for y <= 0."""
    arr = np.asarray(y, dtype=float)
    out = np.zeros_like(arr)
    pos = arr > 0
    out[pos] = np.exp(-ctx.mu * arr[pos] ** (ctx.d - ctx.alpha))
    return float(out) if out.ndim == 0 else out


def quantile_Y(p, ctx: LawsContext):
    """Inverse of :func:`cdf_Y` on (0, 1)."""
    p = np.asarray(p, dtype=float)
    out = (-np.log(p) / ctx.mu) ** (1.0 / (ctx.d - ctx.alpha))
    return float(out) if out.ndim == 0 else out


def joint_cdf_Y1Y2(y1, y2, ctx: LawsContext):
    """Joint CDF of the limiting top-two values of Psi (rescaled by a_t)."""
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    if np.any(y1 <= 0) or np.any(y2 <= 0):
        raise DomainError("joint_cdf_Y1Y2 needs positive arguments")
    e = ctx.d - ctx.alpha
    p1 = y1 ** e
    p2 = y2 ** e
    lower = np.exp(-ctx.mu * p2) * (1.0 + ctx.mu * (p2 - p1))
    out = np.where(y2 <= y1, lower, np.exp(-ctx.mu * p1))
    return float(out) if out.ndim == 0 else out
