"""Independent reference computations used by the tests.

Each oracle takes a different route from the library code it checks:
plain loops instead of vectorized enumeration, eigendecomposition instead of
expm, direct multi-dimensional quadrature instead of closed forms.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import integrate, linalg


def brute_sites(d: int, R: int):
    """All sites with |z| <= R, by looping over the cube."""
    for z in itertools.product(range(-R, R + 1), repeat=d):
        if sum(abs(c) for c in z) <= R:
            yield z


def brute_psi_top2(field, t: float, R: int):
    """Top two of Psi_t over B_R by a plain loop; ties go to the lexicographically smaller site."""
    best = []
    for z in brute_sites(field.d, R):
        r = sum(abs(c) for c in z)
        xi = float(field.values(np.array([z]))[0])
        p = xi if r == 0 else xi - (r / t) * math.log(r / (2 * field.d * math.e * t))
        best.append((-p, z))
    best.sort()
    (p1, z1), (p2, z2) = best[0], best[1]
    return z1, -p1, z2, -p2


def path_eigenvalue(c: float, n: int) -> float:
    """Top Dirichlet eigenvalue of Delta + c on a path of n sites."""
    return c - 2 + 2 * math.cos(math.pi / (n + 1))


def path_hamiltonian(xi: np.ndarray) -> np.ndarray:
    n = len(xi)
    H = np.diag(xi - 2.0)
    H += np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)
    return H


def eig_solution_1d(xi: np.ndarray, i0: int, t: float):
    """(w, log_mass) of the d=1 box problem via symmetric eigendecomposition."""
    lam, V = linalg.eigh(path_hamiltonian(xi))
    top = lam[-1]
    u = V @ (np.exp(t * (lam - top)) * V[i0])
    u = np.maximum(u, 0.0)
    return u / u.sum(), top * t + math.log(u.sum())


def mu_numeric(d: int, alpha: float) -> float:
    """mu as the integral of (1 + q|x|)^-alpha over R^d (radial form)."""
    q = d / (alpha - d)
    surf = 2 ** d / math.factorial(d - 1)
    val, _ = integrate.quad(lambda r: surf * r ** (d - 1) * (1 + q * r) ** (-alpha), 0, np.inf,
                            epsabs=0, epsrel=1e-12, limit=200)
    return val


def shell_integral_numeric(y: float, d: int, alpha: float) -> float:
    """Integral of (y + q|x|)^-(alpha+1) over R^d by d-dimensional adaptive quadrature."""
    q = d / (alpha - d)
    f1 = lambda x: (y + q * abs(x)) ** (-(alpha + 1))
    opts = dict(epsabs=0, epsrel=1e-10, limit=200)
    if d == 1:
        return 2 * integrate.quad(f1, 0, np.inf, **opts)[0]
    if d == 2:
        val, _ = integrate.dblquad(lambda x2, x1: (y + q * (x1 + x2)) ** (-(alpha + 1)),
                                   0, np.inf, 0, np.inf, epsabs=0, epsrel=1e-9)
        return 4 * val
    raise ValueError("d must be 1 or 2")


def radial_cdf_dblquad(s: float, d: int, alpha: float, mu: float) -> float:
    """P(|X| <= s) by 2-d quadrature over (radius, y)."""
    q = d / (alpha - d)
    surf = 2 ** d / math.factorial(d - 1)

    def f(y, r):
        if y <= 0:
            return 0.0
        return surf * r ** (d - 1) * alpha * math.exp(-mu * y ** (d - alpha)) * (y + q * r) ** (-(alpha + 1))

    val, _ = integrate.dblquad(f, 0, s, 0, np.inf, epsabs=1e-13, epsrel=1e-10)
    return val


def exact_max_psi_logcdf_1d(x: float, t: float, alpha: float, r_exact: int = 200_000) -> float:
    """log P(max_z Psi_t(z) <= x) for the i.i.d. Pareto field in d = 1.

    The sites are independent, so the law is a product over sites of
    F(x + pen(|z|)); shells beyond ``r_exact`` are integrated.
    """
    d = 1
    r = np.arange(1, r_exact + 1, dtype=float)
    pen = r / t * np.log(r / (2 * d * math.e * t))
    v = x + pen
    if x < 1 or np.any(v < 1):
        return -math.inf
    s = math.log1p(-x ** -alpha) + 2 * np.sum(np.log1p(-v ** -alpha))

    def f(rr):
        return 2 * math.log1p(-(x + rr / t * math.log(rr / (2 * d * math.e * t))) ** -alpha)

    lo, tail = r_exact + 0.5, 0.0
    while True:
        val, _ = integrate.quad(f, lo, 4 * lo, limit=200)
        tail += val
        lo *= 4
        if abs(val) < 1e-15:
            break
    return float(s + tail)


def exact_max_psi_cdf_1d(x, t: float, alpha: float) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return np.array([math.exp(exact_max_psi_logcdf_1d(float(v), t, alpha)) for v in x])


def ks_critical(n: int, level: float = 0.01) -> float:
    """Asymptotic one-sample KS critical value: 1.63/sqrt(n) at 1%, 1.36/sqrt(n) at 5%."""
    c = {0.01: 1.63, 0.05: 1.36}[level]
    return c / math.sqrt(n)


def split_long_double(xi: np.ndarray, t: float, R_out: int, R_in: int, Z: int):
    """Path-class split of the d=1 outer-box solution in extended precision.

    A plain Poisson series with one global scale, stepped class by class on
    masked arrays; the long-double exponent range absorbs the dynamic range
    that defeats a global double scale.  Returns (rows, log_shift) with
    rows = (exited, inside without Z, inside with Z, plain) and the true
    values equal to rows * exp(log_shift).
    """
    LD = np.longdouble
    n = len(xi)
    i0, iz = R_out, Z + R_out
    xi = np.asarray(xi, dtype=LD)
    lam = xi.max() - xi.min() + 2
    p = (xi - xi.min()) / lam
    a = 1 / lam
    tau = float(t * lam)
    K = int(tau + 40 * math.sqrt(tau) + 4 * R_out + 100)
    inner = np.zeros(n, dtype=bool)
    inner[R_out - R_in:R_out + R_in + 1] = True

    def step(v):
        out = p * v
        out[1:] += a * v[:-1]
        out[:-1] += a * v[1:]
        return out

    x = np.zeros((4, n), dtype=LD)
    x[2 if iz == i0 else 1, i0] = 1
    x[3, i0] = 1
    acc = x * np.exp(LD(-tau))
    logw, logs = -tau, LD(0)
    for k in range(1, K + 1):
        y1, y2 = step(x[1]), step(x[2])
        exit_ = np.where(inner, 0, y1 + y2)
        y1 = np.where(inner, y1, 0)
        y2 = np.where(inner, y2, 0)
        y2[iz] += y1[iz]
        y1[iz] = 0
        x = np.array([step(x[0]) + exit_, y1, y2, step(x[3])])
        s = x[3].sum()
        x /= s
        logs += np.log(s)
        logw += math.log(tau) - math.log(k)
        acc += x * np.exp(LD(logw) + logs)
    return acc, float(t * lam) - float(t * (2 - xi.min()))
