"""Box-restricted solutions of du/dt = Delta u + xi u with u(0) = 1_0.

Everything is kept in normalized form: a profile ``w`` with unit sum plus the
log of the total mass, since u itself reaches exp(t max xi).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numba import njit
from scipy import linalg

from .errors import BoxTooLargeError, ConvergenceError, DomainError
from .lattice import ball_sites, pack_coords

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000
NEG_TOL = 1e-14


@dataclass(frozen=True)
class LatticeBox:
    R: int
    d: int = 1


def _as_box(box, d: int) -> LatticeBox:
    if isinstance(box, LatticeBox):
        if box.d != d:
            raise DomainError(f"box dimension {box.d} does not match field dimension {d}")
        return box
    return LatticeBox(int(box), d)


def _site_tuple(z) -> tuple[int, ...]:
    return tuple(int(c) for c in z)


class Domain:
    """Sites of ``B_R`` minus ``taboo`` with a nearest-neighbour table (-1 = absent)."""

    def __init__(self, d: int, R: int, taboo: Iterable = ()):
        if R < 0:
            raise DomainError(f"box radius must be nonnegative, got {R}")
        self.d, self.R = d, R
        self.taboo = frozenset(_site_tuple(z) for z in taboo)
        sites = ball_sites(d, R)
        if self.taboo:
            tk = pack_coords(np.array(sorted(self.taboo), dtype=np.int64).reshape(-1, d))
            sites = sites[~np.isin(pack_coords(sites), tk)]
        self.sites = sites
        self.keys = pack_coords(sites)  # sorted, because ball_sites is lexicographic
        n = len(sites)
        nb = np.full((n, 2 * d), -1, dtype=np.int64)
        for i in range(d):
            for s, col in ((1, 2 * i), (-1, 2 * i + 1)):
                other = sites.copy()
                other[:, i] += s
                nb[:, col] = self.lookup(other)
        self.nb = nb

    def __len__(self) -> int:
        return len(self.sites)

    def lookup(self, coords) -> np.ndarray:
        """Indices of ``coords`` in the domain, -1 where absent."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.d)
        out = np.full(len(coords), -1, dtype=np.int64)
        inside = np.abs(coords).sum(axis=1) <= self.R
        if not inside.any() or len(self.keys) == 0:
            return out
        k = pack_coords(coords[inside])
        pos = np.minimum(np.searchsorted(self.keys, k), len(self.keys) - 1)
        out[inside] = np.where(self.keys[pos] == k, pos, -1)
        return out

    def index(self, z) -> int:
        i = int(self.lookup(np.array([_site_tuple(z)]))[0])
        if i < 0:
            raise DomainError(f"site {_site_tuple(z)} is not in the domain")
        return i


@dataclass
class EvolutionState:
    d: int
    R: int
    taboo: frozenset
    t: float
    sites: np.ndarray
    w: np.ndarray
    log_mass: float
    method: str = "rk4"
    steps: int = 0

    def w_at(self, z) -> float:
        i = self._index(z)
        return 0.0 if i < 0 else float(self.w[i])

    def _index(self, z) -> int:
        z = np.array([_site_tuple(z)], dtype=np.int64)
        if np.abs(z).sum() > self.R:
            return -1
        keys = pack_coords(self.sites)
        k = pack_coords(z)[0]
        pos = int(np.searchsorted(keys, k))
        return pos if pos < len(keys) and keys[pos] == k else -1

    def log_u(self, z) -> float:
        wz = self.w_at(z)
        return math.log(wz) + self.log_mass if wz > 0 else -math.inf


def _potential(field, dom: Domain) -> np.ndarray:
    return np.asarray(field.values(dom.sites), dtype=float)


def _prepare(field, box, taboo, t):
    if t < 0:
        raise DomainError(f"time must be nonnegative, got {t}")
    box = _as_box(box, field.d)
    taboo = frozenset(_site_tuple(z) for z in taboo)
    origin = (0,) * field.d
    if origin in taboo:
        raise DomainError("the origin is tabooed")
    dom = Domain(field.d, box.R, taboo)
    return box, taboo, dom, dom.index(origin)


def _initial_state(field, box, taboo, dom, i0, method) -> EvolutionState:
    w = np.zeros(len(dom))
    w[i0] = 1.0
    return EvolutionState(field.d, box.R, taboo, 0.0, dom.sites, w, 0.0, method)


# ----------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _apply_shifted(nb, diag, x, out):
    # out = (Delta + xi - s) x with diag = xi - 2d - s
    n, m = nb.shape
    for i in range(n):
        acc = diag[i] * x[i]
        for j in range(m):
            k = nb[i, j]
            if k >= 0:
                acc += x[k]
        out[i] = acc


@njit(cache=True)
def _rk4_run(nb, xi, d, w0, dt, nsteps):
    n = w0.shape[0]
    w = w0.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    diag = np.empty(n)
    log_mass = 0.0
    clipped = 0
    for _ in range(nsteps):
        s = 0.0
        for i in range(n):
            s += xi[i] * w[i]
        for i in range(n):
            diag[i] = xi[i] - 2.0 * d - s
        _apply_shifted(nb, diag, w, k1)
        for i in range(n):
            tmp[i] = w[i] + 0.5 * dt * k1[i]
        _apply_shifted(nb, diag, tmp, k2)
        for i in range(n):
            tmp[i] = w[i] + 0.5 * dt * k2[i]
        _apply_shifted(nb, diag, tmp, k3)
        for i in range(n):
            tmp[i] = w[i] + dt * k3[i]
        _apply_shifted(nb, diag, tmp, k4)
        total = 0.0
        for i in range(n):
            v = w[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if v < 0.0:
                if v < -1e-14:
                    return w, log_mass, -1
                v = 0.0
                clipped += 1
            tmp[i] = v
            total += v
        for i in range(n):
            w[i] = tmp[i] / total
        log_mass += s * dt + math.log(total)
    return w, log_mass, clipped


@njit(cache=True)
def _uniformize(nb, pdiag, inv_lam, tau, vecs, in_mask, z_mask, split, min_steps, max_steps, eps):
    """Poisson-weighted series sum_k pois(k; tau) P^k v for P = Q / Lambda.

    ``vecs`` is (m, n).  With ``split`` the three rows are the path classes
    (exited, inside without visiting Z, inside having visited Z) and P acts
    on each row before the classes are re-sorted.  Returns the accumulated
    rows (scaled) and the log of their common scale.
    """
    m, n = vecs.shape
    x = vecs.copy()
    y = np.empty((m, n))
    acc = x.copy()
    log_acc = -tau  # log pois(0)
    log_s = 0.0
    log_pois = -tau
    log_tau = math.log(tau) if tau > 0 else -np.inf
    k = 0
    while True:
        if k >= max_steps:
            return acc, log_acc, -1
        k += 1
        # y = P x for every row
        for r in range(m):
            for i in range(n):
                v = pdiag[i] * x[r, i]
                for j in range(nb.shape[1]):
                    q = nb[i, j]
                    if q >= 0:
                        v += inv_lam * x[r, q]
                y[r, i] = v
        if split:
            for i in range(n):
                e, tt, vv = y[0, i], y[1, i], y[2, i]
                if in_mask[i]:
                    x[0, i] = e
                    if z_mask[i]:
                        x[1, i] = 0.0
                        x[2, i] = vv + tt
                    else:
                        x[1, i] = tt
                        x[2, i] = vv
                else:
                    x[0, i] = e + tt + vv
                    x[1, i] = 0.0
                    x[2, i] = 0.0
        else:
            for r in range(m):
                for i in range(n):
                    x[r, i] = y[r, i]
        total = 0.0
        for r in range(m):
            for i in range(n):
                total += x[r, i]
        if total <= 0.0:
            return acc, log_acc, k
        for r in range(m):
            for i in range(n):
                x[r, i] /= total
        log_s += math.log(total)
        log_pois += log_tau - math.log(k)
        lw = log_pois + log_s
        if lw > log_acc:
            f = math.exp(log_acc - lw)
            for r in range(m):
                for i in range(n):
                    acc[r, i] = acc[r, i] * f + x[r, i]
            log_acc = lw
            continue
        f = math.exp(lw - log_acc)
        worst = 0.0
        for r in range(m):
            for i in range(n):
                inc = x[r, i] * f
                a = acc[r, i]
                if a > 0.0:
                    rel = inc / a
                    if rel > worst:
                        worst = rel
                elif inc > 0.0:
                    worst = 1.0
                acc[r, i] = a + inc
        if k >= min_steps and k + 1 > tau:
            # the remaining Poisson weights decay at least geometrically with ratio tau/(k+1)
            rho = tau / (k + 1.0)
            if worst / (1.0 - rho) < eps:
                return acc, log_acc, k


BLOCK = 16
_LN2 = math.log(2.0)
_NONE = -(1 << 62)


@njit(cache=True)
def _add_into(nx, nxe, nxnz, r, b, i, s, es, B):
    # add s * 2^es to site i of row r, block b, keeping the block exponent in range
    if s == 0.0:
        return
    if not nxnz[r, b]:
        nxe[r, b] = es
        nx[r, i] += s
        nxnz[r, b] = True
        return
    if es - nxe[r, b] > 200:
        f = math.ldexp(1.0, nxe[r, b] - es)
        for j in range(b * B, min(b * B + B, nx.shape[1])):
            nx[r, j] *= f
        nxe[r, b] = es
    nx[r, i] += math.ldexp(s, es - nxe[r, b])


@njit(cache=True)
def _refresh(nx, nxnz, r, b, B):
    # pass one marks blocks optimistically; transfers need the exact emptiness flag
    if nxnz[r, b]:
        for i in range(b * B, min(b * B + B, nx.shape[1])):
            if nx[r, i] != 0.0:
                return
        nxnz[r, b] = False


@njit(cache=True)
def _split_chain_1d(pdiag, inv_lam, tau, i0, iz, lo_in, hi_in, min_steps, max_steps, eps, B):
    """Path-class series on a contiguous d=1 box; arrays carry one zero pad at each end.

    Rows: exited, inside without Z, inside with Z, plain solution.  Each row
    is stored as mantissas with one power-of-two exponent per block of B
    sites, so entries far below the bulk (walks that reach a distant high
    site) keep full relative precision instead of underflowing.  Rescaling
    by powers of two is exact.  Returns (mantissas, block exponents, k);
    k = -1 if the series did not converge, -2 if the dynamic range inside a
    block was exceeded.
    """
    n = pdiag.shape[0]
    nb = (n + B - 1) // B
    x = np.zeros((4, n))
    nx = np.zeros((4, n))
    xe = np.zeros((4, nb), dtype=np.int64)
    nxe = np.zeros((4, nb), dtype=np.int64)
    xnz = np.zeros((4, nb), dtype=np.bool_)
    nxnz = np.zeros((4, nb), dtype=np.bool_)
    am = np.zeros((4, n))
    ae = np.zeros((4, nb), dtype=np.int64)
    anz = np.zeros((4, nb), dtype=np.bool_)
    sb_acc = np.zeros(nb)
    sb_inc = np.zeros(nb)
    r0 = 2 if iz == i0 else 1
    w0 = -tau / _LN2
    a0 = math.ceil(w0)
    for r in (r0, 3):
        x[r, i0] = 1.0
        xnz[r, i0 // B] = True
        am[r, i0] = math.exp((w0 - a0) * _LN2)
        ae[r, i0 // B] = a0
        anz[r, i0 // B] = True
    log_pois = -tau
    log_tau = math.log(tau)
    lo = i0
    hi = i0
    k = 0
    while True:
        if k >= max_steps:
            return am, ae, -1
        k += 1
        lo = max(lo - 1, 1)
        hi = min(hi + 1, n - 2)
        log_pois += log_tau - math.log(k)
        W = log_pois / _LN2
        check = k >= min_steps and k + 1 > tau
        for r in range(4):
            if r == 1 or r == 2:
                rlo = max(lo, lo_in)
                rhi = min(hi, hi_in)
            else:
                rlo = lo
                rhi = hi
            for b in range(rlo // B, rhi // B + 1):
                s0 = max(b * B, rlo)
                s1 = min(b * B + B - 1, rhi)
                zl = b > 0 and xnz[r, b - 1]
                zr = b + 1 < nb and xnz[r, b + 1]
                cand = _NONE
                if zl:
                    cand = xe[r, b - 1]
                if zr and xe[r, b + 1] > cand:
                    cand = xe[r, b + 1]
                if xnz[r, b]:
                    E = xe[r, b]
                    if cand != _NONE and cand - 200 > E:
                        E = cand - 200
                elif cand != _NONE:
                    E = cand
                else:
                    for i in range(s0, s1 + 1):
                        nx[r, i] = 0.0
                    nxnz[r, b] = False
                    nxe[r, b] = 0
                    continue
                nxe[r, b] = E
                nxnz[r, b] = True
                b0 = b * B
                b1 = b0 + B - 1
                if xnz[r, b]:
                    fs = math.ldexp(1.0, xe[r, b] - E)
                    # interior sites share the block factor, which is a power of two
                    for i in range(max(s0, b0 + 1), min(s1, b1 - 1) + 1):
                        nx[r, i] = (pdiag[i] * x[r, i] + inv_lam * (x[r, i - 1] + x[r, i + 1])) * fs
                else:
                    fs = 0.0
                    for i in range(max(s0, b0 + 1), min(s1, b1 - 1) + 1):
                        nx[r, i] = 0.0
                fl = math.ldexp(1.0, xe[r, b - 1] - E) if zl else 0.0
                fr = math.ldexp(1.0, xe[r, b + 1] - E) if zr else 0.0
                if s0 == b0:
                    i = b0
                    nb_r = x[r, i + 1] * (fr if B == 1 else fs)
                    nx[r, i] = pdiag[i] * x[r, i] * fs + inv_lam * (x[r, i - 1] * fl + nb_r)
                if s1 == b1 and b1 != b0:
                    i = b1
                    nx[r, i] = pdiag[i] * x[r, i] * fs + inv_lam * (x[r, i - 1] * fs + x[r, i + 1] * fr)
        # first visit to Z moves inside mass from class 1 to class 2
        bz = iz // B
        if iz >= lo and iz <= hi:
            s = nx[1, iz]
            if s > 0.0:
                _refresh(nx, nxnz, 2, bz, B)
                _add_into(nx, nxe, nxnz, 2, bz, iz, s, nxe[1, bz], B)
                nx[1, iz] = 0.0
        # one jump out of the inner box moves inside mass to the exited class
        for j, src in ((lo_in - 1, lo_in), (hi_in + 1, hi_in)):
            if j >= lo and j <= hi:
                bj = j // B
                bs = src // B
                _refresh(nx, nxnz, 0, bj, B)
                for r in (1, 2):
                    if xnz[r, bs]:
                        _add_into(nx, nxe, nxnz, 0, bj, j, inv_lam * x[r, src], xe[r, bs], B)
        worst = 0.0
        for r in range(4):
            if r == 1 or r == 2:
                rlo = max(lo, lo_in)
                rhi = min(hi, hi_in)
            else:
                rlo = lo
                rhi = hi
            for b in range(rlo // B, rhi // B + 1):
                s0 = max(b * B, rlo)
                s1 = min(b * B + B - 1, rhi)
                mx = 0.0
                for i in range(s0, s1 + 1):
                    mx = max(mx, nx[r, i])
                if not mx < math.inf:
                    return am, ae, -2
                if mx == 0.0:
                    nxnz[r, b] = False
                    if r == 3:
                        sb_inc[b] = 0.0
                    continue
                ex = math.frexp(mx)[1]
                e = nxe[r, b]
                if ex > 30 or ex < -30:
                    f = math.ldexp(1.0, -ex)
                    for i in range(s0, s1 + 1):
                        nx[r, i] *= f
                    e += ex
                    nxe[r, b] = e
                Ew = e + W
                if not anz[r, b]:
                    ae[r, b] = math.ceil(Ew)
                    anz[r, b] = True
                elif Ew > ae[r, b]:
                    na = math.ceil(Ew)
                    f = math.ldexp(1.0, ae[r, b] - na)
                    for i in range(b * B, min(b * B + B, n)):
                        am[r, i] *= f
                    ae[r, b] = na
                f = math.exp((Ew - ae[r, b]) * _LN2)
                if r == 3 or check:
                    inc_sum = 0.0
                    acc_sum = 0.0
                    for i in range(s0, s1 + 1):
                        inc = f * nx[r, i]
                        new = am[r, i] + inc
                        am[r, i] = new
                        inc_sum += inc
                        acc_sum += new
                        if check and new > 0.0 and i >= lo_in and i <= hi_in:
                            rel = inc / new
                            if rel > worst:
                                worst = rel
                    if r == 3:
                        sb_inc[b] = inc_sum
                        sb_acc[b] = acc_sum
                else:
                    for i in range(s0, s1 + 1):
                        am[r, i] += f * nx[r, i]
        x, nx = nx, x
        xe, nxe = nxe, xe
        xnz, nxnz = nxnz, xnz
        if check:
            # rows 0..2 add up to row 3 and P is substochastic, so the plain row's
            # increment bounds every later increment of each row sum
            top = _NONE
            for b in range(lo // B, hi // B + 1):
                if anz[3, b] and ae[3, b] > top:
                    top = ae[3, b]
            tot_inc = 0.0
            tot_acc = 0.0
            for b in range(lo // B, hi // B + 1):
                if anz[3, b]:
                    sc = math.ldexp(1.0, ae[3, b] - top)
                    tot_inc += sb_inc[b] * sc
                    tot_acc += sb_acc[b] * sc
            if tot_acc > 0.0 and tot_inc / tot_acc > worst:
                worst = tot_inc / tot_acc
            rho = tau / (k + 1.0)
            if worst / (1.0 - rho) < eps:
                return am, ae, k


def _split_parts_1d(xi, t, R_out, R_in, iz, i0, eps=1e-17):
    xi_min, xi_max = float(xi.min()), float(xi.max())
    lam = xi_max - xi_min + 2.0
    c = 2.0 - xi_min
    tau = t * lam
    pd = np.zeros(len(xi) + 2)
    pd[1:-1] = (xi - xi_min) / lam
    max_steps = int(tau + 60.0 * math.sqrt(tau + 1.0) + 4 * R_out + 2000)
    # padded indices: site coordinate x sits at x + R_out + 1
    am, ae, k = _split_chain_1d(pd, 1.0 / lam, tau, i0 + 1, iz + 1, R_out - R_in + 1, R_out + R_in + 1,
                                R_in + 1, max_steps, eps, BLOCK)
    if k == -1:
        raise ConvergenceError(f"uniformization series did not converge in {max_steps} terms")
    if k == -2:
        raise ConvergenceError("dynamic range inside a block exceeded the floating-point range")
    # back to one common scale; entries negligible against the largest block underflow harmlessly
    live = np.add.reduceat(am > 0, np.arange(0, len(pd), BLOCK), axis=1) > 0
    top = int(ae[live].max())
    exps = np.repeat(np.where(live, ae - top, 0), BLOCK, axis=1)[:, :len(pd)]
    rows = np.ldexp(am, exps)
    # pointwise logs straight from mantissa and exponent keep the entries that underflow above
    with np.errstate(divide="ignore"):
        logs = np.log(am) + np.repeat(ae, BLOCK, axis=1)[:, :len(pd)] * _LN2
    shift = tau - c * t
    return rows[:, 1:-1], top * _LN2 + shift, k, logs[:, 1:-1] + shift


def _uniformization_parts(xi, nb, d, t, vecs, in_mask, z_mask, split, graph_radius, eps=1e-17):
    xi_min, xi_max = float(xi.min()), float(xi.max())
    lam = xi_max - xi_min + 2.0 * d
    c = 2.0 * d - xi_min
    tau = t * lam
    pdiag = (xi - xi_min) / lam
    max_steps = int(tau + 60.0 * math.sqrt(tau + 1.0) + 4 * graph_radius + 2000)
    acc, log_acc, k = _uniformize(nb, pdiag, 1.0 / lam, tau, vecs, in_mask, z_mask, split,
                                  int(graph_radius) + 1, max_steps, eps)
    if k < 0:
        raise ConvergenceError(f"uniformization series did not converge in {max_steps} terms")
    # e^{tA} = e^{-ct} e^{tau} sum_k pois(k; tau) P^k
    return acc, log_acc + tau - c * t, k


# ----------------------------------------------------------------------------
# public solvers


def evolve(field, box, taboo: Iterable = (), t: float = 0.0, tol: float = 1e-10,
           method: str = "rk4", max_halvings: int = 14) -> EvolutionState:
    """Solve the box-restricted problem with zero exterior values up to time ``t``.

    ``method="rk4"`` integrates the gauge-shifted equation
    w' = (Delta + xi - s) w, s = sum(xi w), renormalizing after every step,
    and halves the step until two successive refinements agree to ``tol``
    in both sup|dw| and |d log_mass|.  ``method="uniformization"`` sums the
    Poisson series of the positive operator Delta + xi + c.
    """
    box, taboo, dom, i0 = _prepare(field, box, taboo, t)
    state = _initial_state(field, box, taboo, dom, i0, method)
    if t == 0:
        return state
    xi = _potential(field, dom)
    d = field.d
    if method == "uniformization":
        vecs = state.w[None, :].copy()
        dummy = np.zeros(len(dom), dtype=np.bool_)
        acc, log_scale, k = _uniformization_parts(xi, dom.nb, d, t, vecs, dummy, dummy, False, box.R)
        total = acc[0].sum()
        state.w = acc[0] / total
        state.log_mass = log_scale + math.log(total)
        state.t, state.steps = float(t), k
        return state
    if method != "rk4":
        raise DomainError(f"unknown evolution method {method!r}")
    dt0 = 0.5 / (xi.max() - xi.min() + 4 * d)
    nsteps = max(1, math.ceil(t / dt0))
    prev = None
    for _ in range(max_halvings + 1):
        w, lm, clipped = _rk4_run(dom.nb, xi, d, state.w, t / nsteps, nsteps)
        if clipped < 0:
            raise ConvergenceError("RK4 produced a negative value below -1e-14")
        if clipped:
            log.info("clipped %d small negative values in RK4 profile", clipped)
        if prev is not None:
            change = max(float(np.abs(w - prev[0]).max()), abs(lm - prev[1]))
            if change < tol:
                state.w, state.log_mass, state.t, state.steps = w, float(lm), float(t), nsteps
                return state
        prev = (w, lm)
        nsteps *= 2
    raise ConvergenceError(f"RK4 refinement did not reach tol={tol}", residual=change)


def generator_matrix(field, dom: Domain) -> np.ndarray:
    """Dense Delta + xi on the domain (zero exterior values)."""
    n = len(dom)
    H = np.zeros((n, n))
    H[np.arange(n), np.arange(n)] = _potential(field, dom) - 2 * field.d
    rows, cols = np.nonzero(dom.nb >= 0)
    H[rows, dom.nb[rows, cols]] = 1.0
    return H


def dense_reference(field, box, taboo: Iterable = (), t: float = 0.0) -> EvolutionState:
    """Trusted oracle: scaling-and-squaring expm of t (H - lambda_1 I) on small boxes."""
    box, taboo, dom, i0 = _prepare(field, box, taboo, t)
    if len(dom) > DENSE_LIMIT:
        raise BoxTooLargeError(f"dense reference limited to {DENSE_LIMIT} sites, box has {len(dom)}")
    state = _initial_state(field, box, taboo, dom, i0, "dense")
    if t == 0:
        return state
    H = generator_matrix(field, dom)
    lam1 = float(linalg.eigvalsh(H, subset_by_index=[len(dom) - 1, len(dom) - 1])[0])
    u = linalg.expm(t * (H - lam1 * np.eye(len(dom))))[:, i0]
    u = np.maximum(u, 0.0)
    total = u.sum()
    state.w = u / total
    state.log_mass = lam1 * t + math.log(total)
    state.t = float(t)
    return state


# ----------------------------------------------------------------------------
# mass decomposition


@dataclass
class MassDecomposition:
    """Masses as fractions of the outer-box total ``exp(log_U)``.

    ``m1``: paths that left B_{R_t}; ``m2``: paths inside B_{R_t} that never
    hit Z; ``m3``: paths inside B_{R_t} that hit Z.  ``u3`` is the pointwise
    third part on ``sites_inner`` (same scale as the masses) and ``log_u3``
    its natural log, which stays finite where ``u3`` underflows.
    """

    t: float
    Z: tuple
    R_t: float
    R_in: int
    R_out: int
    log_U: float
    m1: float
    m2: float
    m3: float
    ratio: float
    sites_inner: np.ndarray
    u3: np.ndarray
    u_total_inner: np.ndarray
    log_u3: np.ndarray

    @property
    def identity_error(self) -> float:
        """|M1+M2+M3 - U_outer| / U_outer with U_outer from an independent solve."""
        return abs(self.m1 + self.m2 + self.m3 - 1.0)

    @property
    def M1(self) -> float:
        return self.m1 * math.exp(self.log_U)

    @property
    def M2(self) -> float:
        return self.m2 * math.exp(self.log_U)

    @property
    def M3(self) -> float:
        return self.m3 * math.exp(self.log_U)

    def u3_at(self, z) -> float:
        return float(self.u3[_row(self.sites_inner, z)])


def _row(sites: np.ndarray, z) -> int:
    hit = np.flatnonzero((sites == np.array(_site_tuple(z))).all(axis=1))
    if len(hit) == 0:
        raise DomainError(f"site {_site_tuple(z)} not in the domain")
    return int(hit[0])


def outer_radius(R_t: float, outer_factor: float, min_margin: int = 16) -> int:
    return max(math.floor(outer_factor * R_t), math.floor(R_t) + min_margin)


def decompose(field, t: float, Z1: Sequence[int], R_t: float, outer_factor: float = 2.0,
              min_margin: int = 16) -> MassDecomposition:
    """Split the outer-box solution by path class relative to B_{R_t} and Z1.

    One Poisson series of the positive operator carries three vectors whose
    sum is the full solution, so no mass is obtained by subtraction.  The
    plain outer-box solve is repeated independently for the identity check.
    """
    Z = _site_tuple(Z1)
    if len(Z) != field.d:
        raise DomainError("Z1 dimension does not match the field")
    if t < 0:
        raise DomainError(f"time must be nonnegative, got {t}")
    R_in = math.floor(R_t)
    if sum(abs(c) for c in Z) > R_in:
        raise DomainError(f"Z1 = {Z} lies outside B_(R_t) with R_t = {R_t}")
    if outer_factor < 1:
        raise DomainError(f"outer_factor must be >= 1, got {outer_factor}")
    R_out = outer_radius(R_t, outer_factor, min_margin)
    dom = Domain(field.d, R_out)
    xi = _potential(field, dom)
    n = len(dom)
    in_mask = np.abs(dom.sites).sum(axis=1) <= R_in
    z_mask = np.zeros(n, dtype=np.bool_)
    iz = dom.index(Z)
    z_mask[iz] = True
    i0 = dom.index((0,) * field.d)
    vecs = np.zeros((3, n))
    vecs[2 if iz == i0 else 1, i0] = 1.0
    log_u3 = None
    if t == 0:
        acc, log_split = vecs, 0.0
        plain, log_plain = vecs.sum(axis=0, keepdims=True), 0.0
    elif field.d == 1:
        rows, log_split, _, logs = _split_parts_1d(xi, t, R_out, R_in, iz, i0)
        acc, plain, log_plain = rows[:3], rows[3:], log_split
        log_u3 = logs[2]
    else:
        acc, log_split, _ = _uniformization_parts(xi, dom.nb, field.d, t, vecs, in_mask, z_mask, True, R_out)
        plain, log_plain, _ = _uniformization_parts(
            xi, dom.nb, field.d, t, vecs.sum(axis=0, keepdims=True), in_mask, z_mask, False, R_out)
    parts = acc.sum(axis=1)
    U_plain = plain[0].sum()
    log_U = log_plain + math.log(U_plain)
    scale = math.exp(log_split - log_U)
    m1, m2, m3 = (float(p * scale) for p in parts)
    ratio = float(plain[0, iz] / U_plain)
    if log_u3 is None:
        with np.errstate(divide="ignore"):
            log_u3 = np.log(acc[2]) + log_split
    return MassDecomposition(
        float(t), Z, float(R_t), R_in, R_out, log_U,
        m1, m2, m3, min(max(ratio, 0.0), 1.0),
        dom.sites[in_mask], acc[2][in_mask] * scale, acc.sum(axis=0)[in_mask] * scale,
        log_u3[in_mask] - log_U,
    )


# ----------------------------------------------------------------------------
# Feynman-Kac Monte Carlo


@dataclass(frozen=True)
class FKEstimate:
    u: float
    u_se: float
    U: float
    U_se: float


def _neighbour_steps(d: int) -> np.ndarray:
    steps = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        steps[2 * i, i] = 1
        steps[2 * i + 1, i] = -1
    return steps


def feynman_kac_estimate(field, z: Sequence[int], t: float, n_paths: int, rng: np.random.Generator,
                         kill_radius: int | None = None, max_exponent: float = 700.0) -> FKEstimate:
    """Monte-Carlo estimates of u(t, z) and U(t) from walks started at the origin.

    Continuous-time simple random walk with jump rate 2d; a walk leaving
    ``B_kill_radius`` is killed (zero exterior values).
    """
    if t < 0:
        raise DomainError(f"time must be nonnegative, got {t}")
    if n_paths < 2:
        raise DomainError("need at least two paths for a standard error")
    d = field.d
    target = np.array(_site_tuple(z), dtype=np.int64)
    pos = np.zeros((n_paths, d), dtype=np.int64)
    logw = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    remaining = np.full(n_paths, float(t))
    steps = _neighbour_steps(d)
    active = np.flatnonzero(remaining > 0)
    while len(active):
        hold = rng.exponential(1.0 / (2 * d), size=len(active))
        dt = np.minimum(hold, remaining[active])
        logw[active] += field.values(pos[active]) * dt
        remaining[active] -= dt
        if logw[active].max(initial=-np.inf) > max_exponent:
            raise DomainError("t too large for direct Monte Carlo: path exponent exceeds the overflow guard")
        jumping = active[remaining[active] > 0]
        pos[jumping] += steps[rng.integers(0, 2 * d, size=len(jumping))]
        if kill_radius is not None:
            out = jumping[np.abs(pos[jumping]).sum(axis=1) > kill_radius]
            alive[out] = False
            remaining[out] = 0.0
        active = jumping[remaining[jumping] > 0]
    weights = np.where(alive, np.exp(logw), 0.0)
    at_z = weights * (pos == target).all(axis=1)
    sq = math.sqrt(n_paths)
    return FKEstimate(float(at_z.mean()), float(at_z.std(ddof=1) / sq),
                      float(weights.mean()), float(weights.std(ddof=1) / sq))


def write_snapshot(state: EvolutionState, path) -> None:
    """CSV with columns z1..zd, w, log_mass, t."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"z{i + 1}" for i in range(state.d)] + ["w", "log_mass", "t"])
        for site, wv in zip(state.sites, state.w):
            wr.writerow([*map(int, site), f"{wv:.17g}", f"{state.log_mass:.17g}", f"{state.t:.17g}"])
