"""Principal eigenpair of Delta + xi on a box with zero boundary values."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize, sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as splinalg

from .errors import ConvergenceError, DomainError, NotApplicable
from .evolution import Domain, LatticeBox, MassDecomposition, _as_box, _site_tuple


@dataclass
class SpectralPair:
    """``v`` is normalized by ``v(norm_site) = 1``; ``xi`` is the potential on ``sites``."""

    lam: float
    sites: np.ndarray
    v: np.ndarray
    xi: np.ndarray
    norm_site: tuple
    l2_norm_sq: float
    residual: float
    iterations: int
    method: str

    def index(self, z) -> int:
        hit = np.flatnonzero((self.sites == np.array(_site_tuple(z))).all(axis=1))
        return int(hit[0]) if len(hit) else -1

    def v_at(self, z) -> float:
        i = self.index(z)
        return 0.0 if i < 0 else float(self.v[i])

    @property
    def top_gap(self) -> float:
        """xi^(1) - xi^(2) over the sites of the pair."""
        if len(self.xi) < 2:
            return math.inf
        a = np.partition(self.xi, -2)[-2:]
        return float(a.max() - a.min())


def _component(dom: Domain, i0: int) -> np.ndarray:
    n = len(dom)
    rows, cols = np.nonzero(dom.nb >= 0)
    adj = sparse.csr_matrix((np.ones(len(rows)), (rows, dom.nb[rows, cols])), shape=(n, n))
    _, labels = csgraph.connected_components(adj, directed=False)
    return np.flatnonzero(labels == labels[i0])


def _hamiltonian(xi: np.ndarray, nb: np.ndarray, d: int) -> sparse.csr_matrix:
    n = len(xi)
    rows, cols = np.nonzero(nb >= 0)
    H = sparse.csr_matrix((np.ones(len(rows)), (rows, nb[rows, cols])), shape=(n, n))
    return (H + sparse.diags(xi - 2 * d)).tocsr()


def _power_iteration(H, xi, d, tol, max_iter):
    """Shifted power iteration; returns (lambda, vector, iterations, converged)."""
    c = 4 * d - xi.min() + 1
    x = np.exp(xi - xi.max())  # start concentrated on high potential
    x /= np.linalg.norm(x)
    lam = x @ (H @ x)
    for it in range(1, max_iter + 1):
        y = H @ x + c * x
        y /= np.linalg.norm(y)
        new = y @ (H @ y)
        resid = np.abs(H @ y - new * y).max() / np.abs(y).max()
        x = y
        if resid <= tol:
            return new, x, it, True
        if it > 50 and abs(new - lam) < 1e-15 * max(1.0, abs(new)) and resid > 1e3 * tol:
            break  # stagnated
        lam = new
    return lam, x, it, False


def _harmonic_extension(lam, xi, nb, d, iz):
    """v on the component with v(Z) = 1 and (H v)(y) = lam v(y) for y != Z.

    Solves the M-matrix system (lam - H restricted away from Z) v = indicator
    of the neighbours of Z, with LU in natural order and no pivoting.
    """
    n = len(xi)
    others = np.flatnonzero(np.arange(n) != iz)
    if len(others) == 0:
        return np.ones(1)
    pos = np.full(n, -1, dtype=np.int64)
    pos[others] = np.arange(len(others))
    sub_nb = nb[others]
    rows, cols = np.nonzero(sub_nb >= 0)
    tgt = sub_nb[rows, cols]
    b = np.zeros(len(others))
    np.add.at(b, rows[tgt == iz], 1.0)
    mask = tgt != iz
    A = sparse.csc_matrix((-np.ones(mask.sum()), (rows[mask], pos[tgt[mask]])), shape=(len(others),) * 2)
    A = A + sparse.diags(lam - xi[others] + 2 * d)
    lu = splinalg.splu(A.tocsc(), permc_spec="NATURAL", diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))
    sol = lu.solve(b)
    v = np.empty(n)
    v[iz] = 1.0
    v[others] = sol
    return v


def principal_pair(field, box, taboo: Iterable = (), norm_site: Sequence[int] | None = None,
                   tol: float = 1e-10, max_iter: int = 100_000, power_budget: int = 5000) -> SpectralPair:
    """Principal eigenpair on the connected component of ``norm_site`` in ``box`` minus ``taboo``.

    A shifted power iteration (eigsh when it stalls) gives lambda; lambda is
    then polished as the root of the eigen-equation at the peak of the
    eigenvector, with v the harmonic extension from that peak, which keeps
    tiny entries of v relatively accurate.  v is finally rescaled so that
    v(norm_site) = 1.
    """
    box = _as_box(box, field.d)
    d = field.d
    dom = Domain(d, box.R, taboo)
    if norm_site is None:
        xi_all = np.asarray(field.values(dom.sites), dtype=float)
        norm_site = tuple(int(c) for c in dom.sites[int(np.argmax(xi_all))])
    norm_site = _site_tuple(norm_site)
    if norm_site in dom.taboo:
        raise DomainError(f"normalization site {norm_site} is tabooed")
    i0 = dom.index(norm_site)
    comp = _component(dom, i0)
    remap = np.full(len(dom), -1, dtype=np.int64)
    remap[comp] = np.arange(len(comp))
    nb = dom.nb[comp]
    nb = np.where(nb >= 0, remap[np.maximum(nb, 0)], -1)
    sites = dom.sites[comp]
    xi = np.asarray(field.values(sites), dtype=float)
    iz = int(remap[i0])
    if len(comp) == 1:
        lam = float(xi[0] - 2 * d)
        return SpectralPair(lam, sites, np.ones(1), xi, norm_site, 1.0, 0.0, 0, "scalar")

    H = _hamiltonian(xi, nb, d)
    lam0, x, iters, ok = _power_iteration(H, xi, d, tol, min(max_iter, power_budget))
    method = "power"
    if not ok:
        vals, vecs = splinalg.eigsh(H, k=1, which="LA", v0=x, tol=0.0, maxiter=max_iter)
        lam0, x, method = float(vals[0]), vecs[:, 0], "power+eigsh"

    # the extension away from the peak is an M-matrix problem; away from other sites it may not be
    ia = int(np.argmax(np.abs(x)))

    def g(lam):
        v = _harmonic_extension(lam, xi, nb, d, ia)
        return xi[ia] - 2 * d + sum(v[j] for j in nb[ia] if j >= 0) - lam

    xi_max = float(xi.max())
    eta = 1e-9 * max(1.0, abs(lam0))
    lo, hi = lam0 - eta, min(lam0 + eta, xi_max)
    for _ in range(40):
        if g(lo) > 0:
            break
        lo -= 10 * (lam0 - lo)
    for _ in range(40):
        if hi >= xi_max or g(hi) < 0:
            break
        hi = min(xi_max, hi + 10 * (hi - lam0))
    glo, ghi = g(lo), g(hi)
    if not (glo > 0 and ghi <= 0):
        raise ConvergenceError(f"could not bracket the principal eigenvalue near {lam0}")
    lam = hi if ghi == 0 else optimize.brentq(g, lo, hi, xtol=1e-300, rtol=1e-15,
                                              maxiter=200)
    v = _harmonic_extension(lam, xi, nb, d, ia)
    if v.min() < 0:
        raise ConvergenceError("eigenfunction lost positivity")
    resid = float(np.abs(H @ v - lam * v).max() / v.max())
    if resid > tol:
        raise ConvergenceError(f"eigenpair residual {resid:.3g} above tolerance {tol:.3g}", residual=resid)
    if ia != iz:
        with np.errstate(over="ignore"):
            v = v / v[iz] if v[iz] > 0 else np.full_like(v, np.inf)
        if not np.all(np.isfinite(v)):
            raise ConvergenceError(f"eigenfunction at {norm_site} is below floating range relative to its peak",
                                   residual=resid)
        v[iz] = 1.0
    with np.errstate(over="ignore"):
        l2 = float(v @ v)
    if not math.isfinite(l2):
        raise ConvergenceError(f"||v||^2 overflows with v({norm_site}) = 1", residual=resid)
    return SpectralPair(float(lam), sites, v, xi, norm_site, l2, resid, iters, method)


def decay_bound_check(pair: SpectralPair, Z: Sequence[int], gap: float) -> float:
    """max over z of v(z) / (2d/gap)^|z - Z| - 1.

    Applicable only when gap > 2d and xi(Z) is the top potential value.
    """
    Z = _site_tuple(Z)
    d = pair.sites.shape[1]
    if not gap > 2 * d:
        raise NotApplicable(f"gap {gap:.6g} <= 2d = {2 * d}; decay bound not applicable")
    iz = pair.index(Z)
    if iz < 0 or pair.xi[iz] != pair.xi.max():
        raise NotApplicable("xi(Z) is not the top potential value on the box")
    dist = np.abs(pair.sites - np.array(Z)).sum(axis=1)
    with np.errstate(divide="ignore"):
        log_ratio = np.log(pair.v) - dist * math.log(2 * d / gap)
    return float(math.expm1(log_ratio.max()))


def u3_domination_check(u3_field, pair: SpectralPair, Z: Sequence[int], floor: float = 1e-280) -> float:
    """max over z != Z of u3(z) / (u3(Z) ||v||^2 v(z)).

    ``u3_field`` is a :class:`MassDecomposition` (its pointwise logs are used,
    so tiny u3 values keep full precision) or a ``(sites, values)`` pair.
    Sites where v underflows below ``floor`` carry no information and are
    skipped.
    """
    if isinstance(u3_field, MassDecomposition):
        sites, logs = u3_field.sites_inner, u3_field.log_u3
    else:
        sites, vals = u3_field
        with np.errstate(divide="ignore"):
            logs = np.log(np.asarray(vals, dtype=float))
    sites = np.asarray(sites, dtype=np.int64)
    logs = np.asarray(logs, dtype=float)
    Z = _site_tuple(Z)
    if pair.v_at(Z) != 1.0:
        raise DomainError("the eigenpair must be normalized at Z")
    hitz = np.flatnonzero((sites == np.array(Z)).all(axis=1))
    if len(hitz) == 0 or not np.isfinite(logs[hitz[0]]):
        raise DomainError("u3(Z) = 0: degenerate input")
    log_u3z = logs[hitz[0]]
    # align pair.v to the u3 sites
    keys = {tuple(s): i for i, s in enumerate(pair.sites.tolist())}
    idx = np.array([keys.get(tuple(s), -1) for s in sites.tolist()])
    if np.any(idx < 0):
        raise DomainError("u3 sites are not covered by the eigenpair box")
    v = pair.v[idx]
    keep = (v > floor) & np.isfinite(logs) & ~(sites == np.array(Z)).all(axis=1)
    if not keep.any():
        return 0.0
    log_ratio = logs[keep] - log_u3z - math.log(pair.l2_norm_sq) - np.log(v[keep])
    return float(np.exp(log_ratio.max()))


def eigenfunction_fk_estimate(field, box, Z: Sequence[int], lam: float, z: Sequence[int], n_paths: int,
                              rng: np.random.Generator, taboo: Iterable = ()) -> tuple[float, float]:
    """Monte-Carlo estimate of v(z) = E_z[exp(int (xi - lam)) ; hit Z before leaving the box]."""
    box = _as_box(box, field.d)
    d = field.d
    Z = _site_tuple(Z)
    z = _site_tuple(z)
    dom = Domain(d, box.R, taboo)
    xi = np.asarray(field.values(dom.sites), dtype=float)
    iz = dom.index(Z)
    others = np.delete(xi, iz)
    if len(others) and lam <= others.max():
        raise NotApplicable("lambda does not exceed the potential away from Z; estimator variance is unbounded")
    if z == Z:
        return 1.0, 0.0
    start = int(dom.lookup(np.array([z]))[0])
    if start < 0:
        return 0.0, 0.0
    pos = np.full(n_paths, start, dtype=np.int64)
    logw = np.zeros(n_paths)
    result = np.zeros(n_paths)
    active = np.arange(n_paths)
    while len(active):
        hold = rng.exponential(1.0 / (2 * d), size=len(active))
        logw[active] += (xi[pos[active]] - lam) * hold
        nxt = dom.nb[pos[active], rng.integers(0, 2 * d, size=len(active))]
        pos[active] = nxt
        hit = nxt == iz
        result[active[hit]] = np.exp(logw[active[hit]])
        # exited walks score 0; walks whose weight underflows are dropped (bias below e^-745)
        active = active[(nxt >= 0) & ~hit & (logw[active] > -745.0)]
    return float(result.mean()), float(result.std(ddof=1) / math.sqrt(n_paths))


def write_profile(pair: SpectralPair, path) -> None:
    """CSV with columns z1..zd, v, log_v."""
    d = pair.sites.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"z{i + 1}" for i in range(d)] + ["v", "log_v"])
        for site, vv in zip(pair.sites, pair.v):
            lv = math.log(vv) if vv > 0 else -math.inf
            wr.writerow([*map(int, site), f"{vv:.17g}", f"{lv:.17g}"])
