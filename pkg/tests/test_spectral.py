import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from oracles import path_eigenvalue, path_hamiltonian
from pamlab.errors import DomainError, NotApplicable
from pamlab.evolution import decompose
from pamlab.lattice import ConstantField, PlantedField, PotentialField, ball_sites, box_order_stats
from pamlab.spectral import (
    decay_bound_check,
    eigenfunction_fk_estimate,
    principal_pair,
    u3_domination_check,
    write_profile,
)


def eigh_pair_1d(field, R, Z):
    """Top eigenpair of the d=1 box Hamiltonian by dense symmetric eigendecomposition, v(Z) = 1."""
    xi = field.values(np.arange(-R, R + 1).reshape(-1, 1))
    lam, V = linalg.eigh(path_hamiltonian(xi))
    v = np.abs(V[:, -1])
    return lam[-1], v / v[Z[0] + R]


def test_single_site_box():
    f = PotentialField(3, 3.0, 2)
    p = principal_pair(f, 0)
    xi0 = float(f.values(np.zeros((1, 2), dtype=np.int64))[0])
    assert p.lam == pytest.approx(xi0 - 4, abs=1e-12)
    assert np.all(p.v == 1.0) and p.l2_norm_sq == 1.0


@pytest.mark.parametrize("R", [1, 5, 40])
def test_path_closed_form(R):
    c = 3.7
    p = principal_pair(ConstantField(c, d=1), R, norm_site=(0,))
    assert abs(p.lam - path_eigenvalue(c, 2 * R + 1)) <= 1e-10
    # the principal eigenvector of the path is a sine arch
    k = np.arange(1, 2 * R + 2)
    s = np.sin(np.pi * k / (2 * R + 2))
    assert np.max(np.abs(p.v - s / s[R])) <= 1e-8


def test_against_dense_eigendecomposition():
    for seed in range(5):
        f = PotentialField(seed, 3.0, 1)
        st_ = box_order_stats(f, 60)
        lam, v = eigh_pair_1d(f, 60, st_.argmax1)
        p = principal_pair(f, 60, norm_site=st_.argmax1)
        assert p.lam == pytest.approx(lam, abs=1e-10)
        # entrywise relative agreement where dense eigh still resolves v
        ok = v > 1e-10
        assert np.max(np.abs(p.v[ok] / v[ok] - 1)) <= 1e-6


@given(st.integers(0, 10 ** 9), st.sampled_from([1, 2]), st.floats(0.5, 4.0), st.integers(1, 12))
@settings(max_examples=60, deadline=None)
def test_sandwich_and_positivity(seed, d, excess, R):
    f = PotentialField(seed, d + excess, d)
    p = principal_pair(f, R, tol=1e-10)
    top = p.xi.max()
    assert top - 2 * d - 1e-10 <= p.lam <= top + 1e-10
    assert p.residual <= 1e-10
    assert np.all(p.v > 0) and p.v_at(p.norm_site) == 1.0
    assert p.l2_norm_sq == pytest.approx(float(p.v @ p.v), rel=1e-12)


def test_taboo_lowers_eigenvalue():
    for seed in range(10):
        f = PotentialField(seed, 3.0, 2)
        R = 8
        st_ = box_order_stats(f, R)
        free = principal_pair(f, R, norm_site=st_.argmax1)
        cut = principal_pair(f, R, taboo=[st_.argmax1], norm_site=st_.argmax2)
        assert cut.lam < free.lam
        assert not (cut.sites == np.array(st_.argmax1)).all(axis=1).any()


def test_taboo_component_in_1d():
    f = PotentialField(4, 3.0, 1)
    p = principal_pair(f, 10, taboo=[(3,)], norm_site=(5,))
    assert sorted(int(s[0]) for s in p.sites) == list(range(4, 11))
    with pytest.raises(DomainError):
        principal_pair(f, 10, taboo=[(3,)], norm_site=(3,))


def test_decay_planted():
    Z = (2,)
    f = PlantedField(ConstantField(1.5, d=1), {Z: 1e3})
    p = principal_pair(f, 30, norm_site=Z)
    assert p.v_at(Z) == 1.0
    assert decay_bound_check(p, Z, 1e3 - 1.5) <= 1e-8
    lam, v = eigh_pair_1d(f, 30, Z)
    assert p.lam == pytest.approx(lam, rel=1e-13)
    near = np.abs(np.arange(-30, 31) - Z[0]) <= 3
    assert np.allclose(p.v[near], v[near], rtol=1e-8)


def test_decay_not_applicable():
    f = PlantedField(ConstantField(1.5, d=1), {(0,): 3.0})
    p = principal_pair(f, 10, norm_site=(0,))
    with pytest.raises(NotApplicable):
        decay_bound_check(p, (0,), 1.5)
    g = PlantedField(ConstantField(1.5, d=1), {(0,): 30.0, (4,): 40.0})
    q = principal_pair(g, 10, norm_site=(0,))
    with pytest.raises(NotApplicable):
        decay_bound_check(q, (0,), 10.0)


def test_decay_random_instances():
    """Every applicable instance obeys the bound; collect 100 of them."""
    n = 0
    seed = 0
    while n < 100:
        f = PotentialField(seed, 1.5, 1)
        seed += 1
        R = 30
        st_ = box_order_stats(f, R)
        gap = st_.max1 - st_.max2
        if gap <= 2:
            continue
        p = principal_pair(f, R, norm_site=st_.argmax1)
        assert decay_bound_check(p, st_.argmax1, gap) <= 1e-8
        n += 1


def test_domination_random_fields():
    worst = 0.0
    for seed in range(50):
        f = PotentialField(seed, 4.0, 1)
        Z = box_order_stats(f, 50).argmax1
        dec = decompose(f, 5.0, Z, 50)
        p = principal_pair(f, 50, norm_site=Z)
        worst = max(worst, u3_domination_check(dec, p, Z))
    assert worst <= 1 + 1e-6


def test_domination_planted_far_field():
    Z = (0,)
    f = PlantedField(PotentialField(2, 4.0, 1), {Z: 60.0})
    dec = decompose(f, 5.0, Z, 50)
    p = principal_pair(f, 50, norm_site=Z)
    assert u3_domination_check(dec, p, Z) <= 1 + 1e-6
    # one mode dominates, so u3 is proportional to v and every ratio sits at 1/||v||^2
    far = np.abs(dec.sites_inner[:, 0]) >= 10
    u3z = dec.u3_at(Z)
    ratios = dec.u3[far] / (u3z * p.l2_norm_sq * p.v[np.abs(p.sites[:, 0]) >= 10])
    assert np.max(np.abs(ratios - 1 / p.l2_norm_sq)) <= 1e-6
    assert 1 / p.l2_norm_sq < 1
    with pytest.raises(DomainError):
        u3_domination_check((ball_sites(1, 50), np.zeros(101)), p, Z)


def test_fk_eigenfunction_estimate():
    Z = (0,)
    f = PlantedField(PotentialField(8, 4.0, 1), {Z: 12.0})
    R = 6
    p = principal_pair(f, R, norm_site=Z)
    rng = np.random.default_rng(5)
    assert eigenfunction_fk_estimate(f, R, Z, p.lam, Z, 10, rng) == (1.0, 0.0)
    assert eigenfunction_fk_estimate(f, R, Z, p.lam, (R + 3,), 10, rng) == (0.0, 0.0)
    for z in [(1,), (-1,), (2,)]:
        est, se = eigenfunction_fk_estimate(f, R, Z, p.lam, z, 10 ** 5, rng)
        assert abs(est - p.v_at(z)) <= 3 * se
        assert se > 0


def test_fk_variance_guard():
    f = PlantedField(ConstantField(5.0, d=1), {(0,): 5.1})
    p = principal_pair(f, 5, norm_site=(0,))
    assert p.lam < 5.0
    with pytest.raises(NotApplicable):
        eigenfunction_fk_estimate(f, 5, (0,), p.lam, (1,), 100, np.random.default_rng(0))


def test_profile_csv(tmp_path):
    f = PotentialField(1, 3.0, 2)
    p = principal_pair(f, 4)
    out = tmp_path / "v.csv"
    write_profile(p, out)
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["z1", "z2", "v", "log_v"]
    assert len(rows) == 1 + len(p.v)
    for row, site, vv in zip(rows[1:], p.sites, p.v):
        assert tuple(map(int, row[:2])) == tuple(site)
        assert float(row[2]) == vv
        assert float(row[3]) == pytest.approx(math.log(vv), rel=1e-15)
