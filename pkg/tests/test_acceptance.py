"""Acceptance criteria AC1-AC13, one PASS/FAIL line each.

Tolerances and sizes are pinned here.  The localisation threshold was
calibrated on a 40-seed pilot (seeds 90000-90039) disjoint from the seeds
used below, and frozen before the campaign is asserted.
"""
import math
import time

import numpy as np
import pytest

from oracles import path_eigenvalue, shell_integral_numeric
from pamlab.campaigns import CampaignConfig, run_campaign, two_sample_ks
from pamlab.cli import main as cli_main
from pamlab.errors import NotApplicable
from pamlab.evolution import decompose, dense_reference, evolve, feynman_kac_estimate
from pamlab.lattice import ConstantField, PotentialField, box_order_stats
from pamlab.laws import LawsContext, cdf_Y, joint_cdf_Y1Y2, shell_integral
from pamlab.spectral import decay_bound_check, principal_pair, u3_domination_check

# AC10 frozen configuration
LOC_SEEDS = (0, 200)
LOC_T_GRID = [10.0, 50.0, 250.0, 1250.0]
LOC_FINAL_MIN_FRAC_GE_09 = 0.05  # pilot: 0.10 at t = 1250
LOC_BUDGET_S = 30 * 60
# median masses agree with 1 only to the decomposition accuracy
MASS_SLACK = 1e-10


def report(capsys, tag, ok, detail):
    with capsys.disabled():
        print(f"\n{tag} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def test_ac01_normalization(capsys):
    worst, slowest = 0.0, 0.0
    for d, a in [("1", "2"), ("1", "5"), ("2", "5")]:
        t0 = time.perf_counter()
        code = cli_main(["laws", "--d", d, "--alpha", a, "--check-normalization"])
        slowest = max(slowest, time.perf_counter() - t0)
        out = capsys.readouterr().out
        assert code == 0
        # printed as "∫p = <value> ± <max(quadrature error, |value - 1|)>"
        fields = out.split()
        worst = max(worst, abs(float(fields[2]) - 1), float(fields[4]))
    report(capsys, "AC1", worst <= 1e-6 and slowest < 10,
           f"max |int p - 1| incl. quadrature error = {worst:.1e}, slowest run {slowest:.2f} s")


def test_ac02_shell_integral(capsys):
    worst = 0.0
    for d in (1, 2):
        ctx = LawsContext.make(d, 5.0)
        for y in (0.5, 1.0, 2.0):
            num = shell_integral_numeric(y, d, 5.0)
            worst = max(worst, abs(shell_integral(y, ctx) / num - 1))
    report(capsys, "AC2", worst <= 5e-3, f"max relative deviation {worst:.2e}")


def test_ac03_joint_law(capsys):
    worst_diag, worst_jump = 0.0, 0.0
    for d, a in [(1, 5.0), (1, 2.0), (2, 5.0)]:
        ctx = LawsContext.make(d, a)
        for y in np.logspace(-2, 2, 50):
            worst_diag = max(worst_diag, abs(joint_cdf_Y1Y2(y, y, ctx) - cdf_Y(y, ctx)))
            lo, hi = np.nextafter(y, 0), np.nextafter(y, np.inf)
            worst_jump = max(worst_jump, abs(joint_cdf_Y1Y2(y, lo, ctx) - joint_cdf_Y1Y2(y, hi, ctx)))
    report(capsys, "AC3", worst_diag <= 1e-12 and worst_jump <= 1e-12,
           f"diagonal error {worst_diag:.1e}, branch jump {worst_jump:.1e}")


def test_ac04_solver_vs_dense(capsys):
    t0 = time.perf_counter()
    worst_w, worst_m = 0.0, 0.0
    for seed in range(50):
        f = PotentialField(seed, 4.0, 1)
        for t in (1.0, 10.0):
            a = evolve(f, 200, t=t)
            b = dense_reference(f, 200, t=t)
            worst_w = max(worst_w, float(np.max(np.abs(a.w - b.w))))
            worst_m = max(worst_m, abs(a.log_mass - b.log_mass))
    elapsed = time.perf_counter() - t0
    report(capsys, "AC4", worst_w <= 1e-8 and worst_m <= 1e-8 and elapsed < 120,
           f"sup|dw| = {worst_w:.1e}, |d log_mass| = {worst_m:.1e}, {elapsed:.1f} s")


def test_ac05_feynman_kac(capsys):
    worst = 0.0
    for seed in range(20):
        f = PotentialField(seed, 4.0, 1)
        ref = math.exp(dense_reference(f, 30, t=1.0).log_mass)
        est = feynman_kac_estimate(f, (0,), 1.0, 10 ** 5, np.random.default_rng(seed), kill_radius=30)
        worst = max(worst, abs(est.U - ref) / est.U_se)
    report(capsys, "AC5", worst <= 3, f"max |U_mc - U_dense| / se = {worst:.2f} over 20 seeds")


def test_ac06_spectral_sandwich(capsys):
    rng = np.random.default_rng(6)
    worst_res, violations = 0.0, 0
    for i in range(200):
        d = int(rng.integers(1, 3))
        f = PotentialField(10_000 + i, d + float(rng.uniform(0.5, 4.0)), d)
        p = principal_pair(f, int(rng.integers(1, 25 if d == 1 else 10)), tol=1e-10)
        top = p.xi.max()
        worst_res = max(worst_res, p.residual)
        violations += not (top - 2 * d - 1e-10 <= p.lam <= top + 1e-10)
    path_err = max(abs(principal_pair(ConstantField(2.5, d=1), R).lam - path_eigenvalue(2.5, 2 * R + 1))
                   for R in (1, 3, 10, 50, 200))
    report(capsys, "AC6", violations == 0 and worst_res <= 1e-10 and path_err <= 1e-10,
           f"{violations} sandwich violations, max residual {worst_res:.1e}, path error {path_err:.1e}")


def test_ac07_decay(capsys):
    worst, n, seed = -math.inf, 0, 0
    while n < 100:
        f = PotentialField(seed, 1.5, 1)
        seed += 1
        st = box_order_stats(f, 30)
        p = principal_pair(f, 30, norm_site=st.argmax1)
        try:
            worst = max(worst, decay_bound_check(p, st.argmax1, st.max1 - st.max2))
        except NotApplicable:
            continue
        n += 1
    report(capsys, "AC7", worst <= 1e-8, f"max v/bound - 1 = {worst:.2e} over {n} instances ({seed} fields drawn)")


def test_ac08_domination(capsys):
    worst = 0.0
    for seed in range(50):
        f = PotentialField(seed, 4.0, 1)
        Z = box_order_stats(f, 50).argmax1
        dec = decompose(f, 5.0, Z, 50)
        p = principal_pair(f, 50, norm_site=Z)
        worst = max(worst, u3_domination_check(dec, p, Z))
    report(capsys, "AC8", worst <= 1 + 1e-6, f"max u3(z)/(u3(Z)|v|^2 v(z)) = {worst:.6f}")


@pytest.fixture(scope="module")
def localisation(tmp_path_factory):
    cfg = CampaignConfig(kind="localisation", d=1, alpha=4.0, seed_start=LOC_SEEDS[0], seed_count=LOC_SEEDS[1],
                         t_grid=LOC_T_GRID, output=str(tmp_path_factory.mktemp("loc") / "loc"))
    t0 = time.perf_counter()
    res = run_campaign(cfg)
    return res, time.perf_counter() - t0


def test_ac09_decomposition_identity(capsys, localisation):
    res, _ = localisation
    ok = [r for r in res.records if r["ok"] == 1]
    worst = max(r["identity_error"] for r in ok)
    report(capsys, "AC9", worst <= 1e-10 and len(ok) == len(res.records),
           f"max |M1+M2+M3-U|/U = {worst:.1e} over {len(ok)}/{len(res.records)} records")


def _nonincreasing(x, slack=0.0):
    return all(b <= a + slack for a, b in zip(x, x[1:]))


def test_ac10_localisation_trend(capsys, localisation):
    res, elapsed = localisation
    per_t = res.summary["per_t"]
    ratio = [e["ratio_median"] for e in per_t]
    m1 = [e["m1_median"] for e in per_t]
    m2 = [e["m2_median"] for e in per_t]
    final = per_t[-1]["frac_ratio_ge_0_9"]
    checks = dict(
        ratio_nondecreasing=_nonincreasing(ratio[::-1]),
        m1_nonincreasing=_nonincreasing(m1, MASS_SLACK),
        m2_nonincreasing=_nonincreasing(m2, MASS_SLACK),
        final_threshold=final >= LOC_FINAL_MIN_FRAC_GE_09,
        runtime=elapsed < LOC_BUDGET_S,
    )
    detail = (f"median ratio {['%.3g' % v for v in ratio]}, median M1/U {['%.3g' % v for v in m1]}, "
              f"median M2/U {['%.15g' % v for v in m2]}, frac(ratio>=0.9) at t={LOC_T_GRID[-1]:g}: {final:.3f}, "
              f"peak at Z1 {[e['frac_peak_at_Z1'] for e in per_t]}, runtime {elapsed:.0f} s; "
              f"failed: {[k for k, v in checks.items() if not v] or 'none'}")
    report(capsys, "AC10", all(checks.values()), detail)


def _laws(seed_start, n, t_grid, mode="exceedance"):
    cfg = CampaignConfig(kind="laws", d=1, alpha=5.0, seed_start=seed_start, seed_count=n, t_grid=t_grid, mode=mode)
    return run_campaign(cfg)


def test_ac11_limit_law_trend(capsys):
    grid = [1e3, 1e4, 1e5, 1e6]
    reps = [_laws(2000 * k, 2000, grid).summary["per_t"] for k in range(3)]
    med = {key: [float(np.median([rep[i][key] for rep in reps])) for i in range(len(grid))]
           for key in ("ks_Y", "ks_X", "joint_grid_error")}
    dec = lambda x: all(b < a for a, b in zip(x, x[1:]))
    ok = dec(med["ks_Y"]) and dec(med["ks_X"]) and med["joint_grid_error"][-1] < med["joint_grid_error"][0]
    report(capsys, "AC11", ok, "medians over 3 repetitions: " +
           ", ".join(f"{k} {['%.4f' % v for v in vals]}" for k, vals in med.items()))


def test_ac12_mode_equivalence(capsys):
    field = _laws(20_000, 2000, [1e3], mode="field")
    exc = _laws(30_000, 2000, [1e3])
    a = [r["y1"] for r in field.records if r["ok"] == 1]
    b = [r["y1"] for r in exc.records if r["ok"] == 1]
    D, p = two_sample_ks(a, b)
    report(capsys, "AC12", p > 0.01 and len(a) == len(b) == 2000, f"two-sample KS D = {D:.4f}, p = {p:.3f}")


def test_ac13_reproducibility(capsys, tmp_path):
    same = []
    for kind, extra in [("laws", dict(alpha=5.0, mode="exceedance", t_grid=[1e3, 1e5], seed_count=300)),
                        ("localisation", dict(alpha=4.0, t_grid=[10.0, 50.0], seed_count=8)),
                        ("events", dict(alpha=4.0, t_grid=[10.0, 50.0], seed_count=30))]:
        outs = []
        for rep in range(2):
            cfg = CampaignConfig(kind=kind, d=1, seed_start=7, output=str(tmp_path / f"{kind}{rep}"), **extra)
            run_campaign(cfg)
            outs.append((tmp_path / f"{kind}{rep}.csv").read_bytes())
        same.append(outs[0] == outs[1])
    report(capsys, "AC13", all(same), f"byte-identical CSV per kind (laws, localisation, events): {same}")
