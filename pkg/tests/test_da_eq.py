import math

import numpy as np
import pytest

from two_settle import da_eq
from two_settle.curves import ConventionalCurve
from two_settle.da_eq import (
    DAOutcome,
    MarketSetup,
    RenewableDACurve,
    baseline_no_renewables,
    clear_da,
    lse_aligned_demand,
    rt_price_sensitivity,
    solve_da_sfe,
    vanilla_alignment_price,
    vanilla_equilibrium,
)
from two_settle.scenarios import DistributionSpec, ScenarioModel, sample

AFFINE = ConventionalCurve("affine", a=1.0, p_c=0.0)


def small_setup(n=300, t=8, seed=17, d=(0.6, 1.4), q=(0.4, 0.8), n_sup=3, **num):
    model = ScenarioModel(
        time_steps=t,
        n_suppliers=n_sup,
        demand=DistributionSpec("uniform", d[0], d[1], rho=0.8),
        capacity=DistributionSpec("uniform", q[0], q[1], rho=0.8),
        seed=seed,
    )
    setup = MarketSetup(curve=AFFINE, n_suppliers=n_sup, scenarios=sample(model, n))
    setup.numerics.curve_subsample = min(n, 200)
    setup.numerics.g_grid_points = 14
    for k, v in num.items():
        setattr(setup.numerics, k, v)
    return setup


def vanilla_setup(n=500, lo=0.0, hi=1.0, seed=7):
    model = ScenarioModel(
        time_steps=8,
        n_suppliers=0,
        demand=DistributionSpec("uniform", lo, hi),
        capacity=DistributionSpec("uniform", 0.0, 0.5),
        seed=seed,
    )
    return MarketSetup(curve=AFFINE, n_suppliers=0, scenarios=sample(model, n))


def test_da_outcome_clearing_identity():
    DAOutcome(0.3, 0.2, 0.0, 0.3, 0.1, 0)
    with pytest.raises(ValueError):
        DAOutcome(0.3, 1.0, 0.0, 0.3, 0.0, 0)


def test_clear_da_examples():
    # S == 0, B == 0, affine C, D_l = 0.3  ->  p = 0.3
    assert clear_da(None, AFFINE, 0.3) == pytest.approx(0.3, abs=1e-10)
    assert clear_da(None, AFFINE, 0.0) == 0.0
    # constant virtual load shifts the quantity through C
    assert clear_da(None, AFFINE, 0.3, virtual=0.1) == pytest.approx(0.4, abs=1e-10)


def test_clear_da_with_renewable_curve():
    curve = RenewableDACurve(3, 2.0, np.geomspace(1e-3, 1.0, 12), np.full(12, 0.5))
    d_l = 0.8
    p = clear_da(curve, AFFINE, d_l, 0.0, 3)
    total = 3 * float(curve.value(p)) + AFFINE.quantity(p)
    assert total == pytest.approx(d_l, abs=1e-8)


def test_g_grid_case1_only_exact():
    # against a curve that always covers demand there is no RT activity at
    # any probed price, so G reduces exactly to C'/(N_S - 1) = 1/2
    setup = small_setup(d=(0.2, 0.5), q=(2.0, 3.0), n=100, t=4)
    generous = RenewableDACurve(3, 4.0, np.geomspace(1e-2, 1.0, 8), np.zeros(8))
    grid = np.geomspace(0.05, 1.0, 10)
    g, info = da_eq.build_G_grid(setup, grid, generous)
    assert np.allclose(info["e_ps"], 0.0)
    assert np.allclose(g, 0.5, atol=1e-14)


def test_da_family_case1_only_analytic():
    # no RT activity at the solved curve: the family collapses to
    # S = sqrt(p) (c_s - sqrt(p)) with minimal c_s = 2 sqrt(p_max), i.e.
    # S = 2 sqrt(p p_max) - p (damping keeps ~fp-tol memory of iteration 1)
    setup = small_setup(d=(0.05, 0.2), q=(1.5, 2.0), n=120, t=4)
    curve, info = solve_da_sfe(setup)
    assert np.allclose(info["e_ps"], 0.0)
    p_max = curve.grid_p[-1]
    assert np.allclose(curve.g_grid, 0.5, atol=5e-4)
    p = np.geomspace(curve.grid_p[0], p_max, 50)
    want = 2.0 * np.sqrt(p * p_max) - p
    assert np.allclose(np.asarray(curve.value(p)), want, atol=2e-3)


def test_da_curve_slope_matches_fd():
    grid = np.geomspace(1e-2, 1.0, 16)
    curve = RenewableDACurve(3, 1.8, grid, 0.5 - 0.2 * np.log(grid / grid[-1]))
    p = np.linspace(0.05, 0.9, 21)
    h = 1e-7
    fd = (np.asarray(curve.value(p + h)) - np.asarray(curve.value(p - h))) / (2 * h)
    assert np.allclose(curve.slope(p), fd, rtol=1e-5, atol=1e-7)


def test_two_supplier_family_any_constant_is_zero_at_origin():
    grid = np.geomspace(1e-3, 1.0, 10)
    for c_s in (0.0, 0.7, 3.0):
        curve = RenewableDACurve(2, c_s, grid, np.full(10, 0.9))
        assert float(curve.value(1e-12)) == pytest.approx(0.0, abs=1e-9)


def test_sensitivity_no_renewables_is_zero():
    setup = vanilla_setup()
    sens = rt_price_sensitivity(setup, None, 0.3)
    assert sens["e_dps"] == pytest.approx(0.0, abs=1e-9)
    assert sens["e_ps"] > 0


def test_sensitivity_all_case1_zero():
    setup = small_setup(d=(0.01, 0.05), q=(1.5, 2.0), n=80, t=4)
    curve, _ = solve_da_sfe(setup)
    sens = rt_price_sensitivity(setup, curve, 0.4)
    assert sens["e_ps"] == 0.0
    assert sens["e_dps"] == 0.0


def test_sensitivity_negative_with_binding_commitments():
    setup = small_setup(n=200)
    curve, _ = solve_da_sfe(setup)
    # low DA price: commitments bind and the RT market is active
    sens = rt_price_sensitivity(setup, curve, 0.02)
    assert sens["e_dps"] < 0
    # halving the step reproduces the sign (the example's own oracle)
    sens2 = rt_price_sensitivity(setup, curve, 0.02, h=setup.numerics.fd_step_min / 2)
    assert sens2["e_dps"] < 0


def test_aligned_demand_examples():
    demand = np.full((4, 3), 0.8)
    # (p_s)' == 0 -> 0
    assert lse_aligned_demand({"dps": np.zeros((4, 3))}, demand) == 0.0
    # (p_s)' == -1, D == dbar -> dbar / 2
    assert lse_aligned_demand({"dps": -np.ones((4, 3))}, demand) == pytest.approx(0.4)
    # (p_s)' == -1, D ~ U[0,1] -> 1/4
    rng = np.random.default_rng(0)
    d = rng.uniform(0, 1, size=(200_000, 1))
    got = lse_aligned_demand({"dps": -np.ones_like(d)}, d)
    assert got == pytest.approx(0.25, abs=2e-3)


def test_baseline_examples():
    setup = vanilla_setup()
    q, p_f, e_ps = baseline_no_renewables(setup, mode="semi_analytic")
    assert q == pytest.approx(math.sqrt(5) - 2, abs=1e-9)
    assert p_f == pytest.approx(0.2360679774997897, abs=1e-7)
    assert e_ps == pytest.approx(0.4721359549995794, abs=1e-7)
    assert e_ps == pytest.approx(2 * q, abs=1e-8)
    # degenerate demand at zero: no market
    setup0 = vanilla_setup(lo=0.0, hi=0.0)
    q0, p0, e0 = baseline_no_renewables(setup0, mode="monte_carlo")
    assert q0 == 0.0 and e0 == 0.0


def test_vanilla_alignment_example():
    setup = vanilla_setup()
    p = vanilla_alignment_price(setup, mode="semi_analytic")
    assert p == pytest.approx(math.sqrt(2) - 1, abs=1e-9)


def test_trader_foc_example():
    # gap 0.1, slope sum 2, E[(p_s)'] = -1, s = 0  ->  b = 0.1
    gap, slope_sum, e_dps = 0.1, 2.0, -1.0
    b = gap * slope_sum / (1.0 - e_dps)
    assert b == pytest.approx(0.1)


def test_trader_zero_at_nonpositive_gap():
    # all-Case-1 world: E[p_s] = 0, so the margin is nonpositive and the
    # fixed point returns b = 0 immediately
    setup = small_setup(d=(0.05, 0.2), q=(1.5, 2.0), n=80, t=4)
    curve, _ = solve_da_sfe(setup)
    b, info = da_eq.virtual_fixed_point(4, setup, curve, d_l=0.15)
    assert b == 0.0 and not info["capped"]


def test_vanilla_sweep_monotone_small():
    setup = vanilla_setup()
    rows = [vanilla_equilibrium(setup, n, mode="semi_analytic") for n in (2, 8, 32)]
    gaps = [r["gap"] for r in rows]
    assert gaps[0] > gaps[1] > gaps[2] > 0


def test_gap_sweep_renewables_small():
    setup = small_setup(n=200, t=6)
    rows = da_eq.gap_sweep(setup, [0, 2, da_eq.INF_TRADERS])
    assert rows[0]["gap"] > 0
    assert abs(rows[2]["gap"]) <= 1e-6
    assert rows[1]["gap"] <= rows[0]["gap"] + 1e-9
    assert rows[2]["d_l"] <= rows[0]["d_l"] + 1e-9


def test_solve_da_sfe_fixed_point_idempotent():
    setup = small_setup(n=150, t=4)
    curve, info = solve_da_sfe(setup)
    # re-running from the converged curve's G only nudges it below tolerance
    g2, _ = da_eq.build_G_grid(setup, curve.grid_p, curve)
    cand = RenewableDACurve(3, 0.0, curve.grid_p, g2)
    cand = cand.with_constant(cand.minimal_constant())
    check = np.geomspace(curve.grid_p[0], curve.grid_p[-1], 64)
    delta = np.max(np.abs(np.asarray(cand.value(check)) - np.asarray(curve.value(check))))
    assert delta <= 4 * setup.numerics.curve_fp_tol


def test_equilibrium_payload_consistency():
    setup = small_setup(n=150, t=4)
    eq = da_eq.solve_equilibrium(setup, 0)
    out = eq.outcome
    assert out.n_suppliers * out.supplier_quantity + out.conventional_quantity == pytest.approx(
        out.lse_demand + out.virtual_total, abs=1e-8
    )
    assert eq.gap == pytest.approx(eq.expected_rt_price - out.clearing_price, abs=1e-12)


def test_vanilla_equilibrium_zero_traders_matches_baseline():
    # independent routes: grid+golden cost minimization vs the FOC bisection
    setup = vanilla_setup()
    row = vanilla_equilibrium(setup, 0, mode="semi_analytic")
    q, p_f, e_ps = baseline_no_renewables(setup, mode="semi_analytic")
    assert row["d_l"] == pytest.approx(q, abs=5e-6)
    assert row["p_f"] == pytest.approx(p_f, abs=5e-6)


def test_da_curve_satisfies_reduced_ode():
    # residual of S\' - S/(m p) + G(p) on a random curve, derivative by
    # central differences (independent of the slope formula)
    grid = np.geomspace(2e-2, 1.0, 18)
    g_vals = 0.4 + 0.3 * np.sin(np.linspace(0, 2, 18))
    curve = RenewableDACurve(3, 0.0, grid, g_vals)
    curve = curve.with_constant(curve.minimal_constant() + 0.2)
    p = np.geomspace(0.05, 0.9, 40)
    h = 1e-6 * p
    fd = (np.asarray(curve.value(p + h)) - np.asarray(curve.value(p - h))) / (2 * h)
    resid = fd - np.asarray(curve.value(p)) / (curve.m * p) + curve.g_at(p)
    assert np.max(np.abs(resid)) <= 1e-5
