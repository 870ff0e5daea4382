import numpy as np
import pytest

from two_settle.curves import ConventionalCurve
from two_settle.da_eq import DAOutcome, MarketSetup
from two_settle.scenarios import DistributionSpec, MarketScenario, ScenarioModel, sample
from two_settle.settlement import settle, settle_batch

AFFINE = ConventionalCurve("affine", a=1.0, p_c=0.0)


def test_lse_payment_and_savings_example():
    # D_l = 0.5, D = 1, p_f = 0.2, p_s = 0.5: LSE pays 0.35, savings 0.15
    da = DAOutcome(0.2, 0.5, 0.3, 0.2, 0.0, 1)
    scen = MarketScenario(np.array([1.0]), np.array([[0.4]]))
    rep = settle(da, scen, np.array([0.5]), np.array([[0.2]]), AFFINE)
    assert rep.lse_total_cost() == pytest.approx(0.35)
    assert rep.lse_savings[0] == pytest.approx(0.15)
    assert rep.aggregates["max_cash_imbalance"] <= 1e-12


def test_case1_no_refunds():
    # demand below the reservation everywhere: only DA flows
    da = DAOutcome(0.3, 0.5, 0.3, 0.2, 0.0, 1)
    scen = MarketScenario(np.array([0.2, 0.25]), np.array([[0.5, 0.5]]))
    rep = settle(da, scen, np.zeros(2), np.zeros((1, 2)), AFFINE)
    assert np.all(rep.case == 1)
    assert np.all(rep.lse_rt_payment == 0.0)
    assert rep.lse_total_cost() == pytest.approx(2 * 0.3 * 0.5)
    assert np.all(rep.supplier_penalty == 0.0)
    assert rep.aggregates["max_cash_imbalance"] <= 1e-12


def test_case1_curtails_conventional_first():
    da = DAOutcome(0.3, 0.5, 0.3, 0.2, 0.0, 1)
    scen = MarketScenario(np.array([0.45, 0.05]), np.array([[0.5, 0.5]]))
    rep = settle(da, scen, np.zeros(2), np.zeros((1, 2)), AFFINE)
    # t=0: excess 0.05 absorbed by the conventional (0.2 committed)
    assert rep.conventional_curtailed[0] == pytest.approx(0.05)
    assert rep.renewable_curtailed[0, 0] == 0.0
    # t=1: excess 0.45 exceeds the conventional commitment; renewables pro rata
    assert rep.conventional_curtailed[1] == pytest.approx(0.2)
    assert rep.renewable_curtailed[0, 1] == pytest.approx(0.25)


def test_shortfall_penalty_example():
    # commitment 0.5, realized 0.3, p_s = 0.4: penalty 0.08
    da = DAOutcome(0.1, 1.3, 0.5, 0.0, 0.2, 3)
    scen = MarketScenario(
        np.array([2.0]), np.array([[0.3], [0.6], [0.9]])
    )
    rep = settle(da, scen, np.array([0.4]), np.array([[0.0], [0.1], [0.1]]), AFFINE, 2, 0.1)
    assert rep.supplier_penalty[0, 0] == pytest.approx(0.08)
    assert rep.supplier_penalty[1, 0] == 0.0  # strategic: covers commitment


def test_trader_pnl_is_gap_times_quantity():
    da = DAOutcome(0.2, 0.4, 0.3, 0.2, 0.1, 1)
    scen = MarketScenario(np.array([0.9]), np.array([[0.8]]))
    rep = settle(da, scen, np.array([0.5]), np.array([[0.3]]), AFFINE, 2, 0.05)
    pnl = rep.trader_rt_revenue - rep.trader_da_payment
    assert pnl[0] == pytest.approx((0.5 - 0.2) * 0.1)


def test_settle_batch_zero_sum_and_identity():
    model = ScenarioModel(
        time_steps=6,
        n_suppliers=3,
        demand=DistributionSpec("uniform", 0.6, 1.4, rho=0.8),
        capacity=DistributionSpec("uniform", 0.4, 0.8, rho=0.8),
        seed=23,
    )
    scen = sample(model, 200)
    setup = MarketSetup(curve=AFFINE, n_suppliers=3, scenarios=scen)
    da = DAOutcome(0.02, 0.92, 0.3, 0.02, 0.0, 3)
    reports = settle_batch(setup, da, scen)
    assert max(r.aggregates["max_cash_imbalance"] for r in reports) <= 1e-10
    for i, r in enumerate(reports):
        c2 = r.case == 2
        lhs = (r.lse_da_payment + r.lse_rt_payment)[c2]
        rhs = (r.p_s * scen.demand[i] - (r.p_s - r.p_f) * da.lse_demand)[c2]
        assert np.allclose(lhs, rhs, atol=1e-12)


def test_settle_batch_workers_identical():
    model = ScenarioModel(
        time_steps=4,
        n_suppliers=2,
        demand=DistributionSpec("uniform", 0.5, 1.2),
        capacity=DistributionSpec("uniform", 0.3, 0.7),
        seed=5,
    )
    scen = sample(model, 60)
    setup = MarketSetup(curve=AFFINE, n_suppliers=2, scenarios=scen)
    da = DAOutcome(0.05, 0.7, 0.35, 0.05, 0.05, 2)
    a = settle_batch(setup, da, scen, workers=1)
    b = settle_batch(setup, da, scen, workers=4)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.p_s, rb.p_s)
        assert np.array_equal(ra.lse_rt_payment, rb.lse_rt_payment)
        assert np.array_equal(ra.supplier_rt_revenue, rb.supplier_rt_revenue)


def test_dimension_mismatch():
    da = DAOutcome(0.2, 0.5, 0.3, 0.2, 0.0, 1)
    scen = MarketScenario(np.array([1.0, 1.0]), np.array([[0.4, 0.4]]))
    with pytest.raises(ValueError):
        settle(da, scen, np.array([0.5]), np.array([[0.3, 0.3]]), AFFINE)


def test_settlement_with_aggregate_virtual_load():
    # infinite-trader outcomes carry the DEC mass in virtual_total with
    # per-trader quantity zero; cash must still conserve
    model = ScenarioModel(
        time_steps=4,
        n_suppliers=2,
        demand=DistributionSpec("uniform", 0.5, 1.2),
        capacity=DistributionSpec("uniform", 0.3, 0.7),
        seed=9,
    )
    scen = sample(model, 80)
    setup = MarketSetup(curve=AFFINE, n_suppliers=2, scenarios=scen)
    da = DAOutcome(0.05, 0.55, 0.35, 0.05, 0.2, 2)
    reports = settle_batch(setup, da, scen)  # n_traders defaults to 0
    assert max(r.aggregates["max_cash_imbalance"] for r in reports) <= 1e-10
    assert all(r.trader_da_payment[0] == pytest.approx(0.05 * 0.2) for r in reports)
