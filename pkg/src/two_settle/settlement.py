"""Two-stage settlement of realized scenarios against a day-ahead outcome.

Case 1 (residual demand <= 0): the ISO curtails the conventional supplier
first, then renewables pro rata by commitment; day-ahead payments stand
(no refunds) and no penalties are charged.  Case 2: the LSE settles its
full imbalance D(t) - D_l at the RT price, strategic suppliers sell their
incremental quantities, nonstrategic suppliers buy back any commitment
shortfall at the RT price, the conventional supplier delivers the
remainder, and DEC traders cash-settle (p_s - p_f) b.

Cash flows are zero-sum by construction: the ISO is a pure clearinghouse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .curves import ConventionalCurve
from .rt_sfe import rt_terms_batch, solve_rt_batch

__all__ = ["SettlementReport", "settle", "settle_batch", "ScenarioBlock"]


class ScenarioBlock:
    """Contiguous read-only view of a scenario set (for worker splits)."""

    def __init__(self, base, start, stop):
        self.base = base
        self.start = start
        self.stop = stop
        self.demand = base.demand[start:stop]
        self.capacity = base.capacity[start:stop]

    def __len__(self):
        return self.stop - self.start

    def __getitem__(self, i):
        return self.base[self.start + i]


@dataclass
class SettlementReport:
    """Per-step cash flows and quantities for one settled scenario."""

    case: np.ndarray  # (T,) 1 or 2
    p_f: float
    p_s: np.ndarray  # (T,)
    lse_da_payment: np.ndarray
    lse_rt_payment: np.ndarray  # signed: negative when selling back surplus
    supplier_da_revenue: np.ndarray  # (N, T)
    supplier_rt_revenue: np.ndarray  # (N, T)
    supplier_penalty: np.ndarray  # (N, T)
    conventional_da_revenue: np.ndarray
    conventional_rt_revenue: np.ndarray
    conventional_curtailed: np.ndarray
    renewable_curtailed: np.ndarray  # (N, T)
    trader_da_payment: np.ndarray  # (T,) total over traders
    trader_rt_revenue: np.ndarray
    lse_savings: np.ndarray  # (p_s - p_f) D_l per t
    aggregates: dict = field(default_factory=dict)

    def cash_imbalance(self) -> np.ndarray:
        """Per-t net of all payments minus all revenues; 0 for a clearinghouse."""
        inflow = (
            self.lse_da_payment
            + self.lse_rt_payment
            + self.trader_da_payment
            + self.supplier_penalty.sum(axis=0)
        )
        outflow = (
            self.supplier_da_revenue.sum(axis=0)
            + self.supplier_rt_revenue.sum(axis=0)
            + self.conventional_da_revenue
            + self.conventional_rt_revenue
            + self.trader_rt_revenue
        )
        return inflow - outflow

    def lse_total_cost(self) -> float:
        return float((self.lse_da_payment + self.lse_rt_payment).sum())


def settle(
    da,
    scenario,
    rt_prices,
    rt_sales,
    curve: ConventionalCurve,
    n_traders: int = 0,
    per_trader_quantity: float = 0.0,
) -> SettlementReport:
    """Settle one scenario.

    rt_prices is (T,), rt_sales is (N, T) per-supplier incremental RT sales
    (zero rows for nonstrategic suppliers).
    """
    demand = np.asarray(scenario.demand_path, dtype=float)
    q = np.asarray(scenario.capacity_paths, dtype=float)
    t_n = demand.shape[0]
    n_sup = q.shape[0]
    p_s = np.asarray(rt_prices, dtype=float)
    sales = np.asarray(rt_sales, dtype=float).reshape(n_sup, t_n) if n_sup else np.zeros((0, t_n))
    if p_s.shape[0] != t_n:
        raise ValueError("rt_prices length does not match the scenario")
    p_f = float(da.clearing_price)
    d_l = float(da.lse_demand)
    s_pf = float(da.supplier_quantity)
    c_pf = float(da.conventional_quantity)
    # cash follows the cleared virtual load: the infinite-trader path has
    # per-trader quantity 0 but a positive aggregate DEC position
    b_total = float(getattr(da, "virtual_total", n_traders * per_trader_quantity))

    committed = np.minimum(s_pf, q) if n_sup else np.zeros((0, t_n))
    d_r = demand - committed.sum(axis=0) - c_pf
    case = np.where(d_r > 0.0, 2, 1).astype(np.int8)
    caps = np.maximum(q - s_pf, 0.0).min(axis=1) if n_sup else np.zeros(0)
    nonstrategic = caps <= 0.0

    lse_da = np.full(t_n, p_f * d_l)
    lse_rt = np.where(case == 2, p_s * (demand - d_l), 0.0)
    sup_da = np.full((n_sup, t_n), p_f * s_pf)
    sup_rt = np.where(case[None, :] == 2, sales * p_s[None, :], 0.0)
    shortfall = np.maximum(s_pf - q, 0.0) if n_sup else np.zeros((0, t_n))
    penalty = np.where(
        (case[None, :] == 2) & nonstrategic[:, None], shortfall * p_s[None, :], 0.0
    )
    conv_da = np.full(t_n, p_f * c_pf)
    cbar = np.maximum(np.asarray(curve.quantity(p_s)), c_pf)
    conv_rt = np.where(case == 2, (cbar - c_pf) * p_s, 0.0)

    # Case-1 curtailment: conventional first, then renewables pro rata
    excess = np.where(case == 1, -d_r, 0.0)
    conv_curt = np.minimum(excess, c_pf)
    rem = excess - conv_curt
    committed_total = committed.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        shrink = np.where(committed_total > 0.0, rem / committed_total, 0.0)
    ren_curt = committed * shrink[None, :]

    trader_da = np.full(t_n, p_f * b_total)
    trader_rt = p_s * b_total
    savings = (p_s - p_f) * d_l

    rep = SettlementReport(
        case=case,
        p_f=p_f,
        p_s=p_s,
        lse_da_payment=lse_da,
        lse_rt_payment=lse_rt,
        supplier_da_revenue=sup_da,
        supplier_rt_revenue=sup_rt,
        supplier_penalty=penalty,
        conventional_da_revenue=conv_da,
        conventional_rt_revenue=conv_rt,
        conventional_curtailed=conv_curt,
        renewable_curtailed=ren_curt,
        trader_da_payment=trader_da,
        trader_rt_revenue=trader_rt,
        lse_savings=savings,
    )
    rep.aggregates = {
        "lse_total_cost": rep.lse_total_cost(),
        "lse_total_savings": float(np.where(case == 2, savings, 0.0).sum()),
        "supplier_total_revenue": float(sup_da.sum() + sup_rt.sum() - penalty.sum()),
        "conventional_total_revenue": float(conv_da.sum() + conv_rt.sum()),
        "trader_total_pnl": float((trader_rt - trader_da).sum()),
        "max_cash_imbalance": float(np.abs(rep.cash_imbalance()).max()),
        "case2_steps": int((case == 2).sum()),
    }
    return rep


def settle_batch(
    setup,
    da,
    scenarios,
    n_traders: int = 0,
    per_trader_quantity: float = 0.0,
    workers: int = 1,
):
    """Solve the RT stage and settle every scenario in the set.

    Returns a list of SettlementReport, one per scenario.  ``workers``
    splits the set into contiguous blocks processed concurrently; results
    are merged in scenario order and identical for any worker count.
    """
    if workers > 1 and len(scenarios) > workers:
        from concurrent.futures import ThreadPoolExecutor

        bounds = np.linspace(0, len(scenarios), workers + 1).astype(int)
        blocks = [
            ScenarioBlock(scenarios, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a
        ]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(
                pool.map(
                    lambda blk: settle_batch(
                        setup, da, blk, n_traders, per_trader_quantity, workers=1
                    ),
                    blocks,
                )
            )
        return [rep for part in parts for rep in part]
    n = len(scenarios)
    q = scenarios.capacity
    t_n = scenarios.demand.shape[1]
    s_pf = float(da.supplier_quantity)
    p_f = float(da.clearing_price)
    delivered = np.minimum(s_pf, q).sum(axis=1) if q.shape[1] else np.zeros((n, t_n))
    d_r = scenarios.demand - delivered - float(da.conventional_quantity)
    caps = np.maximum(q - s_pf, 0.0).min(axis=2) if q.shape[1] else np.zeros((n, 0))
    batch = solve_rt_batch(
        setup.curve,
        np.full(n, p_f),
        np.full(n, s_pf),
        caps,
        d_r,
        allow_competitive=setup.numerics.allow_competitive,
    )
    terms = rt_terms_batch(batch, d_r)
    p_s = terms["p_s"]
    sig = terms["sig"]
    cbar_inc = np.maximum(np.asarray(setup.curve.quantity(p_s)) - float(da.conventional_quantity), 0.0)
    reports = []
    for i in range(n):
        cap_i = caps[i][:, None] if q.shape[1] else np.zeros((0, 1))
        sales = np.minimum(sig[i][None, :], cap_i) if q.shape[1] else np.zeros((0, t_n))
        sales = np.maximum(sales, 0.0)
        if q.shape[1]:
            # when clearing lands on the final cap discontinuity the supply
            # jump overshoots residual demand; the ISO rations the largest
            # (marginal) suppliers so delivered RT energy balances exactly
            excess = np.maximum(sales.sum(axis=0) + cbar_inc[i] - np.maximum(d_r[i], 0.0), 0.0)
            excess = np.where(d_r[i] > 0.0, excess, 0.0)
            order = np.argsort(caps[i])[::-1]
            for j in order:
                if not excess.any():
                    break
                take = np.minimum(excess, sales[j])
                sales[j] -= take
                excess -= take
        reports.append(
            settle(
                da,
                scenarios[i],
                p_s[i],
                sales,
                setup.curve,
                n_traders=n_traders,
                per_trader_quantity=per_trader_quantity,
            )
        )
    return reports
