"""Day-ahead market equilibrium with strategic renewables, LSE and traders.

The renewable suppliers' symmetric day-ahead curve solves the linearized
first-order condition

    S'(p) - S(p) / (m p) = -G(p),         m = n_suppliers - 1,

whose solution family is S(p; c_s) = p**(1/m) (c_s - int_0^p x**(-1/m) G(x) dx).
G collects the conventional slope and the real-time continuation terms,

    G(p) = C'(p)/m - (A(p) + SHORT(p)) / (m p),

with A(p) = E[(p_s*)' S_i(p_s*) + (p_s*)' p_s* S_i'(p_s*)] per supplier and
SHORT(p) = E[(Q - S(p)) (p_s*)' 1{Q < S(p)}] the shortfall-penalty term
(optional via ``include_shortfall_term``).  Expectations are common-random-
number Monte Carlo over the scenario set, with the real-time stage solved
per scenario and the price derivative by central differences in the
day-ahead price.  The equilibrium constant is the smallest c_s keeping the
curve increasing, mirroring the real-time minimal-constant selection;
the whole thing is iterated to a fixed point because G depends on the
curve through the day-ahead commitments.

The LSE chooses its demand bid by direct cost minimization; virtual DEC
traders play the symmetric flat-bid first-order condition

    b = (E[p_s*] - p_f) (sum_i S_i'(p_f) + C'(p_f) + (N_V - 1) s) / (1 - E[(p_s*)'])

with damping, capped by the bounded-virtual-load condition
N_V b <= C(E[p_s*]).  The infinite-trader path imposes exact price
alignment p_f = E[p_s*] and the closed-form aligned demand
D_l = E[(p_s*)' D] / (E[(p_s*)'] - 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .curves import ConventionalCurve
from .rt_sfe import rt_terms_batch, solve_rt_batch
from .scenarios import ScenarioSet

__all__ = [
    "DAOutcome",
    "DAEquilibrium",
    "RenewableDACurve",
    "MarketSetup",
    "Numerics",
    "DAConvergenceError",
    "clear_da",
    "rt_price_sensitivity",
    "build_G_grid",
    "solve_da_sfe",
    "lse_optimal_demand_no_vt",
    "lse_aligned_demand",
    "virtual_fixed_point",
    "solve_equilibrium",
    "gap_sweep",
    "baseline_no_renewables",
    "vanilla_alignment_price",
    "vanilla_equilibrium",
]

INF_TRADERS = math.inf


class DAConvergenceError(RuntimeError):
    """Fixed point failed to converge; carries the residual history."""

    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


@dataclass
class Numerics:
    """Solver knobs; defaults are the documented desk-scale settings."""

    g_grid_points: int = 24
    g_grid_lo_frac: float = 0.04
    curve_subsample: int = 1200
    fd_step_rel: float = 0.02
    fd_step_min: float = 5e-4
    sensitivity_clip: float = 50.0
    curve_fp_tol: float = 1e-6
    curve_fp_maxiter: int = 50
    curve_damping: float = 0.5
    trader_fp_tol: float = 1e-8
    trader_fp_maxiter: int = 200
    trader_damping: float = 0.5
    lse_grid_points: int = 25
    lse_refine_rel_tol: float = 1e-6
    outer_maxiter: int = 40
    clear_iters: int = 60
    include_shortfall_term: bool = True
    expectation_mode: str = "monte_carlo"  # "semi_analytic" valid for the baseline
    allow_competitive: bool = True
    alignment_tol: float = 1e-7


@dataclass
class MarketSetup:
    """Everything a day-ahead solve needs besides the trader count."""

    curve: ConventionalCurve
    n_suppliers: int
    scenarios: ScenarioSet
    trader_slope: float = 0.0
    numerics: Numerics = field(default_factory=Numerics)

    @property
    def demand_hi(self) -> float:
        return self.scenarios.model.demand.hi

    @property
    def price_cap(self) -> float:
        # the conventional supplier alone serves peak demand at this price,
        # so no clearing price in either market can exceed it
        return self.curve.inverse(self.demand_hi) if self.demand_hi > 0 else self.curve.p_c


@dataclass
class DAOutcome:
    """One cleared day-ahead market."""

    clearing_price: float
    lse_demand: float
    supplier_quantity: float  # per-supplier S(p_f)
    conventional_quantity: float
    virtual_total: float
    n_suppliers: int

    def __post_init__(self):
        lhs = self.n_suppliers * self.supplier_quantity + self.conventional_quantity
        rhs = self.lse_demand + self.virtual_total
        if abs(lhs - rhs) > 1e-8 * max(1.0, abs(rhs)):
            raise ValueError(f"clearing identity violated: supply {lhs} vs demand {rhs}")


@dataclass
class DAEquilibrium:
    supply_constant: float
    supply_grid: np.ndarray  # (K, 2) price, per-supplier quantity
    outcome: DAOutcome
    expected_rt_price: float
    expected_rt_price_se: float
    price_sensitivity: float  # E[(p_s*)'], <= 0
    gap: float
    trader_count: float  # 0, finite, or math.inf
    per_trader_quantity: float
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Renewable day-ahead curve: S(p) = p**(1/m) (c_s - I(p)), I = int x^(-1/m) G
# ---------------------------------------------------------------------------


@dataclass
class RenewableDACurve:
    n_suppliers: int
    c_s: float
    grid_p: np.ndarray  # ascending, positive
    g_grid: np.ndarray  # G at the nodes; linear between, constant outside

    def __post_init__(self):
        self._cum = self._node_cumulative()

    @property
    def m(self) -> int:
        return self.n_suppliers - 1

    @classmethod
    def zero(cls, n_suppliers: int) -> "RenewableDACurve":
        return cls(n_suppliers, 0.0, np.array([1e-6, 1.0]), np.zeros(2))

    def _cell_integral(self, xa, xb, ga, gb):
        """int_xa^xb x**(-1/m) Ghat(x) dx with Ghat linear from ga to gb."""
        m = float(self.m)
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = np.where(xb > xa, (gb - ga) / np.where(xb > xa, xb - xa, 1.0), 0.0)
        beta = ga - alpha * xa
        if m > 1.0:
            e1 = 1.0 - 1.0 / m
            e2 = 2.0 - 1.0 / m
            return alpha * (xb**e2 - xa**e2) / e2 + beta * (xb**e1 - xa**e1) / e1
        return alpha * (xb - xa) + beta * np.log(xb / xa)

    def _node_cumulative(self):
        x = self.grid_p
        g = self.g_grid
        cum = np.zeros(len(x))
        if self.m > 1:
            e1 = 1.0 - 1.0 / self.m
            cum[0] = g[0] * x[0] ** e1 / e1  # exact head from 0 with G constant
        # m == 1 anchors the integral at grid_p[0]; the shift is absorbed in c_s
        segs = self._cell_integral(x[:-1], x[1:], g[:-1], g[1:])
        cum[1:] = cum[0] + np.cumsum(segs)
        return cum

    def integral(self, p):
        """I(p), vectorized, with constant-G extension beyond the grid."""
        p = np.asarray(p, dtype=float)
        x = self.grid_p
        g = self.g_grid
        out = np.zeros(p.shape)
        pos = p > 0.0
        below = pos & (p <= x[0])
        if below.any():
            m = float(self.m)
            if m > 1.0:
                e1 = 1.0 - 1.0 / m
                out[below] = g[0] * p[below] ** e1 / e1
            else:
                out[below] = g[0] * np.log(p[below] / x[0])
        inside = pos & ~below
        if inside.any():
            j = np.clip(np.searchsorted(x, p[inside], side="right") - 1, 0, len(x) - 1)
            xa = x[j]
            inside_hi = j == len(x) - 1  # constant extension above the grid
            gb = np.where(inside_hi, g[-1], g[np.minimum(j + 1, len(x) - 1)])
            xb_node = np.where(inside_hi, np.inf, x[np.minimum(j + 1, len(x) - 1)])
            ga = g[j]
            frac = np.where(
                np.isfinite(xb_node), (p[inside] - xa) / np.where(xb_node > xa, xb_node - xa, 1.0), 0.0
            )
            g_at_p = np.where(np.isfinite(xb_node), ga + (gb - ga) * frac, g[-1])
            out[inside] = self._cum[j] + self._cell_integral(xa, p[inside], ga, g_at_p)
        return out

    def g_at(self, p):
        p = np.asarray(p, dtype=float)
        return np.interp(p, self.grid_p, self.g_grid)

    def value(self, p):
        """Per-supplier day-ahead quantity S(p)."""
        p = np.asarray(p, dtype=float)
        out = np.zeros(p.shape)
        pos = p > 0.0
        if pos.any():
            out[pos] = p[pos] ** (1.0 / self.m) * (self.c_s - self.integral(p[pos]))
        out = np.maximum(out, 0.0)
        return out if out.ndim else float(out)

    def slope(self, p):
        """S'(p) = S/(m p) - G(p) for p > 0."""
        p = np.asarray(p, dtype=float)
        s = np.atleast_1d(np.asarray(self.value(p), dtype=float))
        p1 = np.atleast_1d(p)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(p1 > 0.0, s / (self.m * p1) - self.g_at(p1), np.inf)
        return out if p.ndim else float(out[0])

    def minimal_constant(self, p_lo=None, p_hi=None, refine=8):
        """Smallest c_s keeping S increasing on the grid span."""
        x = self.grid_p
        nodes = np.concatenate(
            [np.geomspace(a, b, refine + 1)[:-1] for a, b in zip(x[:-1], x[1:])] + [x[-1:]]
        )
        t = self.integral(nodes) + self.m * nodes ** (1.0 - 1.0 / self.m) * self.g_at(nodes)
        c = float(t.max())
        if self.m > 1:
            c = max(c, 0.0)  # p -> 0 limit of the monotonicity threshold
        return c

    def with_constant(self, c_s: float) -> "RenewableDACurve":
        return RenewableDACurve(self.n_suppliers, c_s, self.grid_p, self.g_grid)


# ---------------------------------------------------------------------------
# Real-time stage plumbing
# ---------------------------------------------------------------------------


def _rt_stage(setup: MarketSetup, scen: ScenarioSet, pf: float, s_pf: float):
    """Solve the RT stage of every scenario at a common day-ahead price."""
    n = len(scen)
    q = scen.capacity
    delivered = np.minimum(s_pf, q).sum(axis=1) if q.shape[1] else 0.0
    c_pf = setup.curve.quantity(pf)
    d_r = scen.demand - delivered - c_pf
    caps = np.maximum(q - s_pf, 0.0).min(axis=2) if q.shape[1] else np.zeros((n, 0))
    batch = solve_rt_batch(
        setup.curve,
        np.full(n, pf),
        np.full(n, s_pf),
        caps,
        d_r,
        allow_competitive=setup.numerics.allow_competitive,
    )
    return rt_terms_batch(batch, d_r), d_r


def rt_price_sensitivity(setup: MarketSetup, da_curve, p_f: float, h: float = None, scen=None):
    """Scenario-averaged RT price and its day-ahead price derivative.

    Solves the real-time stage at p_f - h and p_f + h (day-ahead quantities
    re-evaluated on the candidate curve) plus the center; returns a dict
    with e_ps, e_dps, standard errors, and the per-(scenario, t) arrays.
    """
    num = setup.numerics
    scen = setup.scenarios if scen is None else scen
    if h is None:
        h = max(num.fd_step_min, num.fd_step_rel * p_f)
    h = min(h, 0.5 * p_f) if p_f > 0 else num.fd_step_min
    if p_f <= 0:
        # day-ahead price pinned at zero: one-sided difference
        lo_p, hi_p = 0.0, num.fd_step_min
    else:
        lo_p, hi_p = p_f - h, p_f + h
    s_val = lambda p: float(da_curve.value(p)) if da_curve is not None else 0.0
    t_lo, _ = _rt_stage(setup, scen, lo_p, s_val(lo_p))
    t_hi, _ = _rt_stage(setup, scen, hi_p, s_val(hi_p))
    t_mid, _ = _rt_stage(setup, scen, p_f, s_val(p_f))
    dps = (t_hi["p_s"] - t_lo["p_s"]) / (hi_p - lo_p)
    # the pathwise derivative exists only while the RT market stays active:
    # cells that flip between Case 1 and Case 2 across the step see a price
    # jump, not a derivative, and are excluded; remaining regime-switch
    # outliers are tail-clipped symmetrically
    flip = (t_hi["p_s"] == 0.0) != (t_lo["p_s"] == 0.0)
    dps = np.where(flip, 0.0, np.clip(dps, -num.sensitivity_clip, num.sensitivity_clip))
    ps = t_mid["p_s"]
    per_scen = ps.mean(axis=1)
    n = len(per_scen)
    return {
        "e_ps": float(per_scen.mean()),
        "e_ps_se": float(per_scen.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        "e_dps": float(dps.mean()),
        "ps": ps,
        "dps": dps,
        "terms": t_mid,
    }


def build_G_grid(setup: MarketSetup, grid: np.ndarray, da_curve: RenewableDACurve, scen=None):
    """G(p) on the grid by Monte Carlo over the scenario subsample.

    Returns (g_values, info) where info carries the per-grid-point
    E[p_s*], E[(p_s*)'] and the shortfall estimates used.
    """
    num = setup.numerics
    scen = setup.scenarios.head(num.curve_subsample) if scen is None else scen
    n_c = len(scen)
    if n_c == 0:
        raise ValueError("empty grid scenario set")
    k = len(grid)
    if k == 0:
        raise ValueError("empty price grid")
    n_sup = setup.n_suppliers
    m = n_sup - 1
    t_steps = scen.demand.shape[1]
    h = np.maximum(num.fd_step_min, num.fd_step_rel * grid)
    h = np.minimum(h, 0.5 * grid)
    q = scen.capacity
    c_slope = np.asarray(setup.curve.slope(grid), dtype=float)

    def stage_rows(p_vec):
        pf_rows = np.repeat(p_vec, n_c)
        s_vals = np.asarray(da_curve.value(p_vec), dtype=float)
        s_rows = np.repeat(s_vals, n_c)
        caps = np.empty((k * n_c, q.shape[1]))
        d_r = np.empty((k * n_c, t_steps))
        c_pf = np.asarray(setup.curve.quantity(p_vec), dtype=float)
        for j in range(k):
            sl = slice(j * n_c, (j + 1) * n_c)
            delivered = np.minimum(s_vals[j], q).sum(axis=1)
            caps[sl] = np.maximum(q - s_vals[j], 0.0).min(axis=2)
            d_r[sl] = scen.demand - delivered - c_pf[j]
        batch = solve_rt_batch(
            setup.curve, pf_rows, s_rows, caps, d_r, allow_competitive=num.allow_competitive
        )
        return rt_terms_batch(batch, d_r)

    t_lo = stage_rows(grid - h)
    t_hi = stage_rows(grid + h)
    t_mid = stage_rows(grid)

    def cube(x):
        return x.reshape(k, n_c, t_steps)

    dps = (cube(t_hi["p_s"]) - cube(t_lo["p_s"])) / (2.0 * h[:, None, None])
    # pathwise derivative: drop Case-flip cells (price jumps, not slopes)
    # and clip the rare remaining regime-switch spikes, which would
    # otherwise dominate G; the true derivative is nonpositive
    flip = (cube(t_hi["p_s"]) == 0.0) != (cube(t_lo["p_s"]) == 0.0)
    dps = np.where(flip, 0.0, np.clip(dps, -num.sensitivity_clip, 0.0))
    ps = cube(t_mid["p_s"])
    renew = cube(t_mid["renew"])
    sum_slope = cube(t_mid["sum_slope"])
    a_term = (dps * renew + dps * ps * sum_slope).mean(axis=(1, 2)) / n_sup
    short = np.zeros(k)
    if num.include_shortfall_term and q.shape[1]:
        s_vals = np.asarray(da_curve.value(grid), dtype=float)
        for j in range(k):
            mask = q < s_vals[j]
            short[j] = ((q - s_vals[j]) * dps[j][:, None, :] * mask).mean()
    g = c_slope / m - (a_term + short) / (m * grid)
    info = {
        "grid": grid.copy(),
        "e_ps": ps.mean(axis=(1, 2)),
        "e_dps": dps.mean(axis=(1, 2)),
        "a_term": a_term,
        "shortfall": short,
    }
    return g, info


def solve_da_sfe(setup: MarketSetup, grid: np.ndarray = None):
    """Fixed point on the renewable day-ahead curve; returns (curve, info).

    Starts from the zero curve, rebuilds G against the implied real-time
    stage, selects the minimal admissible constant, and damps the G update
    until the curve stops moving in sup norm.
    """
    num = setup.numerics
    if setup.n_suppliers < 2:
        raise ValueError("day-ahead SFE needs at least two renewable suppliers")
    if grid is None:
        cap = setup.price_cap
        # below the floor the family's G is extended as a constant: the
        # linearized FOC is singular as p -> 0 and no clearing lands there
        grid = np.geomspace(max(cap * num.g_grid_lo_frac, 2.0 * num.fd_step_min), cap, num.g_grid_points)
    curve = RenewableDACurve.zero(setup.n_suppliers)
    scen = setup.scenarios.head(num.curve_subsample)
    history = []
    g_prev = None
    info = {}
    check = np.geomspace(grid[0], grid[-1], 4 * len(grid))
    damping = num.curve_damping
    for it in range(num.curve_fp_maxiter):
        g_new, info = build_G_grid(setup, grid, curve, scen=scen)
        if g_prev is not None:
            g_new = damping * g_new + (1.0 - damping) * g_prev
        cand = RenewableDACurve(setup.n_suppliers, 0.0, grid, g_new)
        cand = cand.with_constant(cand.minimal_constant())
        delta = float(np.max(np.abs(cand.value(check) - curve.value(check))))
        if history and delta > history[-1]:
            damping = max(0.6 * damping, 0.05)  # slow down when oscillating
        history.append(delta)
        curve = cand
        g_prev = g_new
        if delta <= num.curve_fp_tol:
            break
    else:
        raise DAConvergenceError(
            f"day-ahead curve fixed point did not reach {num.curve_fp_tol} "
            f"in {num.curve_fp_maxiter} iterations",
            history,
        )
    info["fp_history"] = history
    info["iterations"] = len(history)
    return curve, info


# ---------------------------------------------------------------------------
# Clearing and the LSE problem
# ---------------------------------------------------------------------------


def clear_da(da_curve, conventional: ConventionalCurve, d_l: float, virtual=0.0, n_suppliers=0, iters=60):
    """Smallest p with n S(p) + C(p) - B(p) = d_l.

    ``virtual`` is either a constant total bid or a callable B(p) that is
    nonincreasing in p.
    """
    b_fn = virtual if callable(virtual) else (lambda p: virtual)
    if d_l < 0:
        raise ValueError("day-ahead demand must be nonnegative")
    target0 = d_l + b_fn(0.0)
    if target0 <= 0.0:
        return 0.0
    s_fn = (lambda p: 0.0) if da_curve is None else (lambda p: float(da_curve.value(p)))
    hi = float(conventional.inverse(target0)) * (1.0 + 1e-9) + 1e-12
    if n_suppliers * s_fn(hi) + conventional.quantity(hi) - b_fn(hi) < d_l:
        raise DAConvergenceError("no day-ahead clearing price below the conventional cap")
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if n_suppliers * s_fn(mid) + conventional.quantity(mid) - b_fn(mid) >= d_l:
            hi = mid
        else:
            lo = mid
    return hi


def _lse_cost(setup: MarketSetup, da_curve, d_l: float, virtual_total: float, scen=None):
    """LSE objective p_f d_l + E[(D - d_l)^+ p_s], averaged per time step."""
    scen = setup.scenarios if scen is None else scen
    p_f = clear_da(da_curve, setup.curve, d_l, virtual_total, setup.n_suppliers)
    s_pf = float(da_curve.value(p_f)) if da_curve is not None else 0.0
    terms, _ = _rt_stage(setup, scen, p_f, s_pf)
    shortfall = np.maximum(scen.demand - d_l, 0.0)
    rt_cost = float((shortfall * terms["p_s"]).mean())
    return p_f * d_l + rt_cost, p_f


def _golden_min(f, lo, hi, tol):
    """Golden-section minimizer returning the left edge of the final bracket."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return a if f(a) <= min(fc, fd) else (c if fc <= fd else d)


def lse_optimal_demand_no_vt(setup: MarketSetup, da_curve, virtual_total: float = 0.0, scen=None):
    """Grid search plus golden-section refinement of the LSE cost.

    Ties are broken toward the smallest bid (the optimum need not be unique
    without price alignment).  Returns (d_l, cost, p_f).
    """
    num = setup.numerics
    d_hi = setup.demand_hi
    grid = np.linspace(0.0, d_hi, num.lse_grid_points)
    cache = {}

    def cost(d):
        key = round(float(d), 15)
        if key not in cache:
            cache[key] = _lse_cost(setup, da_curve, float(d), virtual_total, scen=scen)
        return cache[key][0]

    vals = np.array([cost(d) for d in grid])
    i = int(np.argmin(vals))  # argmin takes the first (smallest) minimizer
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    tol = max(num.lse_refine_rel_tol * d_hi, 1e-12)
    d_star = _golden_min(cost, lo, hi, tol)
    # prefer a strictly smaller bid when the cost is flat to tolerance
    best_cost = cost(d_star)
    for d in sorted(k for k in cache if k < d_star):
        if cache[d][0] <= best_cost + 1e-12 * max(abs(best_cost), 1.0):
            d_star = d
            break
    c_star, p_f = cache[round(float(d_star), 15)]
    return float(d_star), float(c_star), float(p_f)


def lse_aligned_demand(sens: dict, demand: np.ndarray) -> float:
    """Unique optimal bid under price alignment: E[(p_s)' D]/(E[(p_s)'] - 1)."""
    dps = sens["dps"]
    num = float((dps * demand).mean())
    den = float(dps.mean()) - 1.0
    return num / den


# ---------------------------------------------------------------------------
# Virtual traders
# ---------------------------------------------------------------------------


def virtual_fixed_point(
    n_v: int,
    setup: MarketSetup,
    da_curve,
    d_l: float,
    b_init: float = 0.0,
    scen=None,
):
    """Symmetric flat-bid trader equilibrium at a fixed LSE demand.

    Solves the first-order condition
        b (1 - E[(p_s*)']) = (E[p_s*] - p_f(b)) (sum_i S_i' + C' + (N_V-1) s)
    by bisection on its residual, which is increasing in b because the gap
    shrinks as virtual load pushes the day-ahead price up.  (A damped
    direct iteration on b diverges once N_V is moderately large, since the
    map slope scales with N_V.)  Enforces b >= 0 (DEC side only) and the
    bounded-virtual-load cap N_V b <= C(E[p_s*]).  Returns (b, info).
    """
    if n_v < 1:
        raise ValueError("need at least one virtual trader")
    num = setup.numerics
    scen = setup.scenarios.head(num.curve_subsample) if scen is None else scen
    slope_others = (n_v - 1) * setup.trader_slope

    def residual(b):
        p_f = clear_da(da_curve, setup.curve, d_l, n_v * b, setup.n_suppliers)
        sens = rt_price_sensitivity(setup, da_curve, p_f, scen=scen)
        gap = sens["e_ps"] - p_f
        s_slope = float(da_curve.slope(p_f)) if da_curve is not None else 0.0
        slope_sum = setup.n_suppliers * s_slope + float(setup.curve.slope(p_f)) + slope_others
        return b * (1.0 - sens["e_dps"]) - gap * slope_sum, sens

    r0, sens0 = residual(0.0)
    history = [abs(r0)]
    if r0 >= 0.0:  # no profitable DEC position
        return 0.0, {"history": history, "p_f": clear_da(da_curve, setup.curve, d_l, 0.0, setup.n_suppliers), "capped": False}
    b_cap = float(setup.curve.quantity(sens0["e_ps"])) / n_v + 1e-12
    r_cap, _ = residual(b_cap)
    if r_cap <= 0.0:  # bounded-virtual-load cap binds
        return b_cap, {"history": history, "p_f": clear_da(da_curve, setup.curve, d_l, n_v * b_cap, setup.n_suppliers), "capped": True}
    lo, hi = 0.0, b_cap
    for _ in range(num.trader_fp_maxiter):
        mid = 0.5 * (lo + hi)
        r_mid, _ = residual(mid)
        history.append(hi - lo)
        if r_mid >= 0.0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= num.trader_fp_tol:
            break
    else:
        raise DAConvergenceError(
            f"trader fixed point did not reach {num.trader_fp_tol}", history
        )
    b = 0.5 * (lo + hi)
    p_f = clear_da(da_curve, setup.curve, d_l, n_v * b, setup.n_suppliers)
    return b, {"history": history, "p_f": p_f, "capped": False}


# ---------------------------------------------------------------------------
# Equilibrium orchestration
# ---------------------------------------------------------------------------


def _assemble(setup, da_curve, d_l, b_total, n_v, b_per, sens, diag):
    p_f = clear_da(da_curve, setup.curve, d_l, b_total, setup.n_suppliers)
    s_pf = float(da_curve.value(p_f)) if da_curve is not None else 0.0
    out = DAOutcome(
        clearing_price=p_f,
        lse_demand=d_l,
        supplier_quantity=s_pf,
        conventional_quantity=float(setup.curve.quantity(p_f)),
        virtual_total=setup.n_suppliers * s_pf + float(setup.curve.quantity(p_f)) - d_l,
        n_suppliers=setup.n_suppliers,
    )
    grid = (
        np.column_stack([da_curve.grid_p, np.asarray(da_curve.value(da_curve.grid_p))])
        if da_curve is not None
        else np.zeros((0, 2))
    )
    return DAEquilibrium(
        supply_constant=da_curve.c_s if da_curve is not None else 0.0,
        supply_grid=grid,
        outcome=out,
        expected_rt_price=sens["e_ps"],
        expected_rt_price_se=sens["e_ps_se"],
        price_sensitivity=sens["e_dps"],
        gap=sens["e_ps"] - p_f,
        trader_count=n_v,
        per_trader_quantity=b_per,
        diagnostics=diag,
    )


def solve_equilibrium(setup: MarketSetup, n_v=0, da_curve=None, curve_info=None):
    """Full two-settlement equilibrium for a trader count (0, finite, or inf)."""
    num = setup.numerics
    diag = {}
    if setup.n_suppliers >= 2 and da_curve is None:
        da_curve, curve_info = solve_da_sfe(setup)
    if curve_info:
        diag["curve"] = {k: v for k, v in curve_info.items() if k in ("fp_history", "iterations", "e_dps", "grid")}
    if n_v == 0:
        d_l, cost, p_f = lse_optimal_demand_no_vt(setup, da_curve)
        sens = rt_price_sensitivity(setup, da_curve, p_f)
        diag["lse_cost"] = cost
        return _assemble(setup, da_curve, d_l, 0.0, 0, 0.0, sens, diag)
    if n_v == INF_TRADERS:
        return _solve_aligned(setup, da_curve, diag)
    # finite trader count: alternate the LSE bid and the trader fixed point
    scen = setup.scenarios.head(num.curve_subsample)
    d_l, _, _ = lse_optimal_demand_no_vt(setup, da_curve, 0.0, scen=scen)
    b = 0.0
    d_tol = 2.0 * max(num.lse_refine_rel_tol * setup.demand_hi, 1e-12)
    lam = num.trader_damping  # damped (b, D_l) alternation
    moves = []
    plateau = False
    for it in range(num.outer_maxiter):
        b_new, vinfo = virtual_fixed_point(n_v, setup, da_curve, d_l, b_init=b, scen=scen)
        d_best, _, _ = lse_optimal_demand_no_vt(setup, da_curve, n_v * b_new, scen=scen)
        d_new = lam * d_best + (1.0 - lam) * d_l
        moved_d, moved_b = abs(d_new - d_l), abs(b_new - b)
        moves.append(moved_d)
        b, d_l = b_new, d_new
        if moved_d <= d_tol and moved_b <= max(100.0 * num.trader_fp_tol, 0.5 * d_tol):
            break
        # Monte Carlo argmin jitter bounds the attainable resolution: accept
        # a small non-shrinking cycle and record it rather than iterating out
        if it >= 8 and moved_d <= 5e-3 * setup.demand_hi and moved_d >= 0.5 * min(moves[-5:-1]):
            plateau = True
            break
    else:
        raise DAConvergenceError("outer (demand, bid) alternation did not converge", moves)
    diag["outer_moves"] = moves
    diag["outer_plateau"] = plateau
    p_f = clear_da(da_curve, setup.curve, d_l, n_v * b, setup.n_suppliers)
    sens = rt_price_sensitivity(setup, da_curve, p_f)
    diag["trader"] = vinfo
    diag["bounded_vb_ok"] = n_v * b <= float(setup.curve.quantity(sens["e_ps"])) + 1e-9
    return _assemble(setup, da_curve, d_l, n_v * b, n_v, b, sens, diag)


def _solve_aligned(setup: MarketSetup, da_curve, diag):
    """Infinite-trader path: impose p_f = E[p_s*] and solve for consistency."""
    num = setup.numerics

    def gap_at(p):
        s = rt_price_sensitivity(setup, da_curve, p)
        return s["e_ps"] - p, s

    lo, hi = 0.0, setup.price_cap
    g_lo, sens = gap_at(lo)
    if g_lo <= 0.0:
        p_star, sens_star = lo, sens
    else:
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            g, sens = gap_at(mid)
            if abs(g) <= 0.1 * num.alignment_tol:
                lo = hi = mid
                break
            if g > 0:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-13 * max(hi, 1.0):
                break
        p_star = 0.5 * (lo + hi)
        _, sens_star = gap_at(p_star)
    d_l = max(lse_aligned_demand(sens_star, setup.scenarios.demand), 0.0)
    s_pf = float(da_curve.value(p_star)) if da_curve is not None else 0.0
    b_total = setup.n_suppliers * s_pf + float(setup.curve.quantity(p_star)) - d_l
    diag["alignment_residual"] = sens_star["e_ps"] - p_star
    return _assemble(setup, da_curve, d_l, b_total, INF_TRADERS, 0.0, sens_star, diag)


def gap_sweep(setup: MarketSetup, counts):
    """Equilibrium table across trader counts under common random numbers."""
    rows = []
    da_curve = None
    curve_info = None
    if setup.n_suppliers >= 2:
        da_curve, curve_info = solve_da_sfe(setup)
    for n_v in counts:
        eq = solve_equilibrium(setup, n_v, da_curve=da_curve, curve_info=curve_info)
        rows.append(
            {
                "n_v": n_v,
                "p_f": eq.outcome.clearing_price,
                "e_ps": eq.expected_rt_price,
                "gap": eq.gap,
                "d_l": eq.outcome.lse_demand,
                "b": eq.per_trader_quantity,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# No-renewables baseline (conventional supplier and LSE only)
# ---------------------------------------------------------------------------


def _gauss_legendre_expect(f, lo, hi, width, n=128):
    """int_lo^hi f(x) dx / width for the uniform density."""
    if hi <= lo:
        return 0.0
    x, w = np.polynomial.legendre.leggauss(n)
    xm = 0.5 * (hi + lo) + 0.5 * (hi - lo) * x
    return float(np.sum(w * f(xm)) * 0.5 * (hi - lo) / width)


def _vanilla_e_ps(curve: ConventionalCurve, setup_like, thr: float, mode: str):
    """E[C^-1(D) 1{D > thr}] for the no-renewables world."""
    if mode == "semi_analytic":
        spec = setup_like.scenarios.model.demand
        if spec.family != "uniform":
            raise ValueError("semi-analytic expectations require uniform demand")
        lo, hi = spec.lo, spec.hi
        return _gauss_legendre_expect(
            lambda x: np.asarray(curve.inverse(x)), max(thr, lo), hi, hi - lo
        )
    d = setup_like.scenarios.demand
    return float((np.asarray(curve.inverse(d)) * (d > thr)).mean())


def _vanilla_rt_cost(curve, setup_like, q: float, thr: float, mode: str):
    """E[(D - q)^+ C^-1(D) 1{D > thr}]."""
    if mode == "semi_analytic":
        spec = setup_like.scenarios.model.demand
        lo, hi = spec.lo, spec.hi
        return _gauss_legendre_expect(
            lambda x: (x - q) * np.asarray(curve.inverse(x)),
            max(max(thr, q), lo),
            hi,
            hi - lo,
        )
    d = setup_like.scenarios.demand
    return float((np.maximum(d - q, 0.0) * np.asarray(curve.inverse(d)) * (d > thr)).mean())


def baseline_no_renewables(setup: MarketSetup, mode: str = None):
    """LSE vs conventional only: solves the bid FOC by bisection.

    FOC: C^-1(q) + (C^-1)'(q) q - E[p_s*(q)] = 0 with
    E[p_s*(q)] = E[C^-1(D) 1{D > q}].  Returns (q*, p_f*, E[p_s*]).
    """
    mode = mode or setup.numerics.expectation_mode
    curve = setup.curve

    def foc(q):
        e_ps = _vanilla_e_ps(curve, setup, q, mode)
        inv_slope = float(curve.inverse_slope(max(q, 1e-300))) if q > 0 else 0.0
        return float(curve.inverse(q)) + inv_slope * q - e_ps

    d_hi = setup.demand_hi
    if foc(0.0) >= 0.0:
        q_star = 0.0
    else:
        lo, hi = 0.0, d_hi
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if foc(mid) >= 0.0:
                hi = mid
            else:
                lo = mid
        q_star = 0.5 * (lo + hi)
    p_f = float(curve.inverse(q_star))
    e_ps = _vanilla_e_ps(curve, setup, q_star, mode)
    return q_star, p_f, e_ps


def vanilla_alignment_price(setup: MarketSetup, mode: str = None):
    """Infinite-trader price in the no-renewables world: p = E[p_s*(C(p))]."""
    mode = mode or setup.numerics.expectation_mode
    curve = setup.curve
    lo, hi = 0.0, setup.price_cap

    def gap(p):
        return _vanilla_e_ps(curve, setup, float(curve.quantity(p)), mode) - p

    if gap(lo) <= 0.0:
        return 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gap(mid) <= 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def vanilla_equilibrium(setup: MarketSetup, n_v: int, mode: str = None):
    """Finite-trader no-renewables equilibrium (LSE bid + symmetric DEC bid).

    Alternates the LSE's cost minimization with the damped trader FOC; the
    RT price is C^-1(D) whenever D exceeds the cleared quantity, so the
    price sensitivity E[(p_s*)'] is identically zero here.
    """
    mode = mode or setup.numerics.expectation_mode
    num = setup.numerics
    curve = setup.curve
    d_hi = setup.demand_hi
    slope_others = (n_v - 1) * setup.trader_slope if n_v >= 1 else 0.0

    def lse_best(v_total):
        def cost(q):
            p_f = float(curve.inverse(q + v_total))
            return p_f * q + _vanilla_rt_cost(curve, setup, q, q + v_total, mode)

        grid = np.linspace(0.0, d_hi, num.lse_grid_points)
        vals = [cost(q) for q in grid]
        i = int(np.argmin(vals))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
        return _golden_min(cost, lo, hi, max(num.lse_refine_rel_tol * d_hi, 1e-12))

    def trader_best(d_fix, b_start):
        # bisection on the FOC residual (see virtual_fixed_point)
        def residual(b):
            p_f = float(curve.inverse(d_fix + n_v * b))
            e_ps = _vanilla_e_ps(curve, setup, d_fix + n_v * b, mode)
            slope_sum = float(curve.slope(p_f)) + slope_others
            return b - (e_ps - p_f) * slope_sum, e_ps

        r0, e_ps0 = residual(0.0)
        if r0 >= 0.0:
            return 0.0
        lo, hi = 0.0, float(curve.quantity(e_ps0)) / n_v + 1e-12
        if residual(hi)[0] <= 0.0:
            return hi
        for _ in range(num.trader_fp_maxiter):
            mid = 0.5 * (lo + hi)
            if residual(mid)[0] >= 0.0:
                hi = mid
            else:
                lo = mid
            if hi - lo <= num.trader_fp_tol:
                return 0.5 * (lo + hi)
        raise DAConvergenceError("vanilla trader fixed point did not converge")

    b = 0.0
    d_l = lse_best(0.0)
    if n_v >= 1:
        d_tol = 2.0 * max(num.lse_refine_rel_tol * d_hi, 1e-12)
        if mode == "monte_carlo":
            # the sampled indicator makes the cost a step function, so the
            # argmin is only defined up to the local sample spacing
            d_tol = max(d_tol, 2e-4 * d_hi)
        lam = num.trader_damping  # damped (b, D_l) alternation
        for _ in range(num.outer_maxiter):
            b_new = trader_best(d_l, b)
            d_best = lse_best(n_v * b_new)
            d_new = lam * d_best + (1.0 - lam) * d_l
            moved_d, moved_b = abs(d_new - d_l), abs(b_new - b)
            b, d_l = b_new, d_new
            if moved_d <= d_tol and moved_b <= max(100.0 * num.trader_fp_tol, 0.5 * d_tol):
                break
        else:
            raise DAConvergenceError("vanilla (demand, bid) alternation did not converge")
    p_f = float(curve.inverse(d_l + n_v * b))
    e_ps = _vanilla_e_ps(curve, setup, d_l + n_v * b, mode)
    return {
        "n_v": n_v,
        "d_l": d_l,
        "b": b,
        "p_f": p_f,
        "e_ps": e_ps,
        "gap": e_ps - p_f,
    }
