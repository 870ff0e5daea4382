import numpy as np
import pytest

from two_settle.curves import ConventionalCurve, EffectiveRTCurve, sigma_val
from two_settle.rt_sfe import (
    MODE_COMPETITIVE,
    MODE_NO_RT,
    MODE_SFE,
    ResidualState,
    RTSolveError,
    StitchInvalid,
    best_response_check,
    clear_rt,
    clear_rt_all,
    residual_state,
    rt_payoff,
    solve_rt_sfe,
    stitch_candidate,
)
from two_settle.scenarios import MarketScenario


AFFINE = ConventionalCurve("affine", a=1.0, p_c=0.0)
EFF0 = EffectiveRTCurve(AFFINE, 0.0)


def make_state(d_r, caps, pf=0.0, s_pf=0.0):
    return ResidualState(
        residual_demand=np.asarray(d_r, dtype=float),
        residual_caps=np.asarray(caps, dtype=float),
        da_price=pf,
        da_supplier_quantity=s_pf,
        da_conventional=float(AFFINE.quantity(pf)),
    )


class FakeDA:
    def __init__(self, p_f, s, c):
        self.clearing_price = p_f
        self.supplier_quantity = s
        self.conventional_quantity = c


def test_residual_state_examples():
    scen = MarketScenario(np.array([2.0, 2.0]), np.array([[1.5, 1.2]]))
    rs = residual_state(scen, FakeDA(0.1, 1.0, 0.0))
    assert rs.residual_caps[0] == pytest.approx(0.2)
    scen2 = MarketScenario(np.array([2.0, 2.0]), np.array([[0.8, 1.4]]))
    rs2 = residual_state(scen2, FakeDA(0.1, 1.0, 0.0))
    assert rs2.residual_caps[0] == 0.0
    # exactly-cleared demand leaves no residual: Case-1 signal
    scen3 = MarketScenario(np.array([1.0, 1.0]), np.array([[2.0, 2.0], [2.0, 2.0]]))
    rs3 = residual_state(scen3, FakeDA(0.2, 0.4, 0.2))
    assert rs3.max_residual <= 0.0


def test_stitch_candidate_invalid_example():
    # N=3, caps (1,2,3), Cbar' = 1, c1=2: branch 2 turns at p=1 below cap 2
    rs = make_state([6.0, 0.0], [1.0, 2.0, 3.0])
    out = stitch_candidate(2.0, rs, EFF0)
    assert isinstance(out, StitchInvalid)
    assert out.branch == 2


def test_stitch_candidate_idempotent_at_solution():
    rs = make_state([6.0, 0.0], [1.0, 2.0, 3.0])
    sol = solve_rt_sfe(rs, EFF0)
    again = stitch_candidate(float(sol._batch.c1[0]), rs, EFF0)
    assert not isinstance(again, StitchInvalid)
    assert np.allclose(again.breakpoints, sol.breakpoints)
    assert np.allclose(again.constants, sol.constants)


def test_minimal_constant_certificate():
    rs = make_state([6.0, 0.0], [1.0, 2.0, 3.0])
    sol = solve_rt_sfe(rs, EFF0)
    c1 = float(sol._batch.c1[0])
    assert isinstance(stitch_candidate(c1 * (1 - 1e-3), rs, EFF0), StitchInvalid)
    # the binding branch is tangent: c2 = ln(2) + 1 exactly
    assert sol.constants[1] == pytest.approx(np.log(2.0) + 1.0, abs=1e-7)


def test_minimal_c1_matches_grid_oracle_two_suppliers():
    # single branch (N=2): compare against a dense independent scan
    rs = make_state([2.5, 0.0], [0.7, 1.4])
    sol = solve_rt_sfe(rs, EFF0)
    c_grid = np.linspace(0.05, 6.0, 40000)

    def valid(c):
        # sigma = p (c - ln p); need monotone attainment of cap 0.7
        p = np.geomspace(1e-6, 10.0, 2000)
        v = sigma_val(AFFINE, np.zeros_like(p), np.ones_like(p), np.full_like(p, c), p)
        prev = -np.inf
        for val in v:
            if val < prev - 1e-12:
                return False
            prev = val
            if val >= 0.7:
                return True
        return False

    first = c_grid[next(i for i, c in enumerate(c_grid) if valid(c))]
    assert float(sol._batch.c1[0]) == pytest.approx(first, abs=2e-4)


def test_solve_signals():
    # Case 1 everywhere: no RT market
    rs = make_state([-0.5, 0.0], [1.0, 2.0, 3.0])
    assert solve_rt_sfe(rs, EFF0).mode == MODE_NO_RT
    # single strategic supplier: competitive fallback (or error when disabled)
    rs2 = make_state([0.3, 0.9], [0.0, 0.0, 0.7], pf=0.2, s_pf=0.5)
    sol = solve_rt_sfe(rs2, EffectiveRTCurve(AFFINE, 0.2))
    assert sol.mode == MODE_COMPETITIVE
    with pytest.raises(RTSolveError):
        solve_rt_sfe(rs2, EffectiveRTCurve(AFFINE, 0.2), allow_competitive=False)


def test_gamma0_shift():
    rs = make_state([0.5, 1.5, 2.0], [0.4, 0.8, 1.2])
    sol = solve_rt_sfe(rs, EFF0)
    assert sol.gamma0 == pytest.approx(0.5, abs=1e-10)
    # curve equals the unshifted solution composed with max(p - gamma0, 0)
    rs0 = make_state([0.0, 1.0, 1.5], [0.4, 0.8, 1.2])
    sol0 = solve_rt_sfe(rs0, EFF0)
    p = np.linspace(0.0, 2.0, 300)
    lhs = np.asarray(sol.value(p))
    rhs = np.asarray(sol0.value(np.maximum(p - 0.5, 0.0)))
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


def test_clear_examples():
    # Case 1 time step clears at zero
    rs = make_state([0.0, 2.0], [1.0, 2.0, 3.0])
    sol = solve_rt_sfe(rs, EFF0)
    assert clear_rt(sol, rs, 0) == 0.0
    # harness-injected curve Sbar(p) = 2 sqrt(p) - p with ample caps:
    # 3 Sbar(p) + p = 2  =>  p = ((3 - sqrt(5))/2)^2
    rs_inj = make_state([2.0, 0.0], [10.0, 11.0, 12.0])
    sol_inj = solve_rt_sfe(rs_inj, EFF0)
    sol_inj._batch.cbar[:] = 2.0
    sol_inj._batch.gamma[:] = np.inf  # keep every supplier on branch 1
    p = clear_rt(sol_inj, rs_inj, 0)
    assert p == pytest.approx(((3 - np.sqrt(5)) / 2) ** 2, abs=1e-9)
    assert sol_inj.value(p) * p == pytest.approx(0.618 * 0.1459, abs=2e-3)
    # all caps binding: 3 + p = 4
    rs_cap = make_state([4.0, 0.0], [0.9, 1.0, 1.1])
    sol_cap = solve_rt_sfe(rs_cap, EFF0)
    assert clear_rt(sol_cap, rs_cap, 0) == pytest.approx(1.0, abs=1e-9)


def test_rt_payoff_examples():
    rs = make_state([0.0, 4.0], [0.9, 1.0, 1.1])
    sol = solve_rt_sfe(rs, EFF0)
    assert rt_payoff(0, sol, rs, 0) == 0.0  # p_s = 0
    # all caps bind at p_s = 1: supplier 0 earns cap * price
    assert rt_payoff(0, sol, rs, 1) == pytest.approx(0.9 * 1.0, abs=1e-6)


def test_continuity_and_ordering_invariants():
    rng = np.random.default_rng(3)
    for _ in range(8):
        caps = np.sort(rng.uniform(0.2, 1.4, size=3))
        d_hi = caps.sum() * rng.uniform(0.9, 1.3)
        rs = make_state([0.0, d_hi], caps, pf=rng.uniform(0, 0.3))
        sol = solve_rt_sfe(rs, EffectiveRTCurve(AFFINE, rs.da_price))
        sol.check_shape(jump_tol=1e-7)  # raises on violation
        assert np.all(np.diff(np.concatenate([[sol.gamma0], sol.breakpoints])) > 0)


def test_payoff_decreasing_in_c1():
    rs = make_state([0.0, 2.2, 1.0], [0.5, 0.9, 1.3])
    sol = solve_rt_sfe(rs, EFF0)
    c1 = float(sol._batch.c1[0])
    base = sum(rt_payoff(2, sol, rs, t) for t in range(3))
    for delta in (1e-3, 1e-2):
        cand = stitch_candidate(c1 * (1 + delta), rs, EFF0)
        assert not isinstance(cand, StitchInvalid)
        pay = sum(rt_payoff(2, cand, rs, t) for t in range(3))
        assert pay <= base + 1e-10


def test_best_response_at_equilibrium_and_off():
    rs = make_state([0.0, 1.8, 0.9], [0.5, 0.9, 1.3])
    sol = solve_rt_sfe(rs, EFF0)
    for i in range(3):
        assert best_response_check(sol, rs, i, grid_size=201, relative=True) <= 1e-4
    flat = solve_rt_sfe(rs, EFF0)
    flat._batch.cbar *= 0.5
    improvements = [
        best_response_check(flat, rs, i, grid_size=201, relative=True) for i in range(3)
    ]
    assert max(improvements) > 1e-3
    # zero residual demand: nothing to gain
    rs0 = make_state([-1.0, 0.0], [0.5, 0.9, 1.3])
    sol0 = solve_rt_sfe(rs0, EFF0)
    assert best_response_check(sol0, rs0, 0) == 0.0


def test_truncation_skips_upper_branches():
    rs = make_state([0.0, 1.1], [0.5, 2.0, 2.5])
    sol = solve_rt_sfe(rs, EFF0, track_branches=True)
    assert sol.truncation_index == 2
    assert len(sol.breakpoints) == 1
    clear_rt_all(sol, rs)
    assert sol._batch.max_branch_used[0] < sol.truncation_index


def test_power_family_solve():
    curve = EffectiveRTCurve(ConventionalCurve("power", a=1.0, alpha=0.6), 0.0)
    rs = make_state([0.0, 1.6], [0.4, 0.7, 0.9])
    sol = solve_rt_sfe(rs, curve)
    assert sol.mode == MODE_SFE
    sol.check_shape(jump_tol=1e-7)
    prices = clear_rt_all(sol, rs)
    assert prices[0] == 0.0 and prices[1] > 0
    agg = sol.aggregate(prices[1])
    assert agg == pytest.approx(1.6, rel=1e-7)


def test_tie_perturbation():
    rs = make_state([0.0, 2.0], [0.5, 0.5, 0.5])
    sol = solve_rt_sfe(rs, EFF0)
    assert sol.mode == MODE_SFE
    caps = sol.strategic_caps
    assert np.all(np.diff(caps) > 0)
    assert np.max(np.abs(caps - 0.5)) < 1e-10


@pytest.mark.parametrize("family,kwargs", [
    ("affine", {"a": 1.3, "p_c": 0.1}),
    ("power", {"a": 1.0, "alpha": 0.7, "p_c": 0.0}),
])
def test_stitched_curve_solves_foc_ode(family, kwargs):
    # independent oracle: integrate p m sigma' - sigma = -p Cbar'(p)
    # backward from each breakpoint with solve_ivp and compare; this never
    # touches the antiderivative machinery
    from scipy.integrate import solve_ivp

    conv = ConventionalCurve(family, **kwargs)
    pf = 0.15
    eff = EffectiveRTCurve(conv, pf)
    rng = np.random.default_rng(11)
    caps = np.sort(rng.uniform(0.3, 1.2, size=3))
    rs = make_state([0.0, caps.sum() * 1.2], caps, pf=pf)
    sol = solve_rt_sfe(rs, eff)
    assert sol.mode == MODE_SFE
    pbar = eff.active_from
    lo_bound = [0.0] + list(sol.breakpoints[:-1])
    for k, (g, cap) in enumerate(zip(sol.breakpoints, sol.caps_bound), start=1):
        m = 3 - k

        def rhs(p, y):
            slope = conv.slope(p) if p > pbar else 0.0
            return (y[0] - p * slope) / (m * p)

        lo = max(lo_bound[k - 1], 1e-6 * g)
        ivp = solve_ivp(rhs, (g, lo), [cap], rtol=1e-11, atol=1e-13, dense_output=True)
        assert ivp.success
        probes = np.linspace(lo * 1.01, g * 0.999, 25)
        got = np.asarray(sol.value(probes))
        want = ivp.sol(probes)[0]
        assert np.max(np.abs(got - want)) <= 5e-7
        if k >= 2:
            # continuity: backward integration lands on the previous cap
            assert ivp.sol(lo_bound[k - 1])[0] == pytest.approx(sol.caps_bound[k - 2], abs=5e-7)
