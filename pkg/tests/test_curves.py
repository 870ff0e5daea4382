import numpy as np
import pytest

from two_settle.curves import (
    BranchSolution,
    CapNotAttained,
    ConventionalCurve,
    DegenerateExponentError,
    DomainError,
    EffectiveRTCurve,
    antiderivative_F,
    branch_breakpoint,
    conventional_inverse,
    eval_branch,
    eval_branch_deriv,
    eval_conventional,
)


def test_eval_conventional_examples():
    assert eval_conventional(ConventionalCurve("affine", a=1.0), 0.5) == 0.5
    assert eval_conventional(ConventionalCurve("affine", a=1.0, p_c=0.2), 0.1) == 0.0
    assert eval_conventional(ConventionalCurve("power", a=2.0, alpha=0.5), 4.0) == pytest.approx(4.0)


def test_eval_conventional_rejects_negative_price():
    with pytest.raises(DomainError):
        eval_conventional(ConventionalCurve("affine", a=1.0), -0.1)


def test_inverse_examples():
    assert conventional_inverse(ConventionalCurve("affine", a=1.0), 0.3) == pytest.approx(0.3)
    assert conventional_inverse(ConventionalCurve("affine", a=2.0, p_c=1.0), 4.0) == pytest.approx(3.0)
    assert conventional_inverse(ConventionalCurve("power", a=2.0, alpha=0.5), 0.0) == 0.0
    with pytest.raises(DomainError):
        conventional_inverse(ConventionalCurve("affine", a=1.0), -1.0)


def test_inverse_roundtrip_both_families():
    for curve in (
        ConventionalCurve("affine", a=1.7, p_c=0.3),
        ConventionalCurve("power", a=1.3, alpha=0.6, p_c=0.2),
    ):
        p = np.linspace(curve.p_c + 1e-6, 5.0, 50)
        assert np.allclose(curve.inverse(curve.quantity(p)), p, atol=1e-10)


def test_antiderivative_closed_form():
    eff = EffectiveRTCurve(ConventionalCurve("affine", a=1.0), 0.0)
    assert antiderivative_F(eff, 1, 3, 1.0) == pytest.approx(2.0)
    assert antiderivative_F(eff, 1, 3, 0.25) == pytest.approx(1.0)
    # zero integrand below the flat edge
    eff2 = EffectiveRTCurve(ConventionalCurve("affine", a=1.0), 2.0)
    assert antiderivative_F(eff2, 1, 3, 1.5) == 0.0


def test_antiderivative_degenerate_exponent():
    eff = EffectiveRTCurve(ConventionalCurve("affine", a=1.0), 0.0)
    with pytest.raises(DegenerateExponentError):
        antiderivative_F(eff, 3, 3, 1.0)


def test_quadrature_matches_affine_closed_form():
    # run the power-family quadrature with alpha = 1, which is the affine
    # curve in disguise, and compare against the closed form
    aff = EffectiveRTCurve(ConventionalCurve("affine", a=1.3, p_c=0.1), 0.25)
    pow1 = EffectiveRTCurve(ConventionalCurve("power", a=1.3, alpha=1.0, p_c=0.1), 0.25)
    p = np.geomspace(1e-4, 10.0, 40)
    for k, n_s in ((1, 3), (2, 3), (1, 4)):
        fa = antiderivative_F(aff, k, n_s, p)
        fp = antiderivative_F(pow1, k, n_s, p)
        assert np.allclose(fa, fp, atol=1e-8)


def test_power_antiderivative_against_dense_quadrature():
    curve = EffectiveRTCurve(ConventionalCurve("power", a=1.5, alpha=0.5), 0.2)
    got = antiderivative_F(curve, 1, 3, 2.0)
    x = np.linspace(0.2, 2.0, 400001)
    integrand = curve.base.slope(x) * x ** (-0.5)
    want = np.trapezoid(integrand, x)
    assert got == pytest.approx(want, abs=1e-6)


def test_eval_branch_examples():
    eff = EffectiveRTCurve(ConventionalCurve("affine", a=1.0), 0.0)
    b = BranchSolution(k=1, n_suppliers=3, constant=2.0)
    assert eval_branch(b, eff, 0.0) == 0.0
    assert eval_branch(b, eff, 1.0) == pytest.approx(1.0)
    assert eval_branch(b, eff, 0.25) == pytest.approx(0.75)


def test_branch_bad_index():
    with pytest.raises(DegenerateExponentError):
        BranchSolution(k=3, n_suppliers=3, constant=1.0)


def test_branch_breakpoint_examples():
    eff = EffectiveRTCurve(ConventionalCurve("affine", a=1.0), 0.0)
    b = BranchSolution(k=1, n_suppliers=3, constant=2.0)
    # tangency case: double root, sqrt(ulp) conditioning
    assert branch_breakpoint(b, eff, 1.0) == pytest.approx(1.0, abs=1e-6)
    assert branch_breakpoint(b, eff, 0.75) == pytest.approx(0.25, abs=1e-9)
    assert branch_breakpoint(b, eff, 0.0) == 0.0
    with pytest.raises(CapNotAttained):
        branch_breakpoint(b, eff, 1.5)


@pytest.mark.parametrize("n_s,k", [(3, 1), (4, 1), (4, 2)])
def test_ode_residual_affine(n_s, k):
    # residual of p m sigma' - sigma + p Cbar' on a 100-point grid
    eff = EffectiveRTCurve(ConventionalCurve("affine", a=1.0), 0.0)
    m = n_s - k
    c = 2.0
    b = BranchSolution(k=k, n_suppliers=n_s, constant=c)
    grid = np.geomspace(1e-3, 0.4, 100)  # inside every branch's increasing range
    h = 1e-6 * grid
    d = (eval_branch(b, eff, grid + h) - eval_branch(b, eff, grid - h)) / (2 * h)
    resid = grid * m * d - eval_branch(b, eff, grid) + grid * 1.0
    assert np.max(np.abs(resid)) <= 1e-8


def test_ode_residual_power_family():
    eff = EffectiveRTCurve(ConventionalCurve("power", a=1.0, alpha=0.7), 0.0)
    b = BranchSolution(k=1, n_suppliers=3, constant=2.0)
    grid = np.geomspace(0.01, 0.3, 30)
    h = 1e-6 * grid
    d = (eval_branch(b, eff, grid + h) - eval_branch(b, eff, grid - h)) / (2 * h)
    resid = grid * b.m * d - eval_branch(b, eff, grid) + grid * eff.base.slope(grid)
    assert np.max(np.abs(resid)) <= 1e-6


def test_sigma_monotone_in_constant():
    eff = EffectiveRTCurve(ConventionalCurve("affine", a=1.0), 0.0)
    p = np.geomspace(1e-3, 0.8, 50)
    prev = None
    for c in (1.0, 1.5, 2.0, 3.0):
        vals = eval_branch(BranchSolution(1, 3, c), eff, p)
        if prev is not None:
            assert np.all(vals > prev)
        prev = vals


def test_breakpoint_nonincreasing_in_constant():
    eff = EffectiveRTCurve(ConventionalCurve("affine", a=1.0), 0.0)
    gammas = [
        branch_breakpoint(BranchSolution(1, 3, c), eff, 0.6) for c in (1.6, 2.0, 2.5, 3.0)
    ]
    assert all(g2 <= g1 + 1e-12 for g1, g2 in zip(gammas, gammas[1:]))


def test_branch_deriv_matches_fd():
    eff = EffectiveRTCurve(ConventionalCurve("affine", a=1.3, p_c=0.1), 0.2)
    b = BranchSolution(k=1, n_suppliers=4, constant=1.7)
    p = np.geomspace(0.05, 0.9, 20)
    h = 1e-7 * p
    fd = (eval_branch(b, eff, p + h) - eval_branch(b, eff, p - h)) / (2 * h)
    assert np.allclose(eval_branch_deriv(b, eff, p), fd, rtol=1e-5, atol=1e-8)
