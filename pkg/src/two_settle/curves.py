"""Supply-curve primitives for the two-settlement solver.

The conventional supplier's curve C is one of two parametric families:

* ``affine``:  C(p) = a * (p - p_c)         for p > p_c, else 0
* ``power``:   C(p) = a * (p - p_c)**alpha  for p > p_c, alpha in (0, 1]

Both are continuous, zero below the threshold price ``p_c``, and weakly
concave and strictly increasing above it.

The real-time market sees the effective curve Cbar(p) = max(C(p), C(p_f))
where p_f is the day-ahead clearing price: once committed, the conventional
supplier cannot be curtailed below its day-ahead quantity when residual
demand is positive.

Branch solutions to the real-time first-order ODE

    p * m * sigma'(p) - sigma(p) = -p * Cbar'(p),    m = n_suppliers - k

have the closed form sigma(p) = p**(1/m) * (c - F(p)/m) where F is an
antiderivative of Cbar'(x) * x**(-1/m).  The integration constant of F is
anchored at the lower edge of the region where Cbar' > 0 (reference price
1.0 when the anchor would make the integral diverge); the constant is
absorbed into c, so the anchor choice only fixes a reproducible convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import quad

__all__ = [
    "DomainError",
    "DegenerateExponentError",
    "CapNotAttained",
    "ConventionalCurve",
    "EffectiveRTCurve",
    "BranchSolution",
    "eval_conventional",
    "conventional_inverse",
    "antiderivative_F",
    "eval_branch",
    "branch_breakpoint",
]

_QUAD_ABS_TOL = 1e-10
_QUAD_LIMIT = 10_000


class DomainError(ValueError):
    """Input outside the documented domain (negative price/quantity, bad k)."""


class DegenerateExponentError(DomainError):
    """Branch index k = n_suppliers would give exponent 1/0."""


class CapNotAttained(Exception):
    """sigma_k never reaches the requested cap on its increasing range.

    Consumed by the truncation logic in the real-time solver; not a failure.
    """


@dataclass(frozen=True)
class ConventionalCurve:
    """Known supply curve of the conventional supplier."""

    family: str  # "affine" | "power"
    a: float
    p_c: float = 0.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.family not in ("affine", "power"):
            raise DomainError(f"unknown curve family {self.family!r}")
        if self.a <= 0:
            raise DomainError("curve scale a must be positive")
        if self.p_c < 0:
            raise DomainError("threshold price must be nonnegative")
        if self.family == "power" and not 0.0 < self.alpha <= 1.0:
            raise DomainError("power exponent alpha must lie in (0, 1]")

    def quantity(self, p):
        """C(p); zero at and below the threshold price."""
        p = np.asarray(p, dtype=float)
        if np.any(p < 0):
            raise DomainError("price must be nonnegative")
        x = np.maximum(p - self.p_c, 0.0)
        if self.family == "affine":
            out = self.a * x
        else:
            out = self.a * x**self.alpha
        return out if out.ndim else float(out)

    def slope(self, p):
        """C'(p); zero below the threshold (left derivative at p_c)."""
        p = np.asarray(p, dtype=float)
        if self.family == "affine":
            out = np.where(p > self.p_c, self.a, 0.0)
        else:
            x = np.maximum(p - self.p_c, 0.0)
            out = np.zeros_like(p)
            pos = x > 0
            out[pos] = self.a * self.alpha * x[pos] ** (self.alpha - 1.0)
        return out if out.ndim else float(out)

    def inverse(self, q):
        """Smallest p with C(p) = q; returns p_c for q = 0."""
        q = np.asarray(q, dtype=float)
        if np.any(q < 0):
            raise DomainError("quantity must be nonnegative")
        if self.family == "affine":
            out = self.p_c + q / self.a
        else:
            out = self.p_c + (q / self.a) ** (1.0 / self.alpha)
        return out if out.ndim else float(out)

    def inverse_slope(self, q):
        """(C^-1)'(q) = 1 / C'(C^-1(q)) for q > 0."""
        q = np.asarray(q, dtype=float)
        if self.family == "affine":
            out = np.full_like(q, 1.0 / self.a)
        else:
            out = (q / self.a) ** (1.0 / self.alpha - 1.0) / (self.a * self.alpha)
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class EffectiveRTCurve:
    """Cbar(p) = max(C(p), C(p_f)): the conventional curve as seen in RT."""

    base: ConventionalCurve
    da_price: float = 0.0

    def __post_init__(self):
        if self.da_price < 0:
            raise DomainError("day-ahead price must be nonnegative")

    @property
    def active_from(self) -> float:
        """Price above which Cbar has positive slope."""
        return max(self.base.p_c, self.da_price)

    @property
    def da_quantity(self) -> float:
        return self.base.quantity(self.da_price)

    def quantity(self, p):
        return np.maximum(self.base.quantity(p), self.da_quantity)

    def slope(self, p, pbar=None):
        """Cbar'(p): 0 on the flat segment, C'(p) above it."""
        pbar = self.active_from if pbar is None else pbar
        p = np.asarray(p, dtype=float)
        out = np.where(p > pbar, self.base.slope(p), 0.0)
        return out if out.ndim else float(out)

    def inverse(self, q):
        """inf{p : Cbar(p) >= q}; zero on the flat segment."""
        q = np.asarray(q, dtype=float)
        out = np.where(q > self.da_quantity, self.base.inverse(np.maximum(q, 0.0)), 0.0)
        return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Antiderivative F_m(p) of Cbar'(x) x**(-1/m), anchored per module docstring.
# All vector kernels below take pbar (flat-segment edge) as an array so one
# call can span rows with different day-ahead prices.
# ---------------------------------------------------------------------------


def _anchor_m1(pbar):
    """Reference price for the logarithmic (m = 1) antiderivative."""
    return np.where(pbar > 0.0, pbar, 1.0)


@lru_cache(maxsize=200_000)
def _f_power_scalar(a, alpha, p_c, pbar, m, p):
    """Quadrature value of F for the power family at a single price."""
    if p <= pbar:
        return 0.0
    inv_m = 1.0 / m

    def integrand(x):
        return a * alpha * (x - p_c) ** (alpha - 1.0) * x ** (-inv_m)

    if pbar > 0.0:
        lo = pbar
    elif m > 1 and alpha > inv_m:
        lo = 0.0
    else:
        lo = 1.0  # divergent at 0; reference price 1 convention
    if lo == 0.0:
        # substitution u = x**(1 - 1/m) removes the x**(-1/m) weight at 0
        ex = m / (m - 1.0)

        def integrand_u(u):
            x = u**ex
            return ex * a * alpha * (x - p_c) ** (alpha - 1.0)

        val, _ = quad(integrand_u, 0.0, p ** (1.0 / ex), epsabs=_QUAD_ABS_TOL, limit=_QUAD_LIMIT)
        return val
    sign = 1.0
    hi = p
    if hi < lo:
        lo, hi = hi, lo
        sign = -1.0
    pts = [p_c] if lo < p_c < hi else None
    import warnings

    with warnings.catch_warnings():
        # bracket-expansion probes integrate over huge ranges where quad
        # warns about slow convergence; accuracy there is immaterial
        warnings.simplefilter("ignore")
        val, _ = quad(integrand, lo, hi, epsabs=_QUAD_ABS_TOL, limit=_QUAD_LIMIT, points=pts)
    return sign * val


def f_antideriv(curve: ConventionalCurve, pbar, m, p):
    """F_m(p) for effective curves with flat edge ``pbar`` (broadcastable)."""
    p, pbar, m = np.broadcast_arrays(
        np.asarray(p, dtype=float), np.asarray(pbar, dtype=float), np.asarray(m, dtype=float)
    )
    out = np.zeros(p.shape)
    if curve.family == "affine":
        a = curve.a
        hi = m > 1.0
        act = p > pbar
        sel = hi & act
        if np.any(sel):
            e = (m[sel] - 1.0) / m[sel]
            out[sel] = a * (m[sel] / (m[sel] - 1.0)) * (p[sel] ** e - pbar[sel] ** e)
        sel = ~hi & act
        if np.any(sel):
            out[sel] = a * np.log(p[sel] / _anchor_m1(pbar[sel]))
        # m = 1 with pbar = 0 anchors at 1, so F < 0 below the reference
        sel = ~hi & ~act & (pbar == 0.0) & (p > 0.0)
        if np.any(sel):
            out[sel] = a * np.log(p[sel])
    else:
        it = np.nditer([p, pbar, m, out], op_flags=[["readonly"]] * 3 + [["writeonly"]])
        for pi, pb, mi, oi in it:
            oi[...] = _f_power_scalar(
                curve.a, curve.alpha, curve.p_c, float(pb), float(mi), float(pi)
            )
    return out


def sigma_val(curve: ConventionalCurve, pbar, m, c, p):
    """sigma(p; c) = p**(1/m) (c - F(p)/m), right-continuous 0 at p = 0."""
    p, pbar, m, c = np.broadcast_arrays(
        np.asarray(p, dtype=float),
        np.asarray(pbar, dtype=float),
        np.asarray(m, dtype=float),
        np.asarray(c, dtype=float),
    )
    out = np.zeros(p.shape)
    pos = p > 0.0
    if np.any(pos):
        f = f_antideriv(curve, pbar[pos], m[pos], p[pos])
        out[pos] = p[pos] ** (1.0 / m[pos]) * (c[pos] - f / m[pos])
    return out


def sigma_deriv(curve: ConventionalCurve, pbar, m, c, p):
    """Exact derivative of the branch solution: sigma/(m p) - Cbar'(p)/m."""
    p = np.asarray(p, dtype=float)
    m = np.asarray(m, dtype=float)
    s = sigma_val(curve, pbar, m, c, p)
    cbar_slope = np.where(p > pbar, curve.slope(p), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(p > 0.0, (s - p * cbar_slope) / (m * p), np.inf)
    return out


def turn_threshold(curve: ConventionalCurve, pbar, m, p):
    """T_m(p) = p**((m-1)/m) Cbar'(p) + F_m(p)/m.

    sigma'(p; c) > 0 exactly when c > T_m(p); for the affine family (any
    threshold) and the power family with p_c = 0, T_m is nondecreasing, so
    the increasing range of sigma is the single interval p < T_m^{-1}(c).
    """
    p, pbar, m = np.broadcast_arrays(
        np.asarray(p, dtype=float), np.asarray(pbar, dtype=float), np.asarray(m, dtype=float)
    )
    cbar_slope = np.where(p > pbar, curve.slope(np.maximum(p, 0.0)), 0.0)
    f = f_antideriv(curve, pbar, m, p)
    with np.errstate(invalid="ignore"):
        head = np.where(p > 0.0, p ** ((m - 1.0) / m) * cbar_slope, 0.0)
    return head + f / m


def monotone_turn_threshold(curve: ConventionalCurve) -> bool:
    return curve.family == "affine" or curve.p_c == 0.0


def turn_price(curve: ConventionalCurve, pbar, m, c, p_hi=None):
    """Largest price up to which sigma(.; c) is increasing.

    Closed form for the affine family; bisection on the monotone threshold
    T_m otherwise.  A grid scan (bounded by p_hi) handles the cold power
    family with a positive threshold price, where T_m can dip after the kink.
    """
    if p_hi is None:
        p_hi = 1e12
    pbar, m, c, p_hi = np.broadcast_arrays(
        np.asarray(pbar, dtype=float),
        np.asarray(m, dtype=float),
        np.asarray(c, dtype=float),
        np.asarray(p_hi, dtype=float),
    )
    out = np.zeros(pbar.shape)
    nonpos = c <= 0.0
    if curve.family == "affine":
        a = curve.a
        hi = m > 1.0
        if np.any(hi):
            e = (m[hi] - 1.0) / m[hi]
            x_turn = (m[hi] - 1.0) * c[hi] / (a * m[hi]) + pbar[hi] ** e / m[hi]
            x_bar = pbar[hi] ** e
            out[hi] = np.where(x_turn <= x_bar, pbar[hi], x_turn ** (1.0 / e))
        lo = ~hi
        if np.any(lo):
            r = _anchor_m1(pbar[lo])
            p_turn = r * np.exp(c[lo] / a - 1.0)
            out[lo] = np.maximum(p_turn, pbar[lo])
    elif monotone_turn_threshold(curve):
        out[:] = _bisect_turn(curve, pbar, m, c, p_hi)
    else:
        out[:] = _scan_turn(curve, pbar, m, c, p_hi)
    out[nonpos] = 0.0
    return out


def _bisect_turn(curve, pbar, m, c, p_hi, iters=90):
    """Solve T_m(p) = c on a monotone threshold by bracketed bisection."""
    lo = np.maximum(pbar, 1e-30)
    hi = np.maximum(p_hi, lo * 2.0)
    # expand the bracket until the threshold exceeds c (T is unbounded above)
    for _ in range(80):
        short = turn_threshold(curve, pbar, m, hi) < c
        if not short.any():
            break
        hi = np.where(short, hi * 8.0, hi)
    t_lo = turn_threshold(curve, pbar, m, lo * (1.0 + 1e-12))
    # threshold already above c at the lower edge: sigma turns at pbar
    done_lo = t_lo >= c
    lo_b, hi_b = lo.copy(), hi.copy()
    for _ in range(iters):
        mid = 0.5 * (lo_b + hi_b)
        above = turn_threshold(curve, pbar, m, mid) >= c
        hi_b = np.where(above, mid, hi_b)
        lo_b = np.where(above, lo_b, mid)
    return np.where(done_lo, pbar, hi_b)


def _scan_turn(curve, pbar, m, c, p_hi, n_grid=384):
    """Geometric scan for the first decrease of sigma (non-monotone T_m)."""
    lo = np.maximum(pbar * (1.0 + 1e-12), np.maximum(p_hi, 1.0) * 1e-12)
    ratios = np.linspace(0.0, 1.0, n_grid)
    out = np.full(pbar.shape, np.nan)
    grid = lo[..., None] * (p_hi[..., None] / lo[..., None]) ** ratios
    vals = sigma_val(
        curve, pbar[..., None], m[..., None], c[..., None], grid
    )
    dec = np.diff(vals, axis=-1) < 0.0
    first = np.argmax(dec, axis=-1)
    any_dec = dec.any(axis=-1)
    idx = np.where(any_dec, first, n_grid - 2)
    out = np.take_along_axis(grid, idx[..., None], axis=-1)[..., 0]
    out = np.where(any_dec, out, p_hi)
    return out


def bisect_sigma_cap(curve, pbar, m, c, cap, lo, hi, iters=80):
    """Smallest p in [lo, hi] with sigma(p) >= cap; caller ensures bracket."""
    lo_b = np.asarray(lo, dtype=float).copy()
    hi_b = np.asarray(hi, dtype=float).copy()
    for _ in range(iters):
        mid = 0.5 * (lo_b + hi_b)
        above = sigma_val(curve, pbar, m, c, mid) >= cap
        hi_b = np.where(above, mid, hi_b)
        lo_b = np.where(above, lo_b, mid)
    return hi_b


# ---------------------------------------------------------------------------
# Scalar, spec-facing operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BranchSolution:
    """One branch sigma_k of the stitched real-time supply function."""

    k: int
    n_suppliers: int
    constant: float
    domain_lo: float = 0.0
    domain_hi: float = math.inf

    def __post_init__(self):
        if self.n_suppliers < 2:
            raise DomainError("branch solutions need at least two suppliers")
        if not 1 <= self.k <= self.n_suppliers - 1:
            if self.k == self.n_suppliers:
                raise DegenerateExponentError("k = n_suppliers gives exponent 1/0")
            raise DomainError(f"branch index {self.k} outside [1, {self.n_suppliers - 1}]")

    @property
    def m(self) -> int:
        return self.n_suppliers - self.k


def eval_conventional(curve: ConventionalCurve, p):
    """C(p)."""
    return curve.quantity(p)


def conventional_inverse(curve: ConventionalCurve, q):
    """Smallest price at which the conventional curve supplies q."""
    return curve.inverse(q)


def antiderivative_F(curve: EffectiveRTCurve, k: int, n_suppliers: int, p):
    """F_k(p) for branch k of an n_suppliers real-time market."""
    if k == n_suppliers:
        raise DegenerateExponentError("k = n_suppliers gives exponent 1/0")
    if not 1 <= k <= n_suppliers - 1:
        raise DomainError(f"branch index {k} outside [1, {n_suppliers - 1}]")
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr <= 0):
        raise DomainError("antiderivative defined for p > 0")
    out = f_antideriv(curve.base, curve.active_from, n_suppliers - k, p_arr)
    return out if out.ndim else float(out)


def eval_branch(b: BranchSolution, curve: EffectiveRTCurve, p):
    """sigma_k(p; c) with the right-continuous zero at p = 0 (k = 1)."""
    p_arr = np.asarray(p, dtype=float)
    if np.any(p_arr < 0):
        raise DomainError("price must be nonnegative")
    out = sigma_val(curve.base, curve.active_from, b.m, b.constant, p_arr)
    return out if out.ndim else float(out)


def eval_branch_deriv(b: BranchSolution, curve: EffectiveRTCurve, p):
    """sigma_k'(p; c)."""
    out = sigma_deriv(
        curve.base, curve.active_from, float(b.m), b.constant, np.asarray(p, dtype=float)
    )
    return out if out.ndim else float(out)


def branch_breakpoint(b: BranchSolution, curve: EffectiveRTCurve, cap, rel_tol=1e-10):
    """gamma = min{p : sigma_k(p) = cap} on the increasing range.

    Raises CapNotAttained when sigma turns around below the cap.
    """
    cap = float(cap)
    if cap < 0:
        raise DomainError("cap must be nonnegative")
    if cap == 0.0:
        return 0.0
    pbar = np.asarray([curve.active_from])
    m = np.asarray([float(b.m)])
    c = np.asarray([b.constant])
    scale = max(curve.base.inverse(cap + curve.da_quantity), curve.active_from, 1.0)
    p_hi = np.asarray([scale * 1e6])
    p_turn = turn_price(curve.base, pbar, m, c, p_hi)
    peak = sigma_val(curve.base, pbar, m, c, p_turn)[0]
    if peak < cap:
        raise CapNotAttained(f"sigma peaks at {peak:.6g} < cap {cap:.6g}")
    lo = np.asarray([max(b.domain_lo, 0.0)])
    iters = max(60, int(math.ceil(math.log2(max(p_turn[0] - lo[0], 1.0) / max(rel_tol * max(p_turn[0], 1e-12), 1e-300)))))
    gamma = bisect_sigma_cap(
        curve.base, pbar, m, c, np.asarray([cap]), lo, p_turn, iters=min(iters, 200)
    )
    return float(gamma[0])
