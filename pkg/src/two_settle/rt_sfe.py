"""Real-time market supply function equilibrium.

Given the day-ahead outcome and a realized scenario, every renewable
supplier with positive residual capacity bids the same incremental curve
S(p), stitched branch by branch from the ODE solutions in ``curves``:

* branch k lives on (gamma_{k-1}, gamma_k] with exponent m = n - k, where
  n is the number of strategic suppliers and gamma_k is the price at which
  the k-th smallest residual cap binds;
* continuity at each breakpoint pins c_{k+1} from c_k;
* the equilibrium is the *smallest* c_1 for which every branch is
  increasing and attains its cap (flatter curves pay better, so suppliers
  stop raising c_1 as soon as the curve is admissible).

Relaxations handled here: a positive price shift gamma_0 when the minimum
residual demand is positive (the curve is evaluated at max(p - gamma_0, 0));
truncation of the induction at M_S - 1 when the peak residual demand cannot
bind the larger caps; and competitive (marginal-cost) fallback when fewer
than two suppliers are strategic.

Everything is built on a batched, struct-of-arrays core so that thousands
of scenario solves vectorize; the public functions wrap single states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .curves import (
    ConventionalCurve,
    DomainError,
    EffectiveRTCurve,
    bisect_sigma_cap,
    f_antideriv,
    sigma_deriv,
    sigma_val,
    turn_price,
    turn_threshold,
)

__all__ = [
    "MODE_SFE",
    "MODE_NO_RT",
    "MODE_COMPETITIVE",
    "MODE_CONVENTIONAL_ONLY",
    "ResidualState",
    "StitchedSFE",
    "StitchInvalid",
    "RTSolveError",
    "residual_state",
    "stitch_candidate",
    "solve_rt_sfe",
    "clear_rt",
    "rt_payoff",
    "best_response_check",
]

MODE_SFE = 0
MODE_NO_RT = 1
MODE_COMPETITIVE = 2
MODE_CONVENTIONAL_ONLY = 3

_TIE_EPS = 1e-12
_GAMMA_ITERS = 48  # bisection iterations for breakpoints (rel err < 1e-13)
_CLEAR_ITERS = 50  # bisection iterations for market clearing


class RTSolveError(RuntimeError):
    """Real-time stage failed (no admissible c_1, infeasible clearing, ...)."""


@dataclass(frozen=True)
class StitchInvalid:
    """Structured invalidity returned by stitch_candidate."""

    branch: int
    reason: str  # "attainment" | "monotonicity" | "ordering"

    def __bool__(self):
        return False


@dataclass
class ResidualState:
    """Residual quantities of one scenario after the day-ahead settlement."""

    residual_demand: np.ndarray  # (T,)
    residual_caps: np.ndarray  # per supplier, ascending, ties perturbed
    da_price: float
    da_supplier_quantity: float  # S(p_f), symmetric across suppliers
    da_conventional: float  # C(p_f)

    @property
    def strategic_caps(self) -> np.ndarray:
        return self.residual_caps[self.residual_caps > 0.0]

    @property
    def strategic_count(self) -> int:
        return int((self.residual_caps > 0.0).sum())

    @property
    def nonstrategic_count(self) -> int:
        return int((self.residual_caps <= 0.0).sum())

    @property
    def min_residual(self) -> float:
        return float(self.residual_demand.min())

    @property
    def max_residual(self) -> float:
        return float(self.residual_demand.max())


def residual_state(scenario, da) -> ResidualState:
    """Build the residual state from a scenario and a day-ahead outcome.

    ``scenario`` needs ``demand_path`` (T,) and ``capacity_paths`` (N, T);
    ``da`` needs ``clearing_price``, ``supplier_quantity`` and
    ``conventional_quantity``.
    """
    demand = np.asarray(scenario.demand_path, dtype=float)
    q = np.asarray(scenario.capacity_paths, dtype=float)
    s_pf = float(da.supplier_quantity)
    delivered = np.minimum(s_pf, q)
    d_r = demand - delivered.sum(axis=0) - float(da.conventional_quantity)
    caps = np.maximum(q - s_pf, 0.0).min(axis=1)
    caps = _tie_perturb_sorted(np.sort(caps))
    return ResidualState(
        residual_demand=d_r,
        residual_caps=caps,
        da_price=float(da.clearing_price),
        da_supplier_quantity=s_pf,
        da_conventional=float(da.conventional_quantity),
    )


def _tie_perturb_sorted(caps_sorted: np.ndarray) -> np.ndarray:
    """Break exact ties among positive caps by 1e-12 * rank."""
    caps = caps_sorted.astype(float).copy()
    pos = caps > 0.0
    if pos.sum() > 1 and np.unique(caps[pos]).size < pos.sum():
        caps[pos] = caps[pos] + _TIE_EPS * np.arange(1, pos.sum() + 1)
    return caps


# ---------------------------------------------------------------------------
# Batched core
# ---------------------------------------------------------------------------


@dataclass
class RTBatch:
    """Struct-of-arrays solution for R scenario rows."""

    curve: ConventionalCurve
    pf: np.ndarray  # (R,)
    c_pf: np.ndarray  # C(pf)
    pbar: np.ndarray  # max(pf, p_c)
    mode: np.ndarray  # (R,) int8
    n_str: np.ndarray  # (R,) strategic supplier count
    caps: np.ndarray  # (R, N) strategic caps ascending, +inf padded
    m_s: np.ndarray  # (R,) truncation index
    gamma0: np.ndarray  # (R,)
    c1: np.ndarray  # (R,) minimal admissible constant
    cbar: np.ndarray  # (R, B) branch constants (nan padded)
    gamma: np.ndarray  # (R, B) breakpoints (nan padded)
    capv: np.ndarray  # (R, B) caps bound at each breakpoint
    prefix: np.ndarray  # (R, B + 1) prefix sums of caps
    caps_total: np.ndarray  # (R,) sum of all strategic caps
    cap_top: np.ndarray  # (R,) largest strategic cap
    comp_cap: np.ndarray  # (R,) lone strategic cap (competitive rows)
    track_branches: bool = False
    max_branch_used: np.ndarray = field(default=None)  # (R,) diagnostics

    @property
    def n_rows(self) -> int:
        return self.pf.shape[0]

    @property
    def n_branch(self) -> np.ndarray:
        return np.maximum(self.m_s - 1, 0)


def _strategic_caps_matrix(caps_raw: np.ndarray):
    """Sort caps, perturb ties, and left-align the positive ones (+inf pad)."""
    r, n = caps_raw.shape
    if n == 0:
        return np.zeros((r, 0)), np.zeros(r, dtype=np.int64)
    caps_sorted = np.sort(caps_raw, axis=1)
    # tie perturbation on positive entries, vectorized
    pos = caps_sorted > 0.0
    rank = np.cumsum(pos, axis=1)
    has_tie = (np.diff(caps_sorted, axis=1) == 0.0) & pos[:, 1:] & pos[:, :-1]
    tie_rows = has_tie.any(axis=1)
    if tie_rows.any():
        bump = np.where(pos, _TIE_EPS * rank, 0.0)
        caps_sorted[tie_rows] += bump[tie_rows]
    n_str = pos.sum(axis=1)
    shift = n - n_str
    idx = shift[:, None] + np.arange(n)[None, :]
    pad = idx > n - 1
    idx = np.minimum(idx, n - 1)
    q = np.take_along_axis(caps_sorted, idx, axis=1)
    q[pad] = np.inf
    return q, n_str


def _truncation_index(caps: np.ndarray, n_str: np.ndarray, dmax: np.ndarray) -> np.ndarray:
    """M_S = max{M : sum_{i<M} caps_i <= dmax}, clamped to [2, n_str]."""
    n = caps.shape[1]
    csum = np.cumsum(np.where(np.isfinite(caps), caps, 0.0), axis=1)
    below = np.hstack([np.ones((caps.shape[0], 1), bool), csum[:, : n - 1] <= dmax[:, None]])
    m = below.sum(axis=1)
    return np.clip(m, 2, np.maximum(n_str, 2))


def _affine_sigma(a, pbar, c, m, q):
    """Lean sigma for the affine family; q may be any nonnegative array."""
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        u = q ** (1.0 / m)
        f = np.zeros(np.broadcast(q, pbar, m).shape)
        act = q > pbar
        hi = m > 1.0
        sel = act & hi
        if sel.any():
            e = 1.0 - 1.0 / m
            f = np.where(sel, a * (m / np.maximum(m - 1.0, 1e-300)) * (q**e - pbar**e), f)
        sel = act & ~hi
        if sel.any():
            r = np.where(pbar > 0.0, pbar, 1.0)
            f = np.where(sel, a * np.log(np.maximum(q, 1e-300) / r), f)
        out = np.where(q > 0.0, u * (c - f / m), 0.0)
    return out


def _affine_min_root(curve, pbar, c, m, cap, lo):
    """Smallest gamma > lo with sigma(gamma) = cap on the increasing range.

    Closed forms for m = 1 (Lambert W) and m = 2 (quadratic); bracketed
    bisection against the closed-form turn price for m >= 3.  Returns
    (gamma, attained); gamma is nan where the cap is out of reach.
    """
    from scipy.special import lambertw

    a = curve.a
    gamma = np.full(c.shape, np.nan)
    attained = np.zeros(c.shape, dtype=bool)
    pos = c > 0.0
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        # flat-Cbar region p <= pbar where sigma = c p**(1/m)
        r1 = pos & (pbar > 0.0) & (cap <= c * pbar ** (1.0 / m))
        if r1.any():
            gamma = np.where(r1, (cap / np.where(pos, c, 1.0)) ** m, gamma)
            attained |= r1
        need = pos & ~r1
        sel = need & (m == 1.0)
        if sel.any():
            r = np.where(pbar > 0.0, pbar, 1.0)
            z = cap / (a * r * np.exp(c / a))
            ok = sel & (z <= 1.0 / np.e)
            if ok.any():
                v = -np.real(lambertw(-np.where(ok, z, 0.1), k=-1))
                root = r * np.exp(c / a - v)
                ok &= root >= pbar  # below pbar the formula is a phantom root
                gamma = np.where(ok, root, gamma)
                attained |= ok
        sel = need & (m == 2.0)
        if sel.any():
            big_a = c + a * np.sqrt(np.maximum(pbar, 0.0))
            disc = big_a * big_a - 4.0 * a * cap
            ok = sel & (disc >= 0.0)
            if ok.any():
                u = (big_a - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
                ok &= u * u >= pbar  # smaller root must lie in the active region
                gamma = np.where(ok, u * u, gamma)
                attained |= ok
        sel = need & (m >= 3.0)
        if sel.any():
            p_turn = turn_price(curve, pbar, m, np.maximum(c, 1e-300), None)
            sig_turn = _affine_sigma(a, pbar, c, m, p_turn)
            ok = sel & (sig_turn >= cap)
            if ok.any():
                lo_b = np.maximum(lo, pbar)
                hi_b = p_turn.copy()
                for _ in range(_GAMMA_ITERS):
                    mid = 0.5 * (lo_b + hi_b)
                    above = _affine_sigma(a, pbar, c, m, mid) >= cap
                    hi_b = np.where(above, mid, hi_b)
                    lo_b = np.where(above, lo_b, mid)
                gamma = np.where(ok, hi_b, gamma)
                attained |= ok
    attained &= gamma > lo
    return gamma, attained


def _affine_f(a, pbar, m, q):
    """Closed-form antiderivative F_m for the affine family."""
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.zeros(np.broadcast(q, pbar, m).shape)
        act = q > pbar
        hi = m > 1.0
        sel = act & hi
        if sel.any():
            e = 1.0 - 1.0 / m
            f = np.where(sel, a * (m / np.maximum(m - 1.0, 1e-300)) * (q**e - pbar**e), f)
        sel = act & ~hi
        if sel.any():
            r = np.where(pbar > 0.0, pbar, 1.0)
            f = np.where(sel, a * np.log(np.maximum(q, 1e-300) / r), f)
    return f


def _generic_min_root(curve, pbar, c, m, cap, lo):
    """Breakpoint search for non-affine families.

    Expands an upper bracket until either sigma reaches the cap or the turn
    threshold overtakes c (the threshold can be bounded above, in which
    case sigma increases without turning), then bisects.
    """
    hi = np.maximum(np.maximum(lo * 2.0, pbar * 2.0), 1.0)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        for _ in range(90):
            t_hi = turn_threshold(curve, pbar, m, hi)
            s_hi = sigma_val(curve, pbar, m, c, hi)
            need = (s_hi < cap) & (t_hi < c) & (hi < 1e90)
            if not need.any():
                break
            hi = np.where(need, hi * 8.0, hi)
        turned = turn_threshold(curve, pbar, m, hi) >= c
        p_top = hi.copy()
        if turned.any():
            p_turn = turn_price(curve, pbar, m, c, hi)
            p_top = np.where(turned, p_turn, p_top)
        s_top = sigma_val(curve, pbar, m, c, p_top)
        attain = (s_top >= cap) & (p_top > lo)
        g = bisect_sigma_cap(curve, pbar, m, c, cap, lo, p_top, iters=_GAMMA_ITERS)
    attain &= g > lo
    return np.where(attain, g, np.nan), attain


def _stitch_given_c1(curve, pbar, n_str, n_branch, caps, c1):
    """Vectorized stitch; returns (valid, cbar, gamma, fail_branch, reason)."""
    r = pbar.shape[0]
    b_max = int(n_branch.max()) if r else 0
    cbar = np.full((r, max(b_max, 1)), np.nan)
    gamma = np.full((r, max(b_max, 1)), np.nan)
    valid = np.ones(r, dtype=bool)
    fail_branch = np.zeros(r, dtype=np.int64)
    fail_reason = np.zeros(r, dtype=np.int8)  # 1 attainment, 2 ordering
    lo = np.zeros(r)
    c_k = np.asarray(c1, dtype=float).copy()
    affine = curve.family == "affine"
    for k in range(1, b_max + 1):
        act = (n_branch >= k) & valid
        if not act.any():
            break
        m = np.maximum(n_str - k, 1).astype(float)
        cap_k = caps[:, k - 1]
        if affine:
            g, attain = _affine_min_root(curve, pbar, c_k, m, cap_k, lo)
        else:
            g, attain = _generic_min_root(curve, pbar, c_k, m, cap_k, lo)
        bad = act & ~attain
        valid[bad] = False
        fail_branch[bad] = k
        fail_reason[bad] = np.where(np.isnan(g[bad]) | (g[bad] <= lo[bad]), 1, 2).astype(np.int8)
        cbar[:, k - 1] = np.where(act, c_k, cbar[:, k - 1])
        gamma[:, k - 1] = np.where(act & valid, g, np.nan)
        # continuity: sigma_{k+1}(gamma_k) = cap_k pins the next constant
        nxt = n_branch >= k + 1
        if nxt.any():
            m2 = np.maximum(n_str - (k + 1), 1).astype(float)
            g_safe = np.where(act & valid & nxt, g, 1.0)
            with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
                if affine:
                    f2 = _affine_f(curve.a, pbar, m2, g_safe)
                else:
                    f2 = f_antideriv(curve, pbar, m2, g_safe)
                c_next = cap_k * g_safe ** (-1.0 / m2) + f2 / m2
            c_k = np.where(nxt, c_next, c_k)
        lo = np.where(act & valid, g, lo)
    return valid, cbar, gamma, fail_branch, fail_reason


def _minimal_c1(curve, pbar, n_str, n_branch, caps, rel_tol=1e-8):
    """Smallest admissible c_1 per row: expand a bracket, then bisect."""
    r = pbar.shape[0]
    if r == 0:
        return np.zeros(0)
    cap1 = caps[:, 0]
    # seed from the scale at which branch 1 could plausibly bind its cap
    p_seed = np.maximum(curve.inverse(np.minimum(cap1, 1e300)), 1.0)
    seed = np.maximum(cap1 / np.maximum(p_seed, 1e-12) ** (1.0 / np.maximum(n_str - 1, 1)), 1e-6)
    c_hi = seed.copy()
    ok = _stitch_given_c1(curve, pbar, n_str, n_branch, caps, c_hi)[0]
    for _ in range(200):
        if ok.all():
            break
        idx = np.flatnonzero(~ok)
        c_hi[idx] = np.where(c_hi[idx] > 0, c_hi[idx] * 2.0, 1e-6)
        ok[idx] = _stitch_given_c1(
            curve, pbar[idx], n_str[idx], n_branch[idx], caps[idx], c_hi[idx]
        )[0]
    else:
        raise RTSolveError("no admissible c_1 found while expanding the bracket")
    # expand down to an inadmissible lower edge
    step = np.maximum(np.abs(c_hi), 1.0)
    c_lo = c_hi - step
    bad = ~_stitch_given_c1(curve, pbar, n_str, n_branch, caps, c_lo)[0]
    for _ in range(200):
        if bad.all():
            break
        idx = np.flatnonzero(~bad)
        c_hi[idx] = np.minimum(c_lo[idx], c_hi[idx])
        step[idx] *= 2.0
        c_lo[idx] -= step[idx]
        bad[idx] = ~_stitch_given_c1(
            curve, pbar[idx], n_str[idx], n_branch[idx], caps[idx], c_lo[idx]
        )[0]
    else:
        raise RTSolveError("admissibility did not fail while shrinking c_1")
    # per-row stopping so a row's result never depends on its batch mates
    for _ in range(160):
        active = (c_hi - c_lo) > rel_tol * np.maximum(np.abs(c_hi), 1e-12)
        if not active.any():
            break
        idx = np.flatnonzero(active)
        mid = 0.5 * (c_lo[idx] + c_hi[idx])
        ok = _stitch_given_c1(curve, pbar[idx], n_str[idx], n_branch[idx], caps[idx], mid)[0]
        c_hi[idx] = np.where(ok, mid, c_hi[idx])
        c_lo[idx] = np.where(ok, c_lo[idx], mid)
    return c_hi


def solve_rt_batch(
    curve: ConventionalCurve,
    pf: np.ndarray,
    s_pf: np.ndarray,
    caps_raw: np.ndarray,
    d_r: np.ndarray,
    allow_competitive: bool = True,
    c1_rel_tol: float = 1e-8,
    track_branches: bool = False,
) -> RTBatch:
    """Solve the RT stage for R rows at once.

    caps_raw are per-supplier residual caps (R, N); d_r is (R, T).
    """
    pf = np.asarray(pf, dtype=float)
    r = pf.shape[0]
    d_r = np.asarray(d_r, dtype=float).reshape(r, -1)
    caps, n_str = _strategic_caps_matrix(np.asarray(caps_raw, dtype=float))
    dmax = d_r.max(axis=1)
    dmin = d_r.min(axis=1)
    c_pf = np.asarray(curve.quantity(pf), dtype=float).reshape(r)
    pbar = np.maximum(pf, curve.p_c)

    mode = np.full(r, MODE_SFE, dtype=np.int8)
    mode[n_str == 1] = MODE_COMPETITIVE
    mode[n_str == 0] = MODE_CONVENTIONAL_ONLY
    mode[dmax <= 0.0] = MODE_NO_RT
    if not allow_competitive and (mode == MODE_COMPETITIVE).any():
        raise RTSolveError("single strategic supplier and competitive fallback disabled")

    gamma0 = np.where(dmin > 0.0, np.where(dmin > c_pf, curve.inverse(np.maximum(dmin, 0.0)), 0.0), 0.0)
    m_s = _truncation_index(caps, n_str, dmax)
    if caps.shape[1]:
        comp_cap = np.where(n_str == 1, caps[:, 0], 0.0)
        comp_cap[~np.isfinite(comp_cap)] = 0.0
    else:
        comp_cap = np.zeros(r)

    sfe = mode == MODE_SFE
    c1 = np.full(r, np.nan)
    b_all = int(np.maximum(m_s - 1, 1).max())
    cbar = np.full((r, b_all), np.nan)
    gamma = np.full((r, b_all), np.nan)
    if sfe.any():
        idx = np.flatnonzero(sfe)
        n_branch = (m_s - 1)[idx]
        c1_s = _minimal_c1(curve, pbar[idx], n_str[idx], n_branch, caps[idx], rel_tol=c1_rel_tol)
        ok, cb, gm, fb, fr = _stitch_given_c1(curve, pbar[idx], n_str[idx], n_branch, caps[idx], c1_s)
        if not ok.all():
            raise RTSolveError("minimal c_1 re-stitch invalid; bracket failure")
        c1[idx] = c1_s
        cbar[idx, : cb.shape[1]] = cb
        gamma[idx, : gm.shape[1]] = gm

    if caps.shape[1]:
        capv = np.full((r, b_all), np.nan)
        k_fill = min(b_all, caps.shape[1])
        capv[:, :k_fill] = np.where(np.isfinite(caps[:, :k_fill]), caps[:, :k_fill], np.nan)
        finite = np.where(np.isfinite(caps), caps, 0.0)
        caps_total = finite.sum(axis=1)
        cap_top = finite.max(axis=1)
    else:
        capv = np.full((r, b_all), np.nan)
        caps_total = np.zeros(r)
        cap_top = np.zeros(r)
    prefix = np.zeros((r, b_all + 1))
    prefix[:, 1:] = np.cumsum(np.nan_to_num(capv), axis=1)
    return RTBatch(
        caps_total=caps_total,
        cap_top=cap_top,
        curve=curve,
        pf=pf,
        c_pf=c_pf,
        pbar=pbar,
        mode=mode,
        n_str=n_str,
        caps=caps,
        m_s=m_s,
        gamma0=gamma0,
        c1=c1,
        cbar=cbar,
        gamma=gamma,
        capv=capv,
        prefix=prefix,
        comp_cap=comp_cap,
        track_branches=track_branches,
        max_branch_used=np.zeros(r, dtype=np.int64) if track_branches else None,
    )


def _eval_curve_batch(batch: RTBatch, p: np.ndarray, need_deriv: bool = True):
    """Evaluate the stitched common curve at (R, T) prices.

    Returns (sig, branch_idx, n_below, renew_total, dsig):
      sig      common-curve value S(p) before per-supplier caps
      n_below  suppliers strictly below their caps at p
      renew    sum_i min(S(p), cap_i)
      dsig     S'(p) (0 beyond the last breakpoint / in the flat region)
    """
    r, t = p.shape
    q = np.maximum(p - batch.gamma0[:, None], 0.0)
    gam = np.where(np.isnan(batch.gamma), np.inf, batch.gamma)  # (R, B)
    # breakpoints below q, with 1-ulp slack so evaluating exactly at a
    # breakpoint (after the gamma0 shift round trip) stays on its branch
    b_idx = (q[:, :, None] > gam[:, None, :] * (1.0 + 1e-12)).sum(axis=2)
    n_branch = batch.n_branch
    in_flat = b_idx >= n_branch[:, None]
    k = np.minimum(b_idx + 1, np.maximum(n_branch, 1)[:, None])  # active branch
    m = np.maximum(batch.n_str[:, None] - k, 1).astype(float)
    c_k = np.take_along_axis(batch.cbar, np.maximum(k - 1, 0), axis=1)
    if batch.curve.family == "affine":
        sig = _affine_sigma(batch.curve.a, batch.pbar[:, None], c_k, m, q)
        if need_deriv:
            slope = np.where(q > batch.pbar[:, None], batch.curve.a, 0.0)
            with np.errstate(invalid="ignore", divide="ignore"):
                dsig = np.where(q > 0.0, (sig - q * slope) / (m * q), 0.0)
        else:
            dsig = None
    else:
        pbar2 = np.broadcast_to(batch.pbar[:, None], (r, t))
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            sig = sigma_val(batch.curve, pbar2, m, c_k, q)
            dsig = sigma_deriv(batch.curve, pbar2, m, c_k, q) if need_deriv else None
    # beyond the last breakpoint: with no truncation every supplier binds its
    # own cap (the top supplier has no breakpoint of its own); a truncated
    # curve freezes at the last bound cap, but clearing never lands there
    full = (batch.m_s == batch.n_str)[:, None]
    last_cap = np.take_along_axis(
        np.nan_to_num(batch.capv, nan=0.0), np.maximum(n_branch - 1, 0)[:, None], axis=1
    )
    flat_sig = np.where(full, batch.cap_top[:, None], last_cap)
    sig = np.where(in_flat, flat_sig, sig)
    sig = np.where(q <= 0.0, 0.0, sig)
    if need_deriv:
        dsig = np.where(in_flat | (q <= 0.0), 0.0, dsig)
    capped = np.minimum(b_idx, n_branch[:, None])
    pre = np.take_along_axis(batch.prefix, capped, axis=1)
    n_below = np.maximum(batch.n_str[:, None] - capped, 0)
    renew = pre + n_below * sig
    flat_renew = np.where(full, batch.caps_total[:, None], pre + n_below * last_cap)
    renew = np.where(in_flat, flat_renew, renew)
    n_below = np.where(in_flat, 0, n_below)
    # non-SFE rows
    comp = batch.mode == MODE_COMPETITIVE
    if comp.any():
        supply = np.where(p > 0.0, batch.comp_cap[:, None], 0.0)
        sig = np.where(comp[:, None], supply, sig)
        renew = np.where(comp[:, None], supply, renew)
        n_below = np.where(comp[:, None], 0, n_below)
        if need_deriv:
            dsig = np.where(comp[:, None], 0.0, dsig)
    other = (batch.mode == MODE_NO_RT) | (batch.mode == MODE_CONVENTIONAL_ONLY)
    if other.any():
        sig = np.where(other[:, None], 0.0, sig)
        renew = np.where(other[:, None], 0.0, renew)
        n_below = np.where(other[:, None], 0, n_below)
        if need_deriv:
            dsig = np.where(other[:, None], 0.0, dsig)
    if batch.track_branches:
        used = np.where((batch.mode == MODE_SFE)[:, None] & (q > 0.0), k, 0)
        np.maximum(batch.max_branch_used, used.max(axis=1), out=batch.max_branch_used)
    return sig, k, n_below, renew, dsig


def _cbar_minus_cpf(batch: RTBatch, p: np.ndarray):
    """Cbar(p) - C(p_f): incremental conventional supply in RT."""
    if batch.curve.family == "affine":
        return batch.curve.a * np.maximum(p - batch.pbar[:, None], 0.0)
    base = np.asarray(batch.curve.quantity(np.maximum(p, 0.0)))
    return np.maximum(base - batch.c_pf[:, None], 0.0)


def clear_rt_batch(batch: RTBatch, d_r: np.ndarray, iters: int = _CLEAR_ITERS):
    """Smallest p >= 0 balancing supply with residual demand, per (row, t)."""
    from . import _kernels

    r = batch.n_rows
    d_r = np.asarray(d_r, dtype=float).reshape(r, -1)
    target = d_r
    if batch.curve.family == "affine" and _kernels.HAVE_NUMBA and not batch.track_branches:
        nb = batch.n_branch.astype(np.int64)
        cap_last = np.take_along_axis(
            np.nan_to_num(batch.capv, nan=0.0), np.maximum(nb - 1, 0)[:, None], axis=1
        )[:, 0]
        return _kernels.clear_affine(
            np.ascontiguousarray(target),
            batch.gamma0,
            batch.pbar,
            batch.curve.a,
            np.ascontiguousarray(np.where(np.isnan(batch.gamma), np.inf, batch.gamma)),
            np.ascontiguousarray(np.nan_to_num(batch.cbar, nan=0.0)),
            nb,
            batch.n_str.astype(np.int64),
            np.ascontiguousarray(batch.prefix),
            cap_last,
            batch.caps_total,
            batch.m_s == batch.n_str,
            batch.mode,
            batch.comp_cap,
            iters,
        )
    active = target > 0.0
    p_hi = np.asarray(
        batch.curve.inverse(np.maximum(batch.c_pf[:, None] + np.maximum(target, 0.0), 0.0))
    )
    p_hi = np.maximum(p_hi, batch.gamma0[:, None] + 1e-9) * (1.0 + 1e-9) + 1e-12
    lo = np.zeros_like(target)
    hi = np.where(active, p_hi, 0.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        _, _, _, renew, _ = _eval_curve_batch(batch, mid, need_deriv=False)
        agg = renew + _cbar_minus_cpf(batch, mid)
        above = agg >= target
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    p_s = np.where(active, hi, 0.0)
    return p_s


def rt_terms_batch(batch: RTBatch, d_r: np.ndarray):
    """Clear and return the pieces the day-ahead stage averages over.

    Returns dict with p_s, renew (sum_i min(S, cap_i)), sum_slope
    (sum_i S_i'(p_s)), and sig (common curve value at p_s).
    """
    p_s = clear_rt_batch(batch, d_r)
    sig, _, n_below, renew, dsig = _eval_curve_batch(batch, p_s)
    return {
        "p_s": p_s,
        "sig": sig,
        "renew": renew,
        "sum_slope": n_below * dsig,
    }


# ---------------------------------------------------------------------------
# Single-state API
# ---------------------------------------------------------------------------


@dataclass
class StitchedSFE:
    """Piecewise real-time equilibrium supply function for one state."""

    curve: EffectiveRTCurve
    mode: int
    n_strategic: int
    strategic_caps: np.ndarray  # ascending
    truncation_index: int  # M_S
    gamma0: float
    constants: np.ndarray  # (B,) branch constants
    breakpoints: np.ndarray  # (B,) gamma_1..gamma_B
    caps_bound: np.ndarray  # (B,) caps attained at the breakpoints
    _batch: RTBatch = None

    @property
    def boundary_attained(self) -> bool:
        """Classification of an on-the-boundary truncation (metadata)."""
        return True

    def value(self, p):
        """Common-curve value S(p) before per-supplier capping."""
        p_arr = np.atleast_1d(np.asarray(p, dtype=float))
        sig, _, _, _, _ = _eval_curve_batch(self._batch, p_arr[None, :])
        out = sig[0]
        return out if np.ndim(p) else float(out[0])

    def supplier_value(self, p, cap):
        return np.minimum(self.value(p), cap)

    def aggregate(self, p):
        """sum_i min(S(p), cap_i) + Cbar(p) - C(p_f)."""
        p_arr = np.atleast_1d(np.asarray(p, dtype=float))
        _, _, _, renew, _ = _eval_curve_batch(self._batch, p_arr[None, :])
        out = renew[0] + np.asarray(_cbar_minus_cpf(self._batch, p_arr[None, :]))[0]
        return out if np.ndim(p) else float(out[0])

    def deriv(self, p):
        p_arr = np.atleast_1d(np.asarray(p, dtype=float))
        _, _, _, _, dsig = _eval_curve_batch(self._batch, p_arr[None, :])
        out = dsig[0]
        return out if np.ndim(p) else float(out[0])

    def check_shape(self, jump_tol=1e-7, grid_points=200):
        """Continuity, monotonicity and cap attainment on a fine grid.

        Breakpoints are in market-price coordinates (shifted by gamma0).
        """
        if self.mode != MODE_SFE:
            return
        lo = self.gamma0
        for k, (g, cap) in enumerate(zip(self.breakpoints, self.caps_bound), start=1):
            span = g - lo
            if span <= 0:
                raise RTSolveError("breakpoints not strictly increasing")
            offs = np.geomspace(max(span * 1e-9, 1e-15), span, grid_points)
            vals = self.value(lo + offs)
            if np.any(np.diff(vals) < -1e-12 * max(cap, 1.0)):
                raise RTSolveError(f"branch {k} not monotone")
            if abs(vals[-1] - cap) > jump_tol:
                raise RTSolveError(f"cap mismatch at gamma_{k}: {vals[-1]} vs {cap}")
            lo = g


def _batch_from_state(
    rs: ResidualState, curve: EffectiveRTCurve, allow_competitive=True, track_branches=False
) -> RTBatch:
    caps_raw = np.asarray(rs.residual_caps, dtype=float)[None, :]
    return solve_rt_batch(
        curve.base,
        np.asarray([curve.da_price]),
        np.asarray([rs.da_supplier_quantity]),
        caps_raw,
        np.asarray(rs.residual_demand, dtype=float)[None, :],
        allow_competitive=allow_competitive,
        track_branches=track_branches,
    )


def _sfe_from_batch(batch: RTBatch, row: int = 0) -> StitchedSFE:
    nb = int(batch.n_branch[row]) if batch.mode[row] == MODE_SFE else 0
    caps = batch.caps[row]
    g0 = float(batch.gamma0[row])
    return StitchedSFE(
        curve=EffectiveRTCurve(batch.curve, float(batch.pf[row])),
        mode=int(batch.mode[row]),
        n_strategic=int(batch.n_str[row]),
        strategic_caps=caps[np.isfinite(caps)],
        truncation_index=int(batch.m_s[row]),
        gamma0=g0,
        constants=batch.cbar[row, :nb].copy(),
        breakpoints=g0 + batch.gamma[row, :nb],
        caps_bound=batch.capv[row, :nb].copy(),
        _batch=batch,
    )


def stitch_candidate(c1: float, rs: ResidualState, curve: EffectiveRTCurve):
    """Stitch the curve for a given c_1; returns StitchedSFE or StitchInvalid."""
    if rs.strategic_count < 2:
        raise DomainError("stitching needs at least two strategic suppliers")
    caps, n_str = _strategic_caps_matrix(np.asarray(rs.residual_caps)[None, :])
    dmax = np.asarray([rs.max_residual])
    m_s = _truncation_index(caps, n_str, dmax)
    n_branch = m_s - 1
    pbar = np.asarray([curve.active_from])
    ok, cbar, gamma, fb, fr = _stitch_given_c1(
        curve.base, pbar, n_str, n_branch, caps, np.asarray([float(c1)])
    )
    if not ok[0]:
        return StitchInvalid(
            branch=int(fb[0]), reason="attainment" if fr[0] == 1 else "ordering"
        )
    # package through the batch machinery so evaluation semantics are shared
    batch = _batch_from_state(rs, curve)
    if batch.mode[0] == MODE_SFE:
        batch.c1[0] = float(c1)
        _, cb, gm, _, _ = _stitch_given_c1(
            curve.base, batch.pbar, batch.n_str, batch.m_s - 1, batch.caps, batch.c1
        )
        batch.cbar[:, : cb.shape[1]] = cb
        batch.gamma[:, : gm.shape[1]] = gm
    sfe = _sfe_from_batch(batch)
    sfe.check_shape()
    return sfe


def solve_rt_sfe(
    rs: ResidualState,
    curve: EffectiveRTCurve,
    allow_competitive: bool = True,
    track_branches: bool = False,
) -> StitchedSFE:
    """Unique RT equilibrium: minimal admissible c_1, plus the relaxations."""
    batch = _batch_from_state(
        rs, curve, allow_competitive=allow_competitive, track_branches=track_branches
    )
    sfe = _sfe_from_batch(batch)
    if sfe.mode == MODE_SFE:
        sfe.check_shape()
    return sfe


def clear_rt(sfe: StitchedSFE, rs: ResidualState, t: int):
    """Smallest RT price balancing supply and residual demand at step t."""
    d = float(rs.residual_demand[t])
    if d <= 0.0:
        return 0.0
    p = clear_rt_batch(sfe._batch, np.asarray([[d]]))
    p_s = float(p[0, 0])
    agg = sfe.aggregate(p_s) if sfe.mode == MODE_SFE else None
    if agg is not None and agg < d - 1e-6 * max(d, 1.0):
        raise RTSolveError(f"residual demand {d} exceeds attainable supply {agg}")
    return p_s


def clear_rt_all(sfe: StitchedSFE, rs: ResidualState) -> np.ndarray:
    d = np.asarray(rs.residual_demand, dtype=float)[None, :]
    return clear_rt_batch(sfe._batch, d)[0]


def rt_payoff(i: int, sfe: StitchedSFE, rs: ResidualState, t: int) -> float:
    """min(S(p_s), cap_i) * p_s for supplier i (index into ascending caps)."""
    p_s = clear_rt(sfe, rs, t)
    if p_s == 0.0:
        return 0.0
    cap = float(rs.residual_caps[i])
    return float(min(sfe.value(p_s), cap) * p_s)


def best_response_check(
    sfe: StitchedSFE, rs: ResidualState, i: int, grid_size: int = 401, relative: bool = False
) -> float:
    """Largest payoff gain supplier i can get by deviating on a quantity grid.

    The market is re-cleared with all other curves held fixed; at an SFE the
    returned improvement is nonpositive up to tolerance.  With
    ``relative=True`` the gain at each step is scaled by the equilibrium
    payoff at that step.
    """
    cap = float(rs.residual_caps[i])
    if cap <= 0.0:
        return 0.0
    grid = np.linspace(0.0, cap, grid_size)
    best = 0.0
    for t in range(rs.residual_demand.shape[0]):
        d = float(rs.residual_demand[t])
        if d <= 0.0:
            continue
        p_eq = clear_rt(sfe, rs, t)
        eq_pay = min(sfe.value(p_eq), cap) * p_eq
        p_dev = _clear_with_deviation(sfe, rs, i, grid, d)
        gain = float((grid * p_dev).max() - eq_pay)
        if relative:
            gain = gain / max(eq_pay, 1e-12)
        best = max(best, gain)
    return best


def _clear_with_deviation(sfe, rs, i, q_dev, d):
    """Clearing prices when supplier i offers the fixed quantities q_dev."""
    batch = sfe._batch
    cap_i = float(rs.residual_caps[i])
    lo = np.zeros_like(q_dev)
    hi = np.full_like(
        q_dev, float(batch.curve.inverse(batch.c_pf[0] + max(d, 0.0))) * (1.0 + 1e-9) + 1e-12
    )
    hi = np.maximum(hi, batch.gamma0[0] + 1e-9)
    for _ in range(_CLEAR_ITERS):
        mid = 0.5 * (lo + hi)
        sig, _, _, renew, _ = _eval_curve_batch(batch, mid[None, :])
        others = renew[0] - np.minimum(sig[0], cap_i)
        agg = q_dev + others + np.asarray(_cbar_minus_cpf(batch, mid[None, :]))[0]
        above = agg >= d
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return hi
