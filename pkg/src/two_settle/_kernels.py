"""Compiled hot loops for the affine curve family.

The per-cell market clearing bisection dominates runtime at desk scale
(scenarios x time steps x price-grid points).  numba turns it into a tight
scalar loop; rt_sfe falls back to the vectorized numpy path when numba is
unavailable or the curve family is not affine.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap

    prange = range


@njit(cache=True, inline="always")
def _sigma_affine_scalar(a, pbar, c, m, q):
    if q <= 0.0:
        return 0.0
    if q <= pbar:
        f = 0.0
    elif m > 1.0:
        e = 1.0 - 1.0 / m
        f = a * (m / (m - 1.0)) * (q**e - pbar**e)
    else:
        r = pbar if pbar > 0.0 else 1.0
        f = a * np.log(q / r)
    return q ** (1.0 / m) * (c - f / m)


@njit(cache=True, parallel=True)
def clear_affine(
    targets,  # (R, T)
    gamma0,  # (R,)
    pbar,  # (R,)
    a,  # scalar
    gam,  # (R, B) breakpoints, inf padded
    cbar,  # (R, B) constants
    nb,  # (R,) branch count
    n_str,  # (R,)
    prefix,  # (R, B + 1)
    cap_last,  # (R,)
    caps_total,  # (R,) full strategic cap sum (untruncated flat supply)
    full,  # (R,) bool: truncation index equals the strategic count
    mode,  # (R,) 0 sfe, 1 no_rt, 2 competitive, 3 conventional-only
    comp_cap,  # (R,)
    iters,
):
    r_n, t_n = targets.shape
    out = np.zeros((r_n, t_n))
    b_n = gam.shape[1]
    for r in prange(r_n):
        g0 = gamma0[r]
        pb = pbar[r]
        md = mode[r]
        nbr = nb[r]
        ns = n_str[r]
        flat_renew = caps_total[r] if full[r] else prefix[r, nbr] + (ns - nbr) * cap_last[r]
        for t in range(t_n):
            d = targets[r, t]
            if d <= 0.0 or md == 1:
                continue
            if md == 3:
                out[r, t] = pb + d / a
                continue
            if md == 2:
                cc = comp_cap[r]
                out[r, t] = 0.0 if d <= cc else pb + (d - cc) / a
                continue
            lo = 0.0
            hi = pb + d / a
            if hi <= g0:
                hi = g0 + 1e-9
            hi = hi * (1.0 + 1e-9) + 1e-12
            for _ in range(iters):
                mid = 0.5 * (lo + hi)
                q = mid - g0
                if q < 0.0:
                    q = 0.0
                b = 0
                for j in range(b_n):
                    if j < nbr and q > gam[r, j] * (1.0 + 1e-12):
                        b += 1
                if b >= nbr:
                    renew = flat_renew
                else:
                    sig = _sigma_affine_scalar(a, pb, cbar[r, b], float(ns - b - 1), q)
                    renew = prefix[r, b] + (ns - b) * sig
                conv = a * (mid - pb) if mid > pb else 0.0
                if renew + conv >= d:
                    hi = mid
                else:
                    lo = mid
            out[r, t] = hi
    return out
