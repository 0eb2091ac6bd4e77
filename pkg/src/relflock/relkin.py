"""Lorentz kinematics: the velocity maps everything else leans on.

Classical velocities v live in the open ball |v| < c; the relativistic
velocity w = F(|v|) v is unbounded.  The radial profile g(r) = |w(r)| is
smooth and strictly increasing on [0, c), so inverting the map reduces to
scalar root finding.

Velocity arguments are vectorized over leading axes: shape (..., d) in,
scalars of shape (...) out.  All functions are pure and hold no state.
"""

from __future__ import annotations

import numpy as np

# g is smooth, convex and strictly increasing with a known bracket [0, c),
# so a guarded Newton always lands; hitting the cap means a bug, not input.
_INV_TOL = 1e-13
_INV_CAP = 200

__all__ = [
    "lorentz_gamma",
    "speed_factor",
    "w_of_v",
    "v_of_w",
    "g_of_speed",
    "dg_of_speed",
    "g_inverse",
    "energy",
    "jacobian_eigs",
    "eigs_of_speed",
    "div_w_vhat",
    "div_lipschitz_bound",
]


def _speed_gap(v, c):
    """c^2 - |v|^2; the conditioning variable used near the light speed."""
    v = np.asarray(v, dtype=float)
    s = c * c - np.einsum("...i,...i->...", v, v)
    if np.any(s <= 0.0):
        raise ValueError(f"classical velocity must satisfy |v| < c = {c}")
    return s


def _radius_gap(r, c):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0.0):
        raise ValueError("speeds are nonnegative")
    s = c * c - r * r
    if np.any(s <= 0.0):
        raise ValueError(f"speed must stay strictly below c = {c}")
    return s


def lorentz_gamma(v, c):
    """Dilation factor c / sqrt(c^2 - |v|^2); equals 1 at rest."""
    return c / np.sqrt(_speed_gap(v, c))


def speed_factor(v, c):
    """Radial stretch F(v) = Gamma (1 + Gamma / c^2) of the velocity map."""
    gam = lorentz_gamma(v, c)
    return gam + gam * gam / (c * c)


def w_of_v(v, c):
    """Relativistic velocity w = F(v) v for classical v with |v| < c."""
    v = np.asarray(v, dtype=float)
    return v * speed_factor(v, c)[..., None]


def g_of_speed(r, c):
    """Speed profile g(r) = c r / sqrt(c^2 - r^2) + r / (c^2 - r^2)."""
    s = _radius_gap(r, c)
    return np.asarray(r, dtype=float) * (c / np.sqrt(s) + 1.0 / s)


def dg_of_speed(r, c):
    """g'(r), which is also the radial Jacobian eigenvalue of the map."""
    r = np.asarray(r, dtype=float)
    s = _radius_gap(r, c)
    r2 = r * r
    return c / np.sqrt(s) + 1.0 / s + c * r2 * s**-1.5 + 2.0 * r2 / (s * s)


def g_inverse(w_norm, c):
    """Invert g: the classical speed r with g(r) = |w|, strictly below c.

    Guarded Newton on the bracket [0, c): g is convex and increasing, so
    starting from an overestimate the iteration descends monotonically;
    a bisection fallback covers roundoff corner cases.
    """
    w_norm = np.asarray(w_norm, dtype=float)
    if np.any(w_norm < 0.0):
        raise ValueError("|w| is nonnegative")
    scalar = w_norm.ndim == 0
    wn = np.atleast_1d(w_norm).astype(float)

    hi_cap = c * (1.0 - 1e-15)
    r = np.minimum(c * wn / np.hypot(c, wn), hi_cap)  # root of the leading term
    lo = np.zeros_like(wn)
    hi = np.full_like(wn, hi_cap)
    active = wn > 0.0
    r[~active] = 0.0

    done = ~active
    for _ in range(_INV_CAP):
        if done.all():
            break
        s = c * c - r * r
        g = r * (c / np.sqrt(s) + 1.0 / s)
        f = g - wn
        lo = np.where((f < 0.0) & ~done, r, lo)
        hi = np.where((f > 0.0) & ~done, r, hi)
        dg = c / np.sqrt(s) + 1.0 / s + c * r * r * s**-1.5 + 2.0 * r * r / (s * s)
        step = f / dg
        r_new = r - step
        bad = ~np.isfinite(r_new) | (r_new <= lo) | (r_new >= hi)
        r_new = np.where(bad & ~done, 0.5 * (lo + hi), r_new)
        r_new = np.where(done, r, r_new)
        done |= np.abs(r_new - r) <= _INV_TOL * (1.0 + np.abs(r))
        r = r_new
    else:
        raise RuntimeError(
            "speed inversion failed to converge within "
            f"{_INV_CAP} iterations (this indicates a bug)"
        )
    r = np.minimum(r, hi_cap)
    return float(r[0]) if scalar else r.reshape(w_norm.shape)


def v_of_w(w, c):
    """Classical velocity for relativistic velocity w; |result| < c strictly."""
    w = np.asarray(w, dtype=float)
    wn = np.sqrt(np.einsum("...i,...i->...", w, w))
    r = np.asarray(g_inverse(wn, c))
    scale = np.divide(r, wn, out=np.zeros_like(r), where=wn > 0.0)
    return w * scale[..., None]


def energy(v, c):
    """Per-particle energy c^2 (Gamma - 1) + Gamma^2 - log Gamma; 1 at rest."""
    gam = lorentz_gamma(v, c)
    return c * c * (gam - 1.0) + gam * gam - np.log(gam)


def eigs_of_speed(r, c):
    """Jacobian eigenvalues of the velocity map at classical speed r.

    Returns (lam1, lam2): lam1 is tangential with multiplicity d - 1,
    lam2 = g'(r) is radial with multiplicity 1, and lam2 >= lam1 >= 1.
    """
    s = _radius_gap(r, c)
    r = np.asarray(r, dtype=float)
    lam1 = c / np.sqrt(s) + 1.0 / s
    lam2 = lam1 + c * r * r * s**-1.5 + 2.0 * r * r / (s * s)
    return lam1, lam2


def jacobian_eigs(v, c):
    """Jacobian eigenvalues of w(v) at classical velocity v."""
    v = np.asarray(v, dtype=float)
    return eigs_of_speed(np.sqrt(np.einsum("...i,...i->...", v, v)), c)


def div_w_vhat(w, c, d):
    """Divergence of the inverse map: (d-1)/lam1 + 1/lam2 at v(w); in (0, d)."""
    w = np.asarray(w, dtype=float)
    wn = np.sqrt(np.einsum("...i,...i->...", w, w))
    lam1, lam2 = eigs_of_speed(g_inverse(wn, c), c)
    return (d - 1) / lam1 + 1.0 / lam2


def div_lipschitz_bound(v_max, c, d):
    """Lipschitz constant of w -> div v(w) over classical speeds <= v_max.

    Both Jacobian eigenvalues are increasing in the speed with minimum
    1 + 1/c^2 at rest, and their derivatives are increasing too, so the
    bound is d * max_i sup |lam_i'| / (1 + 1/c^2)^2.
    """
    s = _radius_gap(v_max, c)
    r = float(v_max)
    lam1p = c * r * s**-1.5 + 2.0 * r / (s * s)
    lam2p = 3.0 * c * r * s**-1.5 + 3.0 * c * r**3 * s**-2.5 + 6.0 * r / (s * s) + 8.0 * r**3 / s**3
    lip = max(lam1p, lam2p)
    g0 = 1.0 + 1.0 / (c * c)
    return d * lip / (g0 * g0)
