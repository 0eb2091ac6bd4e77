"""Every quantity the stability theory speaks about: the conservation
ledger, the Lyapunov functional and its dissipation, decay-rate machinery,
moments and support radii, and the energy identity terms.

All computations are read-only over ensemble/field snapshots.  Quadratic
exchange terms (the |u - w|^2 drag dissipation and the cross term of the
energy ledger) interpolate the grid product |u|^2 rather than squaring the
interpolated u; with matched cloud-in-cell kernels that closes the discrete
ledgers exactly, so the reported residuals measure time discretization
alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import coupling, fluid, relkin
from .kernels import phi_min_over_torus

#: First nonzero Laplace eigenvalue on the unit torus is (2 pi)^2, so the
#: mean-zero Poincare constant is its inverse.
POINCARE_CONSTANT = 1.0 / (4.0 * np.pi**2)

_AXES = "xyz"


def centers(ens, field):
    """Mass-averaged particle velocity and mean fluid velocity."""
    if ens is None or ens.n == 0:
        w_c = np.zeros(field.grid.d)
    else:
        w_c = (ens.masses @ ens.w) / ens.total_mass()
    return w_c, field.mean_flow()


def lyapunov(ens, field):
    """(Ew, Eu, Er, L): squared deviations from the aligned state."""
    w_c, u_c = centers(ens, field)
    if ens is None or ens.n == 0:
        ew = 0.0
    else:
        dev = ens.w - w_c
        ew = float(np.sum(ens.masses * np.einsum("pi,pi->p", dev, dev)))
    eu = fluid.fluctuation_norm_sq(field)
    er = 0.5 * float(np.sum((u_c - w_c) ** 2))
    return ew, eu, er, ew + eu + er


def contraction_constant(c, w0):
    """(c^2+1) / (c^2 C0^2) with C0 the radial Jacobian eigenvalue at the
    classical speed corresponding to |w| = w0."""
    r = relkin.g_inverse(max(float(w0), 0.0), c)
    _, lam2 = relkin.eigs_of_speed(r, c)
    return (c * c + 1.0) / (c * c * lam2 * lam2)


def _pair_sums(ens, kernel, v):
    """(sum phi |dv|^2, sum phi dw.dv) over ordered particle pairs."""
    if ens.n == 0:
        return 0.0, 0.0
    m = ens.masses
    if kernel.family == "constant":
        amp = kernel.amplitude
        mtot = float(np.sum(m))
        mv = m @ v
        mw = m @ ens.w
        sv2 = float(np.sum(m * np.einsum("pi,pi->p", v, v)))
        swv = float(np.sum(m * np.einsum("pi,pi->p", ens.w, v)))
        dv2 = 2.0 * amp * (mtot * sv2 - float(mv @ mv))
        dwdv = 2.0 * amp * (mtot * swv - float(mw @ mv))
        return dv2, dwdv
    dv2 = 0.0
    dwdv = 0.0
    chunk = max(1, 4_000_000 // ens.n)
    for start in range(0, ens.n, chunk):
        sl = slice(start, start + chunk)
        delta = ens.x[sl, None, :] - ens.x[None, :, :]
        delta -= np.round(delta)
        r = np.sqrt(np.einsum("pqi,pqi->pq", delta, delta))
        phi = kernel.phi(r) * (m[sl, None] * m[None, :])
        dvv = v[sl, None, :] - v[None, :, :]
        dv2 += float(np.sum(phi * np.einsum("pqi,pqi->pq", dvv, dvv)))
        dww = ens.w[sl, None, :] - ens.w[None, :, :]
        dwdv += float(np.sum(phi * np.einsum("pqi,pqi->pq", dww, dvv)))
    return dv2, dwdv


def drag_dissipation_term(ens, field, u_at=None, u2_at=None, u_phys=None):
    """Discrete integral of |u - w|^2 against the particle measure.

    Interpolates the grid field |u|^2 for the quadratic-in-u part so the
    term pairs exactly with the fluid-side drag work.
    """
    if ens is None or ens.n == 0:
        return 0.0
    grid = field.grid
    if u_phys is None:
        u_phys = field.physical()
    if u_at is None:
        u_at = coupling.gather_grid(u_phys, ens.x, grid)
    if u2_at is None:
        u2_at = coupling.gather_grid(np.sum(u_phys * u_phys, axis=0), ens.x, grid)
    w2 = np.einsum("pi,pi->p", ens.w, ens.w)
    return float(np.sum(ens.masses * (u2_at - 2.0 * np.einsum("pi,pi->p", u_at, ens.w) + w2)))


def dissipation(ens, field, kernel, mu, w0, drag_diss=None, ew=None):
    """The Lyapunov dissipation: alignment, viscous, and drag parts."""
    if ew is None:
        ew = lyapunov(ens, field)[0]
    if drag_diss is None:
        drag_diss = drag_dissipation_term(ens, field)
    c = ens.c if ens is not None and ens.n > 0 else None
    align = 0.0
    if ens is not None and ens.n > 0:
        align = contraction_constant(c, w0) * phi_min_over_torus(kernel) * ew
    return align + mu * fluid.gradient_norm_sq(field) + drag_diss


def theoretical_rate(rho_inf, mu, c=None, w0=None, kernel=None):
    """Guaranteed decay rate 1 / max{1, C_P (1/2 + rho_inf) / mu}."""
    del c, w0, kernel  # the comparison constant does not involve them
    return 1.0 / max(1.0, POINCARE_CONSTANT * (0.5 + rho_inf) / mu)


def energy_ledger(ens, field, kernel, mu, v=None, u_at=None, u2_at=None, u_phys=None):
    """(energy_total, grad_u_sq, cross_term, energy_rhs).

    The ledger closes along the semi-discrete flow: d/dt energy_total
    + mu grad_u_sq + cross_term - energy_rhs = 0 up to time discretization.
    """
    grid = field.grid
    if u_phys is None:
        u_phys = field.physical()
    grad_sq = fluid.gradient_norm_sq(field)
    if ens is None or ens.n == 0:
        return 0.5 * fluid.l2_norm_sq(field), grad_sq, 0.0, 0.0
    if v is None:
        v = ens.velocities()
    if u_at is None:
        u_at = coupling.gather_grid(u_phys, ens.x, grid)
    if u2_at is None:
        u2_at = coupling.gather_grid(np.sum(u_phys * u_phys, axis=0), ens.x, grid)
    total = float(np.sum(ens.masses * relkin.energy(v, ens.c))) + 0.5 * fluid.l2_norm_sq(field)
    cross = float(
        np.sum(
            ens.masses
            * (
                u2_at
                - np.einsum("pi,pi->p", u_at, ens.w + v)
                + np.einsum("pi,pi->p", v, ens.w)
            )
        )
    )
    dv2, _ = _pair_sums(ens, kernel, v)
    return total, grad_sq, cross, -0.5 * dv2


def alignment_w_dissipation(ens, kernel, v=None):
    """Raw discrete alignment dissipation 0.5 sum phi (dw . dv) for audit."""
    if ens is None or ens.n == 0:
        return 0.0
    if v is None:
        v = ens.velocities()
    _, dwdv = _pair_sums(ens, kernel, v)
    return 0.5 * dwdv


def moments(ens, alphas):
    """Velocity moments sum_p m_p |w_p|^alpha for each requested alpha."""
    out = np.zeros(len(alphas))
    if ens is None or ens.n == 0:
        return out
    wn = np.linalg.norm(ens.w, axis=1)
    for i, alpha in enumerate(alphas):
        if alpha < 0:
            raise ValueError("moment order must be nonnegative")
        out[i] = float(np.sum(ens.masses * wn**alpha))
    return out


def flocking_probability(ens, sigma):
    """Mass fraction farther than sigma from the velocity center."""
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    if ens is None or ens.n == 0:
        return 0.0
    w_c = (ens.masses @ ens.w) / ens.total_mass()
    far = np.linalg.norm(ens.w - w_c, axis=1) > sigma
    return float(np.sum(ens.masses[far]))


@dataclass
class XWHistogram:
    """Position-cell x radial-velocity-shell histogram of an ensemble.

    Shell-wise constant densities make the binned distribution a genuine
    density function, so moment integrals over it are exact.
    """

    mass: np.ndarray  # (n_cells, n_shells)
    shell_edges: np.ndarray
    cell_volume: float
    d: int

    def sup_density(self):
        vols = _shell_volumes(self.shell_edges, self.d)
        return np.max(self.mass / (self.cell_volume * vols[None, :]), axis=1, initial=0.0)


def _ball_volume(d):
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)


def _shell_volumes(edges, d):
    vd = _ball_volume(d)
    return vd * (edges[1:] ** d - edges[:-1] ** d)


def _shell_moment_integrals(edges, d, alpha):
    """integral over each shell of |w|^alpha dw, exactly."""
    sigma = d * _ball_volume(d)
    return sigma * (edges[1:] ** (alpha + d) - edges[:-1] ** (alpha + d)) / (alpha + d)


def build_xw_histogram(ens, n_xcells=4, n_shells=16):
    if ens.n == 0:
        raise ValueError("cannot histogram an empty ensemble")
    d = ens.d
    wn = np.linalg.norm(ens.w, axis=1)
    top = float(np.max(wn)) * (1.0 + 1e-12) + 1e-300
    edges = np.linspace(0.0, top, n_shells + 1)
    cell = np.minimum((ens.x * n_xcells).astype(np.int64), n_xcells - 1)
    flat = np.zeros(ens.n, dtype=np.int64)
    for a in range(d):
        flat = flat * n_xcells + cell[:, a]
    shell = np.minimum(np.searchsorted(edges, wn, side="right") - 1, n_shells - 1)
    shell = np.maximum(shell, 0)
    mass = np.zeros((n_xcells**d, n_shells))
    np.add.at(mass, (flat, shell), ens.masses)
    return XWHistogram(mass, edges, (1.0 / n_xcells) ** d, d)


def moment_interpolation_check(hist, alpha, beta):
    """max over cells of m_alpha - (V_d sup g + 1) m_beta^((a+d)/(b+d)).

    Nonpositive up to roundoff: the interpolation bound holds exactly for
    the shell-wise constant histogram density.
    """
    if not 0 <= alpha < beta:
        raise ValueError("need 0 <= alpha < beta")
    if hist.mass.size == 0:
        raise ValueError("empty histogram")
    d = hist.d
    ints_a = _shell_moment_integrals(hist.shell_edges, d, alpha)
    ints_b = _shell_moment_integrals(hist.shell_edges, d, beta)
    vols = _shell_volumes(hist.shell_edges, d)
    dens = hist.mass / (hist.cell_volume * vols[None, :])
    m_a = dens @ ints_a
    m_b = dens @ ints_b
    g_sup = np.max(dens, axis=1, initial=0.0)
    bound = (_ball_volume(d) * g_sup + 1.0) * m_b ** ((alpha + d) / (beta + d))
    return float(np.max(m_a - bound))


class DecayFloorError(ValueError):
    """Lyapunov values hit the floor (nonpositive) inside the fit window."""


@dataclass
class DecayFit:
    rate: float
    intercept: float
    r_squared: float
    window: tuple


def fit_decay(times, values, window):
    """Least-squares exponential fit on (t, log L) over the window."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    t0, t1 = window
    if not t0 < t1:
        raise ValueError("empty fit window")
    mask = (times >= t0) & (times <= t1)
    if int(mask.sum()) < 10:
        raise ValueError("need at least 10 samples in the fit window")
    sel = values[mask]
    if np.any(sel <= 0.0):
        raise DecayFloorError("nonpositive Lyapunov values in the fit window")
    tt = times[mask]
    logl = np.log(sel)
    slope, intercept = np.polyfit(tt, logl, 1)
    pred = slope * tt + intercept
    ss_res = float(np.sum((logl - pred) ** 2))
    ss_tot = float(np.sum((logl - np.mean(logl)) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return DecayFit(rate=float(-slope), intercept=float(intercept), r_squared=r2, window=(t0, t1))


def m2_ceiling(m2_initial, sup_u_l2):
    """Second-moment ceiling (sqrt(M2(0)) + sup ||u||_2)^2."""
    return (math.sqrt(m2_initial) + sup_u_l2) ** 2


def support_ceiling(w0_abs_max, phi0, m2_initial, sup_u_l2, sup_u_inf):
    """Componentwise support bound combined into a norm ceiling."""
    per_comp = np.asarray(w0_abs_max, dtype=float) + phi0 * (
        math.sqrt(m2_initial) + sup_u_l2
    ) + np.asarray(sup_u_inf, dtype=float)
    return float(np.linalg.norm(per_comp))


@dataclass
class DiagRecord:
    """One sampled time point of every conserved or dissipated quantity."""

    t: float
    mass: float
    particle_momentum: np.ndarray
    fluid_momentum: np.ndarray
    w_c: np.ndarray
    u_c: np.ndarray
    ew: float
    eu: float
    er: float
    lyap: float
    diss: float
    grad_u_sq: float
    drag_dissipation: float
    m2: float
    support_w: float
    rho_inf: float
    energy_total: float
    energy_rhs: float
    cross_term: float

    @staticmethod
    def header(d):
        cols = ["t", "mass"]
        for name in ("p_mom", "u_mom", "w_c", "u_c"):
            cols += [f"{name}_{_AXES[a]}" for a in range(d)]
        cols += [
            "Ew", "Eu", "Er", "L", "D", "grad_u_sq", "drag_dissipation",
            "M2", "support_W", "rho_inf", "energy_total", "energy_rhs", "cross_term",
        ]
        return cols

    def row(self):
        vals = [self.t, self.mass]
        for vec in (self.particle_momentum, self.fluid_momentum, self.w_c, self.u_c):
            vals += list(vec)
        vals += [
            self.ew, self.eu, self.er, self.lyap, self.diss, self.grad_u_sq,
            self.drag_dissipation, self.m2, self.support_w, self.rho_inf,
            self.energy_total, self.energy_rhs, self.cross_term,
        ]
        return [float(v) for v in vals]


def sample_record(t, ens, field, kernel, mu, w0_running, rho_plain_max, u_phys=None):
    """Assemble the full diagnostic record for one snapshot.

    w0_running is the running support maximum entering the dissipation
    constant; rho_plain_max is the unweighted deposited density maximum.
    Also returns the raw alignment-dissipation audit pair.
    """
    grid = field.grid
    d = grid.d
    if u_phys is None:
        u_phys = field.physical()
    w_c, u_c = centers(ens, field)
    ew, eu, er, lyap_val = lyapunov(ens, field)
    grad_sq = fluid.gradient_norm_sq(field)
    if ens is not None and ens.n > 0:
        v = ens.velocities()
        u_at = coupling.gather_grid(u_phys, ens.x, grid)
        u2_at = coupling.gather_grid(np.sum(u_phys * u_phys, axis=0), ens.x, grid)
        mass = ens.total_mass()
        p_mom = ens.masses @ ens.w
        drag = drag_dissipation_term(ens, field, u_at=u_at, u2_at=u2_at, u_phys=u_phys)
        align_const = contraction_constant(ens.c, w0_running) * phi_min_over_torus(kernel)
        m2 = float(np.sum(ens.masses * np.einsum("pi,pi->p", ens.w, ens.w)))
        support = ens.support_radius()
        total, _, cross, erhs = energy_ledger(
            ens, field, kernel, mu, v=v, u_at=u_at, u2_at=u2_at, u_phys=u_phys
        )
        raw_align = alignment_w_dissipation(ens, kernel, v=v)
    else:
        mass = 0.0
        p_mom = np.zeros(d)
        drag = 0.0
        align_const = 0.0
        m2 = 0.0
        support = 0.0
        total = 0.5 * fluid.l2_norm_sq(field)
        cross = 0.0
        erhs = 0.0
        raw_align = 0.0
    diss = align_const * ew + mu * grad_sq + drag
    rec = DiagRecord(
        t=float(t),
        mass=mass,
        particle_momentum=np.asarray(p_mom, dtype=float),
        fluid_momentum=field.mean_flow(),
        w_c=w_c,
        u_c=u_c,
        ew=ew,
        eu=eu,
        er=er,
        lyap=lyap_val,
        diss=diss,
        grad_u_sq=grad_sq,
        drag_dissipation=drag,
        m2=m2,
        support_w=support,
        rho_inf=float(rho_plain_max),
        energy_total=total,
        energy_rhs=erhs,
        cross_term=cross,
    )
    audit = (float(t), raw_align, align_const * ew)
    return rec, audit
