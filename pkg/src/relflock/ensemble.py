"""Weighted particle cloud for the kinetic distribution and its dynamics.

The cloud is an empirical measure: equal-weight particles pushed forward
along characteristics solve the weak kinetic equation, so no density
Jacobian is tracked (densities are recovered by deposition when needed).
Ensembles are immutable snapshots between steps; the stepper builds new
ones and never touches the mass array, which keeps total mass constant to
the last ulp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import relkin


def wrap_torus(x):
    """Map positions into [0,1)^d, guarding the x == 1.0 rounding corner."""
    y = np.mod(x, 1.0)
    return np.where(y >= 1.0, y - 1.0, y)


def min_image(delta):
    """Shortest periodic displacement for each component."""
    return delta - np.round(delta)


@dataclass
class Ensemble:
    """Particle positions on the torus, relativistic velocities, masses."""

    x: np.ndarray
    w: np.ndarray
    masses: np.ndarray
    c: float

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    def total_mass(self):
        return float(np.sum(self.masses))

    def velocities(self):
        """Classical velocities, always strictly inside the light ball."""
        return relkin.v_of_w(self.w, self.c)

    def support_radius(self):
        """max_p |w_p|, the running support diagnostic."""
        if self.n == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.w, axis=1)))

    def copy(self):
        return Ensemble(self.x.copy(), self.w.copy(), self.masses, self.c)

    def save_csv(self, path):
        """One row per particle: x1..xd, w1..wd, mass; header names d and c."""
        d = self.d
        cols = [f"x{i+1}" for i in range(d)] + [f"w{i+1}" for i in range(d)] + ["mass"]
        with open(path, "w") as fh:
            fh.write(f"# ensemble checkpoint d={d} c={self.c!r}\n")
            fh.write(",".join(cols) + "\n")
            for p in range(self.n):
                row = list(self.x[p]) + list(self.w[p]) + [self.masses[p]]
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load_csv(cls, path):
        with open(path) as fh:
            head = fh.readline()
            if not head.startswith("# ensemble checkpoint"):
                raise ValueError(f"not an ensemble checkpoint: {path}")
            fields = dict(tok.split("=") for tok in head.split() if "=" in tok)
            d = int(fields["d"])
            c = float(fields["c"])
            fh.readline()  # column header
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        if data.size == 0:
            return cls(np.zeros((0, d)), np.zeros((0, d)), np.zeros(0), c)
        return cls(data[:, :d].copy(), data[:, d : 2 * d].copy(), data[:, 2 * d].copy(), c)


@dataclass
class EnsembleDeriv:
    dx: np.ndarray
    dw: np.ndarray


# Pairwise work is chunked to keep the distance matrices near this many
# entries, trading peak memory for a short python loop.
_PAIR_CHUNK_TARGET = 4_000_000


def _pair_forces_direct(x, v, masses, kernel, rows=None):
    """-(sum_q m_q phi_pq) v_p + sum_q m_q phi_pq v_q for p in rows."""
    npart = x.shape[0]
    rows = np.arange(npart) if rows is None else rows
    out = np.zeros((len(rows), x.shape[1]))
    chunk = max(1, _PAIR_CHUNK_TARGET // max(npart, 1))
    mv = masses[:, None] * v
    for start in range(0, len(rows), chunk):
        sel = rows[start : start + chunk]
        delta = min_image(x[sel, None, :] - x[None, :, :])
        r = np.sqrt(np.einsum("pqi,pqi->pq", delta, delta))
        phi = kernel.phi(r)
        wsum = phi @ masses
        out[start : start + chunk] = phi @ mv - wsum[:, None] * v[sel]
    return out


def _pair_forces_cells(x, v, masses, kernel):
    """Cell-list evaluation for kernels with compact numerical support."""
    rc = kernel.support_radius
    if not np.isfinite(rc) or rc <= 0.0:
        raise ValueError("cell lists need a kernel with finite support")
    ncell = int(1.0 / rc)
    if ncell < 3:
        return _pair_forces_direct(x, v, masses, kernel)
    d = x.shape[1]
    cell = np.minimum((x * ncell).astype(np.int64), ncell - 1)
    flat = np.zeros(len(x), dtype=np.int64)
    for a in range(d):
        flat = flat * ncell + cell[:, a]
    order = np.argsort(flat, kind="stable")
    out = np.zeros_like(x)
    from itertools import product as iproduct

    buckets: dict = {}
    for idx in order:
        buckets.setdefault(flat[idx], []).append(idx)
    buckets = {key: np.array(val) for key, val in buckets.items()}
    offsets = list(iproduct((-1, 0, 1), repeat=d))
    for key, members in buckets.items():
        coords = []
        rem = key
        for _ in range(d):
            coords.append(rem % ncell)
            rem //= ncell
        coords = coords[::-1]
        neigh = []
        for off in offsets:
            nkey = 0
            for a in range(d):
                nkey = nkey * ncell + (coords[a] + off[a]) % ncell
            if nkey in buckets:
                neigh.append(buckets[nkey])
        others = np.unique(np.concatenate(neigh))
        delta = min_image(x[members, None, :] - x[None, others, :])
        r = np.sqrt(np.einsum("pqi,pqi->pq", delta, delta))
        phi = kernel.phi(r)
        m_o = masses[others]
        wsum = phi @ m_o
        out[members] = phi @ (m_o[:, None] * v[others]) - wsum[:, None] * v[members]
    return out


def alignment_forces(ens, kernel, v=None, method="auto"):
    """Alignment force on every particle.

    L_p = -sum_q m_q phi(d_T(x_p, x_q)) (v_p - v_q) with the minimum-image
    torus distance; the self term vanishes identically.  The constant
    family collapses to a closed form; compact kernels may go through a
    cell list, which must agree with direct summation to roundoff.
    """
    if ens.n == 0:
        return np.zeros_like(ens.x)
    if v is None:
        v = ens.velocities()
    if method == "auto" and kernel.family == "constant":
        mean_v = ens.masses @ v
        return kernel.amplitude * (mean_v[None, :] - ens.total_mass() * v)
    if method == "cells":
        return _pair_forces_cells(ens.x, v, ens.masses, kernel)
    return _pair_forces_direct(ens.x, v, ens.masses, kernel)


def alignment_force(ens, kernel, index, v=None):
    """Alignment force on one particle (row of the pairwise sum)."""
    if v is None:
        v = ens.velocities()
    return _pair_forces_direct(ens.x, v, ens.masses, kernel, rows=np.array([index]))[0]


def drag_forces(w, u_at_particles):
    """Drag per unit mass: fluid velocity minus relativistic velocity."""
    u_at_particles = np.asarray(u_at_particles, dtype=float)
    if u_at_particles.shape != w.shape:
        raise ValueError("gathered fluid velocities do not match the ensemble")
    return u_at_particles - w


def rhs(ens, kernel, u_at_particles, v=None):
    """Characteristic derivatives: dx = v(w), dw = alignment + drag.

    In regularized mode the caller supplies mollified field values in
    u_at_particles; the velocity cutoff lives on the fluid-side deposit,
    not here.
    """
    if v is None:
        v = ens.velocities()
    dw = alignment_forces(ens, kernel, v=v) + drag_forces(ens.w, u_at_particles)
    return EnsembleDeriv(dx=v, dw=dw)


def step_rk4(ens, t, dt, rhs_fn):
    """Classical RK4 step; rhs_fn(ens, t) -> EnsembleDeriv.

    Positions are wrapped back into [0,1)^d, masses are shared with the
    input ensemble (never copied, never written).
    """
    if dt == 0.0:
        return Ensemble(ens.x.copy(), ens.w.copy(), ens.masses, ens.c)
    if not 0.0 < dt <= 0.5:
        raise ValueError("dt must lie in (0, 0.5] for the unit-rate drag")
    k1 = rhs_fn(ens, t)
    e2 = Ensemble(wrap_torus(ens.x + 0.5 * dt * k1.dx), ens.w + 0.5 * dt * k1.dw, ens.masses, ens.c)
    k2 = rhs_fn(e2, t + 0.5 * dt)
    e3 = Ensemble(wrap_torus(ens.x + 0.5 * dt * k2.dx), ens.w + 0.5 * dt * k2.dw, ens.masses, ens.c)
    k3 = rhs_fn(e3, t + 0.5 * dt)
    e4 = Ensemble(wrap_torus(ens.x + dt * k3.dx), ens.w + dt * k3.dw, ens.masses, ens.c)
    k4 = rhs_fn(e4, t + dt)
    x = ens.x + (dt / 6.0) * (k1.dx + 2.0 * k2.dx + 2.0 * k3.dx + k4.dx)
    w = ens.w + (dt / 6.0) * (k1.dw + 2.0 * k2.dw + 2.0 * k3.dw + k4.dw)
    return Ensemble(wrap_torus(x), w, ens.masses, ens.c)


def _halton(n, d):
    """Low-discrepancy points in [0,1)^d (radical inverses, bases 2/3/5)."""
    out = np.zeros((n, d))
    for axis, base in enumerate((2, 3, 5)[:d]):
        i = np.arange(1, n + 1)
        x = np.zeros(n)
        denom = base
        while i.max() > 0:
            x += (i % base) / denom
            i //= base
            denom *= base
        out[:, axis] = x
    return out


def sample_initial(init, n_particles, seed, c, d=3):
    """Draw a deterministic initial cloud with equal masses 1/N.

    Supported kinds: "gaussian" (isotropic normal velocities truncated at
    a radius), "two_beam" (half +w0, half -w0), and "file" (ensemble
    checkpoint CSV).  Positions are uniform draws by default; the "quiet"
    position mode places them on a jittered low-discrepancy set, which
    suppresses deposit sampling noise the way quiet-start particle codes
    do.
    """
    kind = init.get("kind")
    if kind == "file":
        return Ensemble.load_csv(init["path"])
    if n_particles < 1:
        raise ValueError("need at least one particle")
    rng = np.random.default_rng(seed)
    if init.get("position", "random") == "quiet":
        jitter = float(init.get("jitter", 0.0))
        x = np.mod(_halton(n_particles, d) + jitter * rng.random((n_particles, d)), 1.0)
    else:
        x = rng.random((n_particles, d))
    masses = np.full(n_particles, 1.0 / n_particles)
    if kind == "gaussian":
        center = np.asarray(init.get("center", np.zeros(d)), dtype=float)
        spread = float(init.get("spread", 0.1))
        radius = float(init.get("truncate", 3.0 * spread))
        w = center + spread * rng.standard_normal((n_particles, d))
        for _ in range(1000):
            bad = np.linalg.norm(w - center, axis=1) > radius
            if not bad.any():
                break
            w[bad] = center + spread * rng.standard_normal((int(bad.sum()), d))
        else:
            raise ValueError("velocity truncation rejected too many draws")
    elif kind == "two_beam":
        beam = np.asarray(init["beam_w"], dtype=float)
        w = np.where((np.arange(n_particles) % 2 == 0)[:, None], beam, -beam)
    else:
        raise ValueError(f"unknown ensemble init {kind!r}")
    return Ensemble(x, w, masses, c)
