"""Pseudo-spectral incompressible flow on the periodic unit box.

Velocity fields are stored as normalized Fourier coefficients (FFT divided
by the number of grid points), so the zero mode is the spatial mean and
Parseval reads integral |u|^2 dx = sum |uhat|^2.  Pressure never appears:
divergence-free projection removes it mode by mode.  The viscous term is
integrated exactly through an integrating factor; advection and sources go
through classical RK4 stages.  Fields are treated as immutable snapshots
between steps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class CFLError(RuntimeError):
    """Advective CFL number exceeded; reported, never silently clamped."""


@dataclass(frozen=True)
class GridSpec:
    """Regular n^d grid on [0,1)^d; n a power of two so FFTs stay cheap."""

    d: int
    n: int

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        if self.n < 8 or (self.n & (self.n - 1)) != 0:
            raise ValueError("grid size must be a power of two, at least 8")

    @property
    def spacing(self):
        return 1.0 / self.n

    @property
    def shape(self):
        return (self.n,) * self.d

    @property
    def cell_volume(self):
        return self.spacing**self.d

    def axes(self):
        """Physical coordinates along each axis, broadcast-ready."""
        x = np.arange(self.n) / self.n
        out = []
        for axis in range(self.d):
            shape = [1] * self.d
            shape[axis] = self.n
            out.append(x.reshape(shape))
        return out


_WAVE_CACHE: dict = {}


def wavenumbers(grid):
    """Angular wavenumbers 2*pi*int per axis, |k|^2, and the 2/3 dealias mask."""
    hit = _WAVE_CACHE.get(grid)
    if hit is not None:
        return hit
    freqs = np.fft.fftfreq(grid.n, 1.0 / grid.n)  # integer frequencies
    k = []
    keep = np.ones(grid.shape, dtype=bool)
    k2 = np.zeros(grid.shape)
    cut = grid.n / 3.0
    for axis in range(grid.d):
        shape = [1] * grid.d
        shape[axis] = grid.n
        f = freqs.reshape(shape)
        k.append(2.0 * np.pi * f)
        k2 = k2 + (2.0 * np.pi * f) ** 2
        keep = keep & (np.abs(f) < cut)
    out = (k, k2, keep)
    _WAVE_CACHE[grid] = out
    return out


def _spatial_axes(grid):
    return tuple(range(-grid.d, 0))


@dataclass
class SpectralField:
    """Divergence-free velocity as normalized Fourier coefficients (d, n, ..)."""

    uhat: np.ndarray
    grid: GridSpec

    def copy(self):
        return SpectralField(self.uhat.copy(), self.grid)

    def physical(self):
        """Real-space samples on the grid, shape (d, n, ..)."""
        return np.fft.ifftn(self.uhat, axes=_spatial_axes(self.grid)).real * self.grid.n**self.grid.d

    def mean_flow(self):
        """Spatial mean of u (the zero Fourier mode)."""
        return self.uhat[(slice(None),) + (0,) * self.grid.d].real.copy()


def from_physical(values, grid):
    """Transform grid samples into (dealiased) spectral coefficients."""
    values = np.asarray(values, dtype=float)
    uhat = np.fft.fftn(values, axes=_spatial_axes(grid)) / grid.n**grid.d
    _, _, keep = wavenumbers(grid)
    uhat *= keep
    return SpectralField(uhat, grid)


def zero_field(grid, components=None):
    ncomp = grid.d if components is None else components
    return SpectralField(np.zeros((ncomp,) + grid.shape, dtype=complex), grid)


def constant_field(grid, mean):
    f = zero_field(grid)
    idx = (slice(None),) + (0,) * grid.d
    f.uhat[idx] = np.asarray(mean, dtype=float)
    return f


def taylor_green(grid, amplitude=1.0, mean=None):
    """Classical cellular vortex; an exact decaying flow for validation."""
    ax = grid.axes()
    two_pi = 2.0 * np.pi
    u = np.zeros((grid.d,) + grid.shape)
    if grid.d == 2:
        u[0] = -amplitude * np.cos(two_pi * ax[0]) * np.sin(two_pi * ax[1])
        u[1] = amplitude * np.sin(two_pi * ax[0]) * np.cos(two_pi * ax[1])
    else:
        u[0] = amplitude * np.sin(two_pi * ax[0]) * np.cos(two_pi * ax[1]) * np.cos(two_pi * ax[2])
        u[1] = -amplitude * np.cos(two_pi * ax[0]) * np.sin(two_pi * ax[1]) * np.cos(two_pi * ax[2])
    if mean is not None:
        u += np.asarray(mean, dtype=float).reshape((grid.d,) + (1,) * grid.d)
    return from_physical(u, grid)


def random_solenoidal(grid, seed, amplitude=1.0, k_max=3):
    """Smooth random divergence-free field (band-limited, reproducible)."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((grid.d,) + grid.shape)
    f = from_physical(noise, grid)
    _, _, _ = wavenumbers(grid)
    freqs = np.fft.fftfreq(grid.n, 1.0 / grid.n)
    band = np.ones(grid.shape, dtype=bool)
    for axis in range(grid.d):
        shape = [1] * grid.d
        shape[axis] = grid.n
        band &= np.abs(freqs.reshape(shape)) <= k_max
    f.uhat *= band
    idx = (slice(None),) + (0,) * grid.d
    f.uhat[idx] = 0.0
    f = leray_project(f)
    cur = np.sqrt(l2_norm_sq(f))
    if cur > 0:
        f.uhat *= amplitude / cur
    return f


def leray_project(f):
    """Remove the gradient part: khat (khat . uhat) per mode, zero mode kept."""
    k, k2, _ = wavenumbers(f.grid)
    k2safe = np.where(k2 == 0.0, 1.0, k2)
    div = sum(k[i] * f.uhat[i] for i in range(f.grid.d))
    out = f.uhat.copy()
    for i in range(f.grid.d):
        out[i] -= k[i] * div / k2safe
    idx = (slice(None),) + (0,) * f.grid.d
    out[idx] = f.uhat[idx]
    return SpectralField(out, f.grid)


def divergence_max(f):
    """max_k |k . uhat(k)|, the divergence residual in spectral form."""
    k, _, _ = wavenumbers(f.grid)
    div = sum(k[i] * f.uhat[i] for i in range(f.grid.d))
    return float(np.max(np.abs(div)))


def l2_norm_sq(f):
    """integral |u|^2 dx via Parseval."""
    return float(np.sum(np.abs(f.uhat) ** 2))


def fluctuation_norm_sq(f):
    """integral |u - mean u|^2 dx: Parseval over the nonzero modes."""
    idx = (slice(None),) + (0,) * f.grid.d
    return float(np.sum(np.abs(f.uhat) ** 2) - np.sum(np.abs(f.uhat[idx]) ** 2))


def gradient_norm_sq(f):
    """integral |grad u|^2 dx = sum_k |k|^2 |uhat(k)|^2."""
    _, k2, _ = wavenumbers(f.grid)
    return float(np.sum(k2 * np.sum(np.abs(f.uhat) ** 2, axis=0)))


def nonlinear_term(f, conv_multiplier=None, u_phys=None):
    """Advection term (u_c . grad) u, dealiased; u_c is u or its mollification.

    Returns spectral coefficients of the term itself; time steppers subtract
    it.  Both factors live inside the 2/3 band, so the pseudo-spectral
    product is alias-free after masking.
    """
    grid = f.grid
    k, _, _ = wavenumbers(grid)
    axes = _spatial_axes(grid)
    scale = grid.n**grid.d
    if u_phys is None:
        u_phys = f.physical()
    if conv_multiplier is None:
        conv = u_phys
    else:
        conv = np.fft.ifftn(f.uhat * conv_multiplier, axes=axes).real * scale
    adv = np.zeros_like(u_phys)
    for i in range(grid.d):
        for j in range(grid.d):
            du = np.fft.ifftn(1j * k[j] * f.uhat[i], axes=axes).real * scale
            adv[i] += conv[j] * du
    return from_physical(adv, grid)


def drag_source(rho, j, u, u_phys=None):
    """Spectral form of the momentum the particles hand to the fluid.

    Pointwise -rho u + j on the grid, then transformed and dealiased; the
    zero mode is exactly minus the total drag on the particles when the
    deposits come from the matched scatter.
    """
    grid = u.grid
    if u_phys is None:
        u_phys = u.physical()
    if rho.shape != grid.shape or j.shape != (grid.d,) + grid.shape:
        raise ValueError("deposit grids do not match the field grid")
    return from_physical(-rho * u_phys + j, grid)


def viscous_half_factor(grid, mu, dt):
    """exp(-mu |k|^2 dt/2), the exact half-step viscous decay."""
    _, k2, _ = wavenumbers(grid)
    return np.exp(-mu * k2 * (0.5 * dt))


def max_speed(f, u_phys=None):
    if u_phys is None:
        u_phys = f.physical()
    return float(np.max(np.abs(u_phys)))


def check_cfl(f, dt, u_phys=None):
    """Advective CFL guard: max|u| dt / h <= 0.5."""
    cfl = max_speed(f, u_phys) * dt * f.grid.n
    if cfl > 0.5:
        raise CFLError(f"advective CFL {cfl:.3f} exceeds 0.5")
    return cfl


def step(u, source, mu, dt, advection=True, conv_multiplier=None):
    """One integrating-factor RK4 step with a source frozen over the step.

    The viscous factor is exact, so stiffness from mu |k|^2 imposes no step
    restriction; the projected advection and source terms ride the RK4
    stages.  Output is divergence-free.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    grid = u.grid
    u_phys = u.physical()
    if advection:
        check_cfl(u, dt, u_phys)
    src = source.uhat if source is not None else 0.0

    def rhs(field, phys=None):
        if advection:
            nl = nonlinear_term(field, conv_multiplier, u_phys=phys)
            return leray_project(SpectralField(src - nl.uhat, grid)).uhat
        return leray_project(SpectralField(src + np.zeros_like(field.uhat), grid)).uhat

    e_half = viscous_half_factor(grid, mu, dt)
    e_full = e_half * e_half

    k1 = rhs(u, u_phys)
    ua = SpectralField(e_half * (u.uhat + 0.5 * dt * k1), grid)
    k2 = rhs(ua)
    ub = SpectralField(e_half * u.uhat + 0.5 * dt * k2, grid)
    k3 = rhs(ub)
    uc = SpectralField(e_full * u.uhat + dt * e_half * k3, grid)
    k4 = rhs(uc)
    out = e_full * u.uhat + (dt / 6.0) * (e_full * k1 + 2.0 * e_half * (k2 + k3) + k4)
    return leray_project(SpectralField(out, grid))


_MAGIC = b"RFLD"
_HEADER = "<4sIIIId"  # magic, version, d, n, ncomp, time; little-endian


def save_field(f, path, time=0.0):
    """Binary checkpoint: struct header then row-major complex128 coefficients."""
    ncomp = f.uhat.shape[0]
    header = struct.pack(_HEADER, _MAGIC, 1, f.grid.d, f.grid.n, ncomp, float(time))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(f.uhat).astype("<c16").tobytes())


def load_field(path):
    with open(path, "rb") as fh:
        raw = fh.read(struct.calcsize(_HEADER))
        magic, version, d, n, ncomp, time = struct.unpack(_HEADER, raw)
        if magic != _MAGIC or version != 1:
            raise ValueError(f"not a field checkpoint: {path}")
        grid = GridSpec(d, n)
        data = np.frombuffer(fh.read(), dtype="<c16").astype(complex)
    uhat = data.reshape((ncomp,) + grid.shape)
    return SpectralField(uhat, grid), time


def export_slice_csv(f, path, axis=None, index=0):
    """Physical-space slice as CSV for external plotting."""
    u = f.physical()
    grid = f.grid
    if grid.d == 3:
        axis = grid.d - 1 if axis is None else axis
        u = np.take(u, index, axis=1 + axis)
    comps = u.shape[0]
    n = grid.n
    with open(path, "w") as fh:
        fh.write("i,j," + ",".join(f"u{c + 1}" for c in range(comps)) + "\n")
        for i in range(n):
            for jj in range(n):
                vals = ",".join(repr(float(u[c, i, jj])) for c in range(comps))
                fh.write(f"{i},{jj},{vals}\n")
