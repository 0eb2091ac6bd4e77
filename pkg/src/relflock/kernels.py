"""The three scalar kernels: pair communication weight, spatial smoothing
bump, and the high-velocity cutoff used by the regularized drag.

Kernel specs are immutable after construction and evaluation is pure, so
they can be shared freely.  The smoothing symbol is computed once per
(epsilon, grid) pair and cached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TORUS_DIAMETER = float(np.sqrt(3.0))  # worst-case separation on the closed unit cube


@dataclass(frozen=True)
class CommKernel:
    """Pair communication weight phi(r) >= 0, bounded with bounded slope.

    Families: "constant" phi = amplitude, "algebraic"
    phi = amplitude (1 + r^2)^(-beta/2), and "tabulated" (linear
    interpolation, zero beyond the last node, hence compact support).
    """

    family: str
    amplitude: float = 1.0
    beta: float = 0.0
    table_r: tuple = field(default=(), repr=False)
    table_phi: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.family not in ("constant", "algebraic", "tabulated"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.amplitude < 0.0 or self.beta < 0.0:
            raise ValueError("kernel amplitude and exponent must be nonnegative")
        if self.family == "tabulated":
            r = np.asarray(self.table_r, dtype=float)
            p = np.asarray(self.table_phi, dtype=float)
            if r.size < 2 or r.size != p.size or np.any(np.diff(r) <= 0) or np.any(p < 0):
                raise ValueError("tabulated kernel needs increasing radii and phi >= 0")

    @classmethod
    def constant(cls, amplitude=1.0):
        return cls("constant", amplitude=amplitude)

    @classmethod
    def algebraic(cls, beta, amplitude=1.0):
        return cls("algebraic", amplitude=amplitude, beta=beta)

    @classmethod
    def tabulated(cls, radii, values):
        return cls("tabulated", table_r=tuple(map(float, radii)), table_phi=tuple(map(float, values)))

    def phi(self, r):
        r = np.asarray(r, dtype=float)
        if self.family == "constant":
            return np.full_like(r, self.amplitude)
        if self.family == "algebraic":
            return self.amplitude * (1.0 + r * r) ** (-0.5 * self.beta)
        return np.interp(r, self.table_r, self.table_phi, right=0.0)

    @property
    def support_radius(self):
        """Radius beyond which phi vanishes; inf for non-compact families."""
        return self.table_r[-1] if self.family == "tabulated" else np.inf

    @property
    def value_bound(self):
        if self.family == "tabulated":
            return max(self.table_phi)
        return self.amplitude  # both analytic families peak at r = 0

    @property
    def deriv_bound(self):
        """Bound on |phi'|; with value_bound this is the W^{1,inf} norm."""
        if self.family == "constant":
            return 0.0
        if self.family == "algebraic":
            if self.beta == 0.0:
                return 0.0
            r = 1.0 / np.sqrt(self.beta + 1.0)  # where |phi'| peaks
            return self.amplitude * self.beta * r * (1.0 + r * r) ** (-0.5 * self.beta - 1.0)
        r = np.asarray(self.table_r)
        p = np.asarray(self.table_phi)
        return float(np.max(np.abs(np.diff(p) / np.diff(r))))

    def min_over(self, r_max):
        """Minimum of phi over [0, r_max]; the constant the decay bound uses."""
        if self.family == "constant":
            return self.amplitude
        if self.family == "algebraic":
            return self.amplitude * (1.0 + r_max * r_max) ** (-0.5 * self.beta)
        grid = np.linspace(0.0, r_max, 4097)
        return float(np.min(self.phi(grid)))


def phi_min_over_torus(kernel):
    """min phi over [0, sqrt(3)], robust to non-monotone weights."""
    return kernel.min_over(TORUS_DIAMETER)


@dataclass(frozen=True)
class MollifierSpec:
    """Compactly supported unit-mass smoothing kernel of width epsilon."""

    epsilon: float
    family: str = "bump"

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("mollifier width must be positive")
        if self.family not in ("bump", "gaussian"):
            raise ValueError(f"unknown mollifier family {self.family!r}")


_SYMBOL_CACHE: dict = {}


def _min_image_radius_sq(grid):
    n = grid.n
    ax = (np.arange(n) / n + 0.5) % 1.0 - 0.5
    r2 = np.zeros(grid.shape)
    for axis in range(grid.d):
        shape = [1] * grid.d
        shape[axis] = n
        r2 = r2 + (ax.reshape(shape)) ** 2
    return r2


def mollifier_symbol(spec, grid):
    """Fourier multiplier of the grid-sampled mollifier, zero mode pinned to 1.

    Convolution with the mollifier is then plain multiplication in spectral
    space.  The bump has no closed-form transform, so the symbol is the FFT
    of the sampled profile, cached per (spec, grid).
    """
    key = (spec.epsilon, spec.family, grid.d, grid.n)
    hit = _SYMBOL_CACHE.get(key)
    if hit is not None:
        return hit
    if spec.family == "bump" and spec.epsilon < 2.0 * grid.spacing:
        raise ValueError(
            f"bump mollifier of width {spec.epsilon} not resolvable on spacing {grid.spacing}"
        )
    r2 = _min_image_radius_sq(grid)
    if spec.family == "bump":
        t = r2 / (spec.epsilon * spec.epsilon)
        prof = np.zeros_like(r2)
        inside = t < 1.0
        prof[inside] = np.exp(1.0 / (t[inside] - 1.0))
    else:
        sigma = spec.epsilon / 3.0
        prof = np.exp(-0.5 * r2 / (sigma * sigma))
    sym = np.fft.fftn(prof)
    sym = (sym / sym.flat[0]).real.copy()
    _SYMBOL_CACHE[key] = sym
    return sym


@dataclass(frozen=True)
class CutoffSpec:
    """Smooth radial indicator: 1 up to 1/(2 eps), 0 beyond 1/eps.

    The transition is the cubic smoothstep 3t^2 - 2t^3 in the normalized
    radial coordinate, which is C^1 at both radii.
    """

    epsilon: float

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("cutoff scale must be positive")

    @property
    def inner_radius(self):
        return 0.5 / self.epsilon

    @property
    def outer_radius(self):
        return 1.0 / self.epsilon

    def gamma_of_radius(self, r):
        r = np.asarray(r, dtype=float)
        t = np.clip(
            (r - self.inner_radius) / (self.outer_radius - self.inner_radius), 0.0, 1.0
        )
        return 1.0 - t * t * (3.0 - 2.0 * t)

    def gamma(self, w):
        w = np.asarray(w, dtype=float)
        return self.gamma_of_radius(np.sqrt(np.einsum("...i,...i->...", w, w)))
