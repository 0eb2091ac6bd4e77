"""Coupled time integration of the particle cloud and the spectral flow.

One RK4 sweep advances both subsystems through shared stages, with the
exact viscous factor folded into the fluid component.  Because the drag the
particles feel and the source the fluid receives are evaluated from the
same stage states with matched scatter/gather kernels, total momentum is a
linear invariant of every stage derivative and survives RK4 to roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import coupling, diagnostics, ensemble as ens_mod, fluid
from .kernels import CommKernel, CutoffSpec, MollifierSpec, mollifier_symbol, phi_min_over_torus


class NumericalFailure(RuntimeError):
    """The run left the representable regime; last good state is kept."""


@dataclass
class RunParams:
    d: int = 3
    c: float = 2.0
    grid_n: int = 32
    n_particles: int = 4096
    dt: float = 0.01
    t_final: float = 5.0
    sample_every: int = 10
    mu: float = 1.0
    kernel: CommKernel = dc_field(default_factory=CommKernel.constant)
    regularized: bool = False
    epsilon: float = 0.1
    mollifier_family: str = "bump"
    ensemble_init: dict = dc_field(default_factory=lambda: {"kind": "gaussian"})
    fluid_init: dict = dc_field(default_factory=lambda: {"kind": "taylor_green"})
    seed: int = 1
    checkpoint_every: int = 0
    out_dir: Path | None = None


@dataclass
class RunResult:
    records: list
    audit: list
    final_ensemble: object
    final_field: object
    initial_momentum: np.ndarray
    momentum_drift: float
    sup_u_l2: float
    sup_u_inf: np.ndarray
    w0_max: float
    m2_initial: float
    w0_abs_max: np.ndarray
    invariants: dict
    failure: str | None = None
    checkpoints: list = dc_field(default_factory=list)

    @property
    def times(self):
        return np.array([r.t for r in self.records])

    def column(self, name):
        header = diagnostics.DiagRecord.header(self.final_field.grid.d)
        idx = header.index(name)
        return np.array([r.row()[idx] for r in self.records])


def build_fluid_init(spec, grid):
    """Initial velocity from a flat spec: taylor_green | zero | file."""
    kind = spec.get("kind", "taylor_green")
    mean = spec.get("mean")
    if kind == "file":
        f, _ = fluid.load_field(spec["path"])
        if f.grid != grid:
            raise ValueError("fluid checkpoint grid does not match the run grid")
        return fluid.leray_project(f)
    if kind == "zero":
        f = fluid.zero_field(grid)
        if mean is not None:
            f = fluid.constant_field(grid, mean)
        return f
    if kind == "taylor_green":
        return fluid.taylor_green(grid, amplitude=spec.get("amplitude", 1.0), mean=mean)
    raise ValueError(f"unknown fluid init {kind!r}")


def build_ensemble_init(params):
    if params.n_particles == 0:
        d = params.d
        return ens_mod.Ensemble(np.zeros((0, d)), np.zeros((0, d)), np.zeros(0), params.c)
    return ens_mod.sample_initial(
        params.ensemble_init, params.n_particles, params.seed, params.c, params.d
    )


def total_momentum(ens, field):
    p = field.mean_flow().astype(float)
    if ens.n > 0:
        p = p + ens.masses @ ens.w
    return p


def simulate(params):
    """Run the coupled system and collect diagnostics at the sample cadence."""
    grid = fluid.GridSpec(params.d, params.grid_n)
    ens = build_ensemble_init(params)
    u = fluid.leray_project(build_fluid_init(params.fluid_init, grid))
    kernel = params.kernel
    moll = None
    cutoff = None
    if params.regularized:
        moll = mollifier_symbol(MollifierSpec(params.epsilon, params.mollifier_family), grid)
        cutoff = CutoffSpec(params.epsilon)

    dt = params.dt
    n_steps = int(round(params.t_final / dt))
    if abs(n_steps * dt - params.t_final) > 1e-9 * max(1.0, params.t_final):
        raise ValueError("t_final must be an integer number of steps")
    e_half = fluid.viscous_half_factor(grid, params.mu, dt)
    e_full = e_half * e_half
    scale = grid.n**grid.d
    axes = tuple(range(-grid.d, 0))
    masses = ens.masses

    def stage_rhs(x, w, uhat, compute_diag=False):
        """Shared stage derivative for particles and fluid."""
        f = fluid.SpectralField(uhat, grid)
        u_phys = np.fft.ifftn(uhat, axes=axes).real * scale
        nl = fluid.nonlinear_term(f, conv_multiplier=moll, u_phys=u_phys)
        if ens.n > 0:
            e_stage = ens_mod.Ensemble(x, w, masses, params.c)
            v = e_stage.velocities()
            if moll is None:
                u_at = coupling.gather_grid(u_phys, x, grid)
            else:
                um_phys = np.fft.ifftn(uhat * moll, axes=axes).real * scale
                u_at = coupling.gather_grid(um_phys, x, grid)
            dw = ens_mod.alignment_forces(e_stage, kernel, v=v) + (u_at - w)
            dx = v
            dep = coupling.scatter(x, w, masses, grid, cutoff=cutoff)
            src = fluid.drag_source(dep.rho, dep.j, f, u_phys=u_phys)
            duhat = fluid.leray_project(
                fluid.SpectralField(src.uhat - nl.uhat, grid)
            ).uhat
        else:
            dx = np.zeros_like(x)
            dw = np.zeros_like(w)
            duhat = fluid.leray_project(fluid.SpectralField(-nl.uhat, grid)).uhat
        return dx, dw, duhat

    wrap = ens_mod.wrap_torus
    records = []
    audit = []
    sup_u_l2 = 0.0
    sup_u_inf = np.zeros(grid.d)
    w0_max = ens.support_radius()
    m2_initial = float(np.sum(masses * np.einsum("pi,pi->p", ens.w, ens.w))) if ens.n else 0.0
    w0_abs_max = np.max(np.abs(ens.w), axis=0) if ens.n else np.zeros(grid.d)
    p0 = total_momentum(ens, u)
    max_div = 0.0
    max_speed_ratio = 0.0
    failure = None
    checkpoints = []
    last_good = (ens.copy(), u.copy(), 0.0)

    def take_sample(t, ens_now, u_now):
        nonlocal sup_u_l2, sup_u_inf, w0_max, max_div, max_speed_ratio
        u_phys = u_now.physical()
        sup_u_l2 = max(sup_u_l2, np.sqrt(fluid.l2_norm_sq(u_now)))
        sup_u_inf = np.maximum(sup_u_inf, np.max(np.abs(u_phys), axis=tuple(range(1, 1 + grid.d))))
        w0_max = max(w0_max, ens_now.support_radius())
        max_div = max(max_div, fluid.divergence_max(u_now))
        if ens_now.n > 0:
            vmax = float(np.max(np.linalg.norm(ens_now.velocities(), axis=1)))
            max_speed_ratio = max(max_speed_ratio, vmax / params.c)
            rho_plain = coupling.scatter(ens_now.x, ens_now.w, masses, grid).rho
            rho_max = float(rho_plain.max())
        else:
            rho_max = 0.0
        rec, aud = diagnostics.sample_record(
            t, ens_now, u_now, kernel, params.mu, w0_max, rho_max, u_phys=u_phys
        )
        records.append(rec)
        audit.append(aud)

    take_sample(0.0, ens, u)
    for step_idx in range(1, n_steps + 1):
        t = (step_idx - 1) * dt
        x0, w0, uh0 = ens.x, ens.w, u.uhat
        try:
            dx1, dw1, du1 = stage_rhs(x0, w0, uh0)
            xa = wrap(x0 + 0.5 * dt * dx1)
            wa = w0 + 0.5 * dt * dw1
            ua = e_half * (uh0 + 0.5 * dt * du1)
            dx2, dw2, du2 = stage_rhs(xa, wa, ua)
            xb = wrap(x0 + 0.5 * dt * dx2)
            wb = w0 + 0.5 * dt * dw2
            ub = e_half * uh0 + 0.5 * dt * du2
            dx3, dw3, du3 = stage_rhs(xb, wb, ub)
            xc = wrap(x0 + dt * dx3)
            wc = w0 + dt * dw3
            uc = e_full * uh0 + dt * e_half * du3
            dx4, dw4, du4 = stage_rhs(xc, wc, uc)
            x1 = wrap(x0 + (dt / 6.0) * (dx1 + 2.0 * dx2 + 2.0 * dx3 + dx4))
            w1 = w0 + (dt / 6.0) * (dw1 + 2.0 * dw2 + 2.0 * dw3 + dw4)
            uh1 = e_full * uh0 + (dt / 6.0) * (
                e_full * du1 + 2.0 * e_half * (du2 + du3) + du4
            )
            ens = ens_mod.Ensemble(x1, w1, masses, params.c)
            u = fluid.leray_project(fluid.SpectralField(uh1, grid))
        except (fluid.CFLError, FloatingPointError) as exc:
            failure = str(exc)
            break
        t_now = step_idx * dt
        if step_idx % params.sample_every == 0 or step_idx == n_steps:
            if not (np.all(np.isfinite(w1)) and np.all(np.isfinite(uh1))):
                failure = f"non-finite state at t = {t_now:g}"
                break
            try:
                fluid.check_cfl(u, dt)
            except fluid.CFLError as exc:
                failure = str(exc)
                break
            take_sample(t_now, ens, u)
            last_good = (ens.copy(), u.copy(), t_now)
        if (
            params.checkpoint_every
            and params.out_dir is not None
            and step_idx % params.checkpoint_every == 0
        ):
            checkpoints += write_checkpoint(params.out_dir, step_idx, ens, u, t_now)

    if failure is not None and params.out_dir is not None:
        good_ens, good_u, good_t = last_good
        checkpoints += write_checkpoint(params.out_dir, -1, good_ens, good_u, good_t, tag="last_good")

    p_final = total_momentum(ens, u)
    drift = float(np.linalg.norm(p_final - p0))
    invariants = {
        "mass_constant": {
            "pass": bool(ens.masses is masses),
            "value": 0.0,
        },
        "divergence": {"pass": bool(max_div <= 1e-12), "value": max_div},
        "speed_limit": {"pass": bool(max_speed_ratio < 1.0), "value": max_speed_ratio},
        "momentum_drift": {
            "pass": bool(drift <= 1e-10 * (1.0 + float(np.linalg.norm(p0)))),
            "value": drift,
        },
    }
    return RunResult(
        records=records,
        audit=audit,
        final_ensemble=ens,
        final_field=u,
        initial_momentum=p0,
        momentum_drift=drift,
        sup_u_l2=sup_u_l2,
        sup_u_inf=sup_u_inf,
        w0_max=w0_max,
        m2_initial=m2_initial,
        w0_abs_max=w0_abs_max,
        invariants=invariants,
        failure=failure,
        checkpoints=checkpoints,
    )


def write_checkpoint(out_dir, step_idx, ens, u, t, tag=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = tag if tag is not None else f"step{step_idx:06d}"
    epath = out_dir / f"ensemble_{stem}.csv"
    fpath = out_dir / f"field_{stem}.bin"
    ens.save_csv(epath)
    fluid.save_field(u, fpath, time=t)
    return [epath, fpath]


def write_diagnostics_csv(result, path, d):
    """Fixed-order CSV, one row per sample; byte-stable for a fixed run."""
    header = diagnostics.DiagRecord.header(d)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for rec in result.records:
            fh.write(",".join(repr(v) for v in rec.row()) + "\n")


def write_audit_csv(result, path, kernel):
    """Alignment-dissipation audit: raw discrete term next to the bound term."""
    with open(path, "w") as fh:
        fh.write("t,raw_alignment_dissipation,alignment_bound_term\n")
        for t, raw, bound in result.audit:
            fh.write(f"{t!r},{raw!r},{bound!r}\n")
