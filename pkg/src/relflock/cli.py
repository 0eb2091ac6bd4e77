"""Run orchestration: simulate / validate / iterate / fit subcommands.

Exit-code contract so CI can gate on failure classes:
0 success, 1 failed validation check, 2 config or input-file violation,
3 numerical failure (last-good checkpoint written), 4 iteration divergence.

Primary outputs (diagnostics.csv, audit.csv, trace.jsonl, fit.jsonl) are
byte-identical across reruns of the same config and seed; wall-clock facts
live in the manifest only.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, config as config_mod, diagnostics, fluid, relkin, runner
from .coupling import gather_grid, momentum_audit, scatter
from .ensemble import sample_initial
from .kernels import CommKernel, MollifierSpec, mollifier_symbol, phi_min_over_torus
from .picard import run_picard

EXIT_OK = 0
EXIT_VALIDATE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_DIVERGED = 4

#: Environment hook used by the validate self-test: naming a check here
#: flips a sign inside it, which must surface as that named failure.
FAULT_ENV = "RELFLOCK_FAULT"


def _write_manifest(path, payload):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    os.replace(tmp, path)


def cmd_simulate(args):
    try:
        cfg = config_mod.parse_config(args.config)
    except (OSError, config_mod.ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out if args.out else (cfg.out_dir or "run_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    params = config_mod.to_run_params(cfg, out_dir=out_dir)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    t0 = time.perf_counter()
    result = runner.simulate(params)
    wall = time.perf_counter() - t0
    runner.write_diagnostics_csv(result, out_dir / "diagnostics.csv", params.d)
    runner.write_audit_csv(result, out_dir / "audit.csv", params.kernel)
    manifest = {
        "config": cfg.echo(),
        "config_path": str(args.config),
        "version": __version__,
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "wall_seconds": wall,
        "invariants": result.invariants,
        "failure": result.failure,
        "sup_u_l2": result.sup_u_l2,
        "sup_u_inf": list(result.sup_u_inf),
        "support_running_max": result.w0_max,
        "phi_at_sqrt3": phi_min_over_torus(params.kernel),
        "phi_at_periodic_diameter": float(
            params.kernel.phi(np.sqrt(params.d) / 2.0)
        ),
        "checkpoints": [str(p) for p in result.checkpoints],
    }
    _write_manifest(out_dir / "manifest.json", manifest)
    if result.failure is not None:
        print(f"numerical failure: {result.failure}", file=sys.stderr)
        return EXIT_NUMERIC
    bad = [name for name, entry in result.invariants.items() if not entry["pass"]]
    if bad:
        print(f"hard invariants violated: {', '.join(bad)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"run complete: {len(result.records)} samples -> {out_dir}")
    return EXIT_OK


def cmd_iterate(args):
    try:
        cfg = config_mod.parse_config(args.config)
    except (OSError, config_mod.ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out if args.out else (cfg.out_dir or "run_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    params = config_mod.to_picard_params(cfg)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    t0 = time.perf_counter()
    trace = run_picard(params)
    wall = time.perf_counter() - t0
    trace.write_jsonl(out_dir / "trace.jsonl")
    manifest = {
        "config": cfg.echo(),
        "version": __version__,
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "wall_seconds": wall,
        "converged": trace.converged,
        "diverged": trace.diverged,
        "ceilings": trace.ceilings,
    }
    _write_manifest(out_dir / "manifest.json", manifest)
    for rec in trace.records:
        print(f"cycle {rec['n']}: delta={rec['delta']:.3e} omega={rec['omega']:.3e}")
    if trace.diverged:
        print("iteration diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_fit(args):
    try:
        times, lyap, rho_inf = _read_lyapunov_csv(args.csv)
    except (OSError, ValueError) as exc:
        print(f"csv error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    window = (args.t0, args.t1 if args.t1 is not None else float(times[-1]))
    try:
        fit = diagnostics.fit_decay(times, lyap, window)
    except diagnostics.DecayFloorError as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_VALIDATE if args.assert_rate else EXIT_OK
    except ValueError as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rate_theory = diagnostics.theoretical_rate(rho_inf, args.mu)
    print(f"fitted rate      : {fit.rate:.6f} (r^2 = {fit.r_squared:.6f})")
    print(f"theoretical rate : {rate_theory:.6f} (rho_inf = {rho_inf:.3f}, mu = {args.mu})")
    record = {
        "rate": fit.rate,
        "intercept": fit.intercept,
        "r_squared": fit.r_squared,
        "window": list(fit.window),
        "theoretical_rate": rate_theory,
        "rho_inf": rho_inf,
        "mu": args.mu,
    }
    out_path = Path(args.out) if args.out else Path(args.csv).parent
    out_path.mkdir(parents=True, exist_ok=True)
    with open(out_path / "fit.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    if args.assert_rate and fit.rate < 0.95 * rate_theory:
        print("fitted rate below 0.95 x theoretical rate", file=sys.stderr)
        return EXIT_VALIDATE
    return EXIT_OK


def _read_lyapunov_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if "t" not in header or "L" not in header:
            raise ValueError(f"{path}: expected columns t and L")
        ti = header.index("t")
        li = header.index("L")
        ri = header.index("rho_inf") if "rho_inf" in header else None
        times, lyap, rho = [], [], []
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != len(header):
                raise ValueError(f"{path}: ragged row")
            times.append(float(parts[ti]))
            lyap.append(float(parts[li]))
            if ri is not None:
                rho.append(float(parts[ri]))
    if not times:
        raise ValueError(f"{path}: no data rows")
    rho_inf = max(rho) if rho else 0.0
    return np.array(times), np.array(lyap), rho_inf


# --- the analytic oracle suite behind `validate` -------------------------

def _fault(name):
    return -1.0 if os.environ.get(FAULT_ENV) == name else 1.0


def _check_round_trip():
    rng = np.random.default_rng(7)
    worst = 0.0
    for c in (0.5, 1.0, 2.0, 10.0):
        v = rng.standard_normal((2500, 3))
        v *= (0.99 * c * rng.random((2500, 1)) ** 0.5) / np.linalg.norm(v, axis=1, keepdims=True)
        back = relkin.v_of_w(relkin.w_of_v(v, c), c)
        err = np.linalg.norm(back - v, axis=1) / (1.0 + np.linalg.norm(v, axis=1))
        worst = max(worst, float(np.max(err)))
    return worst <= 1e-10, f"max relative round-trip error {worst:.2e}"


def _check_energy_gradient():
    rng = np.random.default_rng(11)
    c = 2.0
    v = rng.standard_normal((300, 3))
    v *= (0.9 * c * rng.random((300, 1)) ** 0.5) / np.linalg.norm(v, axis=1, keepdims=True)
    w = relkin.w_of_v(v, c)
    h = 3e-6 * (1.0 + np.linalg.norm(w, axis=1, keepdims=True))
    worst = 0.0
    for comp in range(3):
        dw = np.zeros_like(w)
        dw[:, comp] = h[:, 0]
        de = relkin.energy(relkin.v_of_w(w + dw, c), c) - relkin.energy(relkin.v_of_w(w - dw, c), c)
        grad = de / (2.0 * h[:, 0])
        ref = _fault("energy_gradient") * v[:, comp]
        worst = max(worst, float(np.max(np.abs(grad - ref) / (1.0 + np.abs(ref)))))
    return worst <= 1e-6, f"max gradient mismatch {worst:.2e}"


def _check_jacobian_eigs():
    rng = np.random.default_rng(13)
    c = 2.0
    v = rng.standard_normal((100, 3))
    v *= (0.9 * c * rng.random((100, 1)) ** 0.5) / np.linalg.norm(v, axis=1, keepdims=True)
    lam1, lam2 = relkin.jacobian_eigs(v, c)
    worst = 0.0
    for p in range(v.shape[0]):
        jac = np.zeros((3, 3))
        h = 1e-6
        for j in range(3):
            dv = np.zeros(3)
            dv[j] = h
            jac[:, j] = (relkin.w_of_v(v[p] + dv, c) - relkin.w_of_v(v[p] - dv, c)) / (2 * h)
        eigs = np.sort(np.linalg.eigvalsh(0.5 * (jac + jac.T)))
        ref = np.sort([lam1[p], lam1[p], lam2[p]])
        worst = max(worst, float(np.max(np.abs(eigs - ref) / ref)))
    return worst <= 1e-6, f"max eigenvalue mismatch {worst:.2e}"


def _check_pair_bounds():
    rng = np.random.default_rng(17)
    c = 2.0
    worst = 0.0
    for _ in range(4):
        v = rng.standard_normal((25000, 2, 3))
        v *= (0.999 * c * rng.random((25000, 2, 1)) ** 0.5) / np.linalg.norm(
            v, axis=2, keepdims=True
        )
        w = relkin.w_of_v(v, c)
        dv = v[:, 0] - v[:, 1]
        dw = w[:, 0] - w[:, 1]
        mid = np.einsum("pi,pi->p", dv, dw)
        lo = (c * c + 1.0) / (c * c) * np.einsum("pi,pi->p", dv, dv)
        hi = c * c / (c * c + 1.0) * np.einsum("pi,pi->p", dw, dw)
        slack = 1e-12 * (1.0 + np.abs(mid))
        sign = _fault("pair_bounds")
        lo_violation = float(np.max(lo - sign * mid - slack))
        hi_violation = float(np.max(sign * mid - hi - slack))
        worst = max(worst, lo_violation, hi_violation)
    return worst <= 0.0, f"worst bound violation {worst:.2e}"


def _check_nonrel_limit():
    v = np.array([0.3, -0.2, 0.1])
    ratios = []
    for c in (4.0, 8.0, 16.0):
        e1 = np.linalg.norm(relkin.w_of_v(v, c) - v)
        e2 = np.linalg.norm(relkin.w_of_v(v, 2.0 * c) - v)
        ratios.append(e1 / e2)
    ok = all(3.6 <= r <= 4.4 for r in ratios)
    return ok, f"halving ratios {['%.3f' % r for r in ratios]}"


def _check_taylor_green():
    grid = fluid.GridSpec(2, 64)
    mu = 0.01
    amp = 1.0
    u = fluid.taylor_green(grid, amplitude=amp)
    dt = 0.005
    steps = 200
    for _ in range(steps):
        u = fluid.step(u, None, mu, dt)
    decay = np.exp(-8.0 * np.pi**2 * mu * (steps * dt)) * _fault("taylor_green")
    exact = fluid.taylor_green(grid, amplitude=amp).physical() * decay
    err = float(np.max(np.abs(u.physical() - exact)))
    return err <= 1e-8, f"Linf error {err:.2e}"


def _check_heat_decay():
    grid = fluid.GridSpec(3, 16)
    ax = grid.axes()
    u = np.zeros((3,) + grid.shape)
    u[0] = np.sin(2.0 * np.pi * ax[1])
    f = fluid.from_physical(u, grid)
    mu = 0.7
    dt = 0.01
    out = fluid.step(f, None, mu, dt, advection=False)
    exact = np.exp(-mu * (2.0 * np.pi) ** 2 * dt)
    got = out.uhat[0, 0, 1, 0] / f.uhat[0, 0, 1, 0]
    err = abs(got.real - exact) + abs(got.imag)
    return err <= 1e-12, f"single-mode decay error {err:.2e}"


def _check_cic_adjoint():
    rng = np.random.default_rng(23)
    grid = fluid.GridSpec(3, 16)
    ens = sample_initial({"kind": "gaussian", "spread": 0.3}, 512, 5, 2.0, 3)
    field = fluid.random_solenoidal(grid, seed=29, amplitude=1.0)
    dep = scatter(ens.x, ens.w, ens.masses, grid)
    resid = momentum_audit(ens, field, dep)
    return resid <= 1e-12, f"momentum audit residual {resid:.2e}"


def _check_leray():
    grid = fluid.GridSpec(3, 16)
    psi = fluid.random_solenoidal(grid, seed=31, amplitude=1.0)
    k, _, _ = fluid.wavenumbers(grid)
    grad = fluid.zero_field(grid)
    phi_hat = psi.uhat[0]
    for i in range(3):
        grad.uhat[i] = 1j * k[i] * phi_hat
    killed = fluid.leray_project(grad)
    resid = float(np.max(np.abs(killed.uhat)))
    proj = fluid.leray_project(psi)
    drift = float(np.max(np.abs(proj.uhat - psi.uhat)))
    ok = resid <= 1e-12 and drift <= 1e-14
    return ok, f"gradient residue {resid:.2e}, solenoidal drift {drift:.2e}"


def _check_mollifier():
    grid = fluid.GridSpec(3, 32)
    sym = mollifier_symbol(MollifierSpec(0.1), grid)
    zero = sym.flat[0]
    ok = abs(zero - 1.0) <= 1e-14 and sym.min() >= -1e-3 and sym.max() <= 1.0 + 1e-12
    return ok, f"zero mode {zero:.12f}, range [{sym.min():.2e}, {sym.max():.6f}]"


VALIDATION_CHECKS = [
    ("round_trip", _check_round_trip),
    ("energy_gradient", _check_energy_gradient),
    ("jacobian_eigs", _check_jacobian_eigs),
    ("pair_bounds", _check_pair_bounds),
    ("nonrel_limit", _check_nonrel_limit),
    ("taylor_green", _check_taylor_green),
    ("heat_decay", _check_heat_decay),
    ("cic_adjoint", _check_cic_adjoint),
    ("leray", _check_leray),
    ("mollifier", _check_mollifier),
]


def cmd_validate(args):
    del args
    failures = []
    for name, fn in VALIDATION_CHECKS:
        ok, detail = fn()
        status = "ok" if ok else "FAIL"
        print(f"check {name:<16} {status:<4} {detail}")
        if not ok:
            failures.append(name)
    if failures:
        print(f"failed checks: {', '.join(failures)}", file=sys.stderr)
        return EXIT_VALIDATE
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="relflock", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the coupled system from a config")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", default=None, help="output directory")
    sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    sim.set_defaults(fn=cmd_simulate)

    val = sub.add_parser("validate", help="run the analytic oracle suite")
    val.set_defaults(fn=cmd_validate)

    it = sub.add_parser("iterate", help="run the fixed-point contraction study")
    it.add_argument("--config", required=True)
    it.add_argument("--out", default=None)
    it.add_argument("--seed", type=int, default=None)
    it.set_defaults(fn=cmd_iterate)

    fit = sub.add_parser("fit", help="fit the Lyapunov decay rate from a diagnostics CSV")
    fit.add_argument("csv")
    fit.add_argument("--t0", type=float, default=1.0)
    fit.add_argument("--t1", type=float, default=None)
    fit.add_argument("--mu", type=float, default=1.0)
    fit.add_argument("--out", default=None)
    fit.add_argument("--assert", dest="assert_rate", action="store_true",
                     help="exit nonzero unless fitted rate >= 0.95 x theoretical")
    fit.set_defaults(fn=cmd_fit)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
