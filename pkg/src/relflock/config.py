"""Flat key-value run configuration with a strict schema.

Lines look like ``key = value``; blank lines and ``#`` comments are
ignored.  Unknown keys are errors, not warnings: a typo must never
silently fall back to a default.  The schema itself is versioned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .kernels import CommKernel
from .picard import PicardParams
from .runner import RunParams

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Schema violation in a run configuration."""


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"expected a flag, got {text!r}")


def _parse_vector(text):
    return tuple(float(tok) for tok in text.split())


_SCHEMA = {
    "schema_version": int,
    "dimension": int,
    "light_speed": float,
    "grid_n": int,
    "particles": int,
    "dt": float,
    "t_final": float,
    "sample_every": int,
    "viscosity": float,
    "kernel": str,
    "kernel_amplitude": float,
    "kernel_beta": float,
    "regularization": _parse_bool,
    "epsilon": float,
    "mollifier": str,
    "ensemble_init": str,
    "ensemble_position": str,
    "position_jitter": float,
    "w_center": _parse_vector,
    "w_spread": float,
    "w_truncate": float,
    "beam_w": _parse_vector,
    "ensemble_file": str,
    "fluid_init": str,
    "fluid_amplitude": float,
    "fluid_mean": _parse_vector,
    "fluid_file": str,
    "seed": int,
    "out_dir": str,
    "checkpoint_every": int,
    "picard_iterations": int,
    "store_every": int,
}

_DEFAULTS = {
    "dimension": 3,
    "light_speed": 2.0,
    "grid_n": 32,
    "particles": 4096,
    "dt": 0.01,
    "t_final": 5.0,
    "sample_every": 10,
    "viscosity": 1.0,
    "kernel": "constant",
    "kernel_amplitude": 1.0,
    "kernel_beta": 0.0,
    "regularization": False,
    "epsilon": 0.1,
    "mollifier": "bump",
    "ensemble_init": "gaussian",
    "ensemble_position": "random",
    "position_jitter": 0.0,
    "w_center": (0.0, 0.0, 0.0),
    "w_spread": 0.1,
    "w_truncate": None,
    "beam_w": None,
    "ensemble_file": None,
    "fluid_init": "taylor_green",
    "fluid_amplitude": 0.25,
    "fluid_mean": None,
    "fluid_file": None,
    "seed": 1,
    "out_dir": None,
    "checkpoint_every": 0,
    "picard_iterations": 6,
    "store_every": 5,
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    source: str = "<memory>"

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def echo(self):
        """Serializable copy for the run manifest."""
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.values.items()}


def parse_config(path):
    values = dict(_DEFAULTS)
    seen_version = False
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, text = line.partition("=")
        key = key.strip()
        text = text.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _SCHEMA[key](text)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
        if key == "schema_version":
            seen_version = True
    if not seen_version:
        raise ConfigError(f"{path}: missing schema_version")
    if values["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: schema_version {values['schema_version']} not supported "
            f"(this build reads {SCHEMA_VERSION})"
        )
    cfg = RunConfig(values=values, source=str(path))
    _validate(cfg)
    return cfg


def _validate(cfg):
    v = cfg.values

    def need(cond, msg):
        if not cond:
            raise ConfigError(f"{cfg.source}: {msg}")

    need(v["dimension"] in (2, 3), "dimension must be 2 or 3")
    need(v["light_speed"] > 0, "light_speed must be positive")
    need(v["grid_n"] >= 8 and (v["grid_n"] & (v["grid_n"] - 1)) == 0, "grid_n must be a power of two >= 8")
    need(v["particles"] >= 0, "particles must be nonnegative")
    need(0 < v["dt"] <= 0.5, "dt must lie in (0, 0.5]")
    need(v["t_final"] > 0, "t_final must be positive")
    need(v["sample_every"] >= 1, "sample_every must be at least 1")
    need(v["viscosity"] > 0, "viscosity must be positive")
    need(v["kernel"] in ("constant", "algebraic"), "kernel must be constant or algebraic")
    need(v["kernel_amplitude"] >= 0, "kernel_amplitude must be nonnegative")
    need(v["kernel_beta"] >= 0, "kernel_beta must be nonnegative")
    if v["regularization"]:
        need(v["epsilon"] > 0, "epsilon must be positive")
        need(
            v["epsilon"] >= 2.0 / v["grid_n"],
            "epsilon must be at least two grid spacings (mollifier resolvability)",
        )
    need(
        v["ensemble_init"] in ("gaussian", "two_beam", "file", "vacuum"),
        "ensemble_init must be gaussian, two_beam, file, or vacuum",
    )
    need(
        v["ensemble_position"] in ("random", "quiet"),
        "ensemble_position must be random or quiet",
    )
    need(v["position_jitter"] >= 0, "position_jitter must be nonnegative")
    need(v["mollifier"] in ("bump", "gaussian"), "mollifier must be bump or gaussian")
    if v["ensemble_init"] == "two_beam":
        need(v["beam_w"] is not None, "two_beam needs beam_w")
        need(len(v["beam_w"]) == v["dimension"], "beam_w length must match dimension")
    if v["ensemble_init"] == "file":
        need(v["ensemble_file"] is not None, "file init needs ensemble_file")
    if v["ensemble_init"] == "gaussian":
        need(len(v["w_center"]) == v["dimension"], "w_center length must match dimension")
        need(v["w_spread"] > 0, "w_spread must be positive")
    need(
        v["fluid_init"] in ("taylor_green", "zero", "file"),
        "fluid_init must be taylor_green, zero, or file",
    )
    if v["fluid_init"] == "file":
        need(v["fluid_file"] is not None, "file init needs fluid_file")
    if v["fluid_mean"] is not None:
        need(len(v["fluid_mean"]) == v["dimension"], "fluid_mean length must match dimension")
    need(v["checkpoint_every"] >= 0, "checkpoint_every must be nonnegative")
    need(v["picard_iterations"] >= 2, "picard_iterations must be at least 2")
    need(v["store_every"] >= 1, "store_every must be at least 1")


def _kernel_from(cfg):
    if cfg.kernel == "constant":
        return CommKernel.constant(cfg.kernel_amplitude)
    return CommKernel.algebraic(cfg.kernel_beta, cfg.kernel_amplitude)


def _ensemble_init_from(cfg):
    kind = cfg.ensemble_init
    if kind == "vacuum":
        return {"kind": "gaussian"}  # unused; particle count is zero
    if kind == "gaussian":
        init = {"kind": "gaussian", "center": cfg.w_center, "spread": cfg.w_spread}
        if cfg.w_truncate is not None:
            init["truncate"] = cfg.w_truncate
    elif kind == "two_beam":
        init = {"kind": "two_beam", "beam_w": cfg.beam_w}
    else:
        return {"kind": "file", "path": cfg.ensemble_file}
    if cfg.ensemble_position == "quiet":
        init["position"] = "quiet"
        init["jitter"] = cfg.position_jitter
    return init


def _fluid_init_from(cfg):
    kind = cfg.fluid_init
    if kind == "file":
        return {"kind": "file", "path": cfg.fluid_file}
    init = {"kind": kind}
    if kind == "taylor_green":
        init["amplitude"] = cfg.fluid_amplitude
    if cfg.fluid_mean is not None:
        init["mean"] = cfg.fluid_mean
    return init


def to_run_params(cfg, out_dir=None):
    n_particles = 0 if cfg.ensemble_init == "vacuum" else cfg.particles
    return RunParams(
        d=cfg.dimension,
        c=cfg.light_speed,
        grid_n=cfg.grid_n,
        n_particles=n_particles,
        dt=cfg.dt,
        t_final=cfg.t_final,
        sample_every=cfg.sample_every,
        mu=cfg.viscosity,
        kernel=_kernel_from(cfg),
        regularized=cfg.regularization,
        epsilon=cfg.epsilon,
        mollifier_family=cfg.mollifier,
        ensemble_init=_ensemble_init_from(cfg),
        fluid_init=_fluid_init_from(cfg),
        seed=cfg.seed,
        checkpoint_every=cfg.checkpoint_every,
        out_dir=out_dir,
    )


def to_picard_params(cfg):
    return PicardParams(
        d=cfg.dimension,
        c=cfg.light_speed,
        grid_n=cfg.grid_n,
        n_particles=cfg.particles,
        dt=cfg.dt,
        t_final=cfg.t_final,
        epsilon=cfg.epsilon,
        mollifier_family=cfg.mollifier,
        mu=cfg.viscosity,
        kernel=_kernel_from(cfg),
        iterations=cfg.picard_iterations,
        store_every=cfg.store_every,
        seed=cfg.seed,
        ensemble_init=_ensemble_init_from(cfg),
        fluid_init=_fluid_init_from(cfg),
    )
