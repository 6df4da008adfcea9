"""YAML experiment files: schema check, construction of the typed configs and
canonical hashing.

Every error raised here is a :class:`ConfigError` whose message starts with the
dotted path of the offending field, e.g. ``drift.alpha``.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass

import jsonschema
import numpy as np
import yaml

from . import dynamics as dyn
from .grid import GridSpec
from .lab import BallSpec, ExperimentConfig
from .noise import NoiseSpec


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-6`` (no dot) as a float, as JSON does."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}

SCHEMA = {
    "type": "object",
    "required": ["grid", "drift", "solver", "noise"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "grid": {
            "type": "object",
            "required": ["n_cells"],
            "additionalProperties": False,
            "properties": {"n_cells": {"type": "integer", "minimum": 3}, "length": _POS},
        },
        "drift": {
            "type": "object",
            "required": ["equation", "alpha"],
            "additionalProperties": False,
            "properties": {
                "equation": {"enum": list(dyn.EQUATIONS)},
                "alpha": {"type": "number", "exclusiveMinimum": 1, "exclusiveMaximum": 2},
                "epsilon": _NONNEG,
                "coupling": {"enum": list(dyn.COUPLINGS)},
                "mu": _NUM,
                "lambda_floor": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "reaction": {
                    "type": ["object", "null"],
                    "required": ["scale"],
                    "additionalProperties": False,
                    "properties": {"scale": _NUM, "delta": _POS, "growth_exponent": _NUM},
                },
                "forcing": {
                    "type": ["object", "null"],
                    "required": ["amplitude"],
                    "additionalProperties": False,
                    "properties": {"amplitude": _NUM, "mode": {"type": "integer", "minimum": 1}},
                },
            },
        },
        "solver": {
            "type": "object",
            "required": ["dt"],
            "additionalProperties": False,
            "properties": {
                "dt": _POS,
                "newton_tol": {"type": "number", "minimum": 1e-14},
                "newton_max_iter": {"type": "integer", "minimum": 1},
                "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "max_bisections": {"type": "integer", "minimum": 0},
            },
        },
        "noise": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["wiener_v", "levy_v", "scalar_bm", "zero"]},
                "modes": {"type": "integer", "minimum": 1},
                "mode_amplitudes": {"type": "array", "items": _NONNEG},
                "jump_rate": _NONNEG,
                "jump_amplitude": _NONNEG,
                "resolution": _POS,
            },
        },
        "ensemble": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "radius": _NONNEG,
                "count": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "modes": {"type": "integer", "minimum": 1},
            },
        },
        "pullback_starts": {"type": "array", "items": _NUM, "minItems": 1},
        "target_time": _NUM,
        "n_omega": {"type": "integer", "minimum": 1},
        "extinction_atol": _POS,
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "s": _NUM, "t": _NUM, "omega": {"type": "integer", "minimum": 0},
                "member": {"type": "integer", "minimum": 0},
                "state_every": {"type": "integer", "minimum": 0},
            },
        },
        "converge": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epsilons": {"type": "array", "items": _POS, "minItems": 1},
                "ref_epsilon": _NONNEG,
                "omega": {"type": "integer", "minimum": 0},
            },
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "cases": {"type": "integer", "minimum": 1},
                "dt": _POS,
                "horizon": _POS,
                "seed": {"type": "integer", "minimum": 0},
                "tolerance": _POS,
            },
        },
    },
}


def _path(error) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "required":
        missing = [p for p in error.validator_value if p not in error.instance]
        parts.append(missing[0])
    elif error.validator == "additionalProperties":
        extra = sorted(set(error.instance) - set(error.schema.get("properties", {})))
        if extra:
            parts.append(extra[0])
    return ".".join(parts) or "<root>"


def validate(raw) -> None:
    if not isinstance(raw, dict):
        raise ConfigError("<root>: config must be a mapping")
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = errors[0]
        raise ConfigError(f"{_path(err)}: {err.message}")


def load(path) -> dict:
    with open(path) as fh:
        try:
            raw = yaml.load(fh, Loader=_Loader)
        except yaml.YAMLError as exc:
            raise ConfigError(f"<root>: not valid YAML ({exc})") from exc
    validate(raw)
    return raw


def canonical(raw: dict) -> str:
    return json.dumps(raw, sort_keys=True, separators=(",", ":"))


def config_hash(raw: dict) -> str:
    return hashlib.sha256(canonical(raw).encode()).hexdigest()


@dataclass(frozen=True)
class Built:
    experiment: ExperimentConfig
    raw: dict
    seed: int


def _section(name, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def build(raw: dict) -> Built:
    """Typed configuration from a validated mapping."""
    validate(raw)
    seed = int(raw.get("seed", 0))
    g = raw["grid"]
    grid = _section("grid", lambda: GridSpec(g["n_cells"], float(g.get("length", 1.0))))

    d = raw["drift"]

    def make_drift():
        reaction = None
        if d.get("reaction"):
            r = d["reaction"]
            reaction = dyn.SaturatingReaction(float(r["scale"]), float(r.get("delta", 1.0)),
                                              float(r.get("growth_exponent", 1.25)))
        forcing = None
        if d.get("forcing"):
            f = d["forcing"]
            k = int(f.get("mode", 1))
            forcing = dyn.ConstantForcing(float(f["amplitude"]) * np.sqrt(2.0) * np.sin(k * np.pi * grid.x / grid.length))
        return dyn.DriftSpec(
            equation=d["equation"], alpha=float(d["alpha"]), epsilon=float(d.get("epsilon", 1e-6)),
            reaction=reaction, forcing=forcing, coupling=d.get("coupling", "additive"),
            mu=float(d.get("mu", 0.0)), lambda_floor=d.get("lambda_floor"),
        )

    drift = _section("drift", make_drift)
    s = raw["solver"]
    solver = _section("solver", lambda: dyn.SolverConfig(
        dt=float(s["dt"]), newton_tol=float(s.get("newton_tol", 1e-11)),
        newton_max_iter=int(s.get("newton_max_iter", 50)), damping=float(s.get("damping", 0.5)),
        max_bisections=int(s.get("max_bisections", 10))))
    n = raw["noise"]
    amps = n.get("mode_amplitudes", [1.0] * int(n.get("modes", 1)))
    noise = _section("noise", lambda: NoiseSpec(
        kind=n["kind"], modes=int(n.get("modes", len(amps))), mode_amplitudes=tuple(amps),
        jump_rate=float(n.get("jump_rate", 0.0)), jump_amplitude=float(n.get("jump_amplitude", 0.0)),
        mu=drift.mu, seed=seed, resolution=float(n.get("resolution", solver.dt))))
    e = raw.get("ensemble", {})
    ball = _section("ensemble", lambda: BallSpec(float(e.get("radius", 1.0)), int(e.get("count", 1)),
                                                 int(e.get("seed", 0)), int(e.get("modes", 8))))
    exp = _section("pullback_starts", lambda: ExperimentConfig(
        drift=drift, grid=grid, solver=solver, noise=noise, ensemble=ball,
        pullback_starts=tuple(raw.get("pullback_starts", [0.0])),
        target_time=float(raw.get("target_time", 0.0)), n_omega=int(raw.get("n_omega", 1)),
        extinction_atol=float(raw.get("extinction_atol", 1e-8))))
    return Built(exp, raw, seed)
