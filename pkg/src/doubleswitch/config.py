"""JSON problem configuration: schema, validation and problem construction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from typing import Optional

import jsonschema
import numpy as np

from .boundary import (BoundaryConditions, ambient_manifold, hyperplane_manifold, level_set_manifold,
                       point_manifold, sphere_manifold)
from .errors import InvalidArgument
from .extremal import BangBangExtremal
from .families import Fixture, construct_nominal, family_ids, make_nominal
from .fields import ControlAffineSystem, CotangentPoint, PolynomialMap, parametric_polynomial

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}
_TERM = {"type": "array", "prefixItems": [_NUM, {"type": "array", "items": {"type": "integer", "minimum": 0}}],
         "items": False, "minItems": 2}
_POLY = {"type": "array", "items": {"type": "array", "items": _TERM}, "minItems": 1}
_PFIELD = {
    "type": "object",
    "properties": {"base": _POLY, "per_param": {"type": "array", "items": {"oneOf": [_POLY, {"type": "null"}]}}},
    "required": ["base"],
    "additionalProperties": False,
}
_MANIFOLD = {
    "oneOf": [
        {"type": "object", "properties": {"kind": {"const": "point"}, "x": _VEC, "r_shift": {}},
         "required": ["kind", "x"], "additionalProperties": False},
        {"type": "object", "properties": {"kind": {"const": "hyperplane"}, "normal": _VEC, "offset": _NUM},
         "required": ["kind", "normal", "offset"], "additionalProperties": False},
        {"type": "object", "properties": {"kind": {"const": "sphere"}, "center": _VEC,
                                          "radius": {"type": "number", "exclusiveMinimum": 0}},
         "required": ["kind", "center", "radius"], "additionalProperties": False},
        {"type": "object", "properties": {"kind": {"const": "level_set"}, "components": _POLY},
         "required": ["kind", "components"], "additionalProperties": False},
        {"type": "object", "properties": {"kind": {"const": "ambient"}},
         "required": ["kind"], "additionalProperties": False},
    ]
}
_NOMINAL = {
    "oneOf": [
        {"type": "object",
         "properties": {"p0": _VEC, "x0": _VEC, "tau": {"type": "number", "exclusiveMinimum": 0},
                        "T": {"type": "number", "exclusiveMinimum": 0}},
         "required": ["p0", "x0", "tau", "T"], "additionalProperties": False},
        {"type": "object",
         "properties": {"derive": {
             "type": "object",
             "properties": {"x0": _VEC, "tau": {"type": "number", "exclusiveMinimum": 0},
                            "T": {"type": "number", "exclusiveMinimum": 0},
                            "initial": {"enum": ["point", "plane"]}, "final": {"enum": ["point", "plane"]}},
             "required": ["x0", "tau", "T"], "additionalProperties": False}},
         "required": ["derive"], "additionalProperties": False},
    ]
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "doubleswitch problem configuration",
    "type": "object",
    "properties": {
        "family": {"type": "string"},
        "params": {"type": "object"},
        "system": {
            "type": "object",
            "properties": {
                "dimension": {"type": "integer", "minimum": 1},
                "param_dim": {"type": "integer", "minimum": 1},
                "param_radius": {"type": "number", "exclusiveMinimum": 0},
                "drift": _PFIELD, "control1": _PFIELD, "control2": _PFIELD,
                "name": {"type": "string"},
            },
            "required": ["dimension", "drift", "control1", "control2"],
            "additionalProperties": False,
        },
        "initial": _MANIFOLD,
        "final": _MANIFOLD,
        "nominal": _NOMINAL,
        "tolerances": {
            "type": "object",
            "properties": {"eig": {"type": "number", "exclusiveMinimum": 0},
                           "newton": {"type": "number", "exclusiveMinimum": 0}},
            "additionalProperties": False,
        },
        "sweep": {
            "type": "object",
            "properties": {"r_path": {"oneOf": [{"type": "string"}, {"type": "array", "items": {}}]},
                           "predictor": {"enum": ["secant", "constant"]}},
            "additionalProperties": False,
        },
        "tube": {
            "type": "object",
            "properties": {"delta": {"type": ["number", "null"], "exclusiveMinimum": 0},
                           "n_starts": {"type": "integer", "minimum": 0},
                           "samples": {"type": "integer", "minimum": 1}},
            "additionalProperties": False,
        },
        "oracle": {
            "type": "object",
            "properties": {"resolution": {"type": "number", "exclusiveMinimum": 0},
                           "coarse": {"type": "number", "exclusiveMinimum": 0},
                           "half_width": {"type": "number", "exclusiveMinimum": 0},
                           "T_half_width": {"type": "number", "exclusiveMinimum": 0},
                           "samples": {"type": "integer", "minimum": 1}},
            "additionalProperties": False,
        },
        "seed": {"type": "integer", "minimum": 0},
    },
    "oneOf": [{"required": ["family"]}, {"required": ["system", "nominal"]}],
    "additionalProperties": False,
}

DEFAULTS = {
    "tolerances": {"eig": 1e-8, "newton": 1e-10},
    "sweep": {"r_path": "0:0.1:20", "predictor": "secant"},
    "tube": {"delta": None, "n_starts": 50, "samples": 3},
    "oracle": {"resolution": 1e-3, "coarse": 0.01, "half_width": 0.15, "T_half_width": 0.25, "samples": 5},
    "seed": 0,
}


@dataclass
class ProblemConfig:
    """Validated configuration with defaults filled in."""

    raw: dict
    tolerances: dict = dc_field(default_factory=dict)
    sweep: dict = dc_field(default_factory=dict)
    tube: dict = dc_field(default_factory=dict)
    oracle: dict = dc_field(default_factory=dict)
    seed: int = 0
    _fixture: Optional[Fixture] = None

    @property
    def fixture(self) -> Fixture:
        if self._fixture is None:
            self._fixture = build_problem(self.raw)
        return self._fixture


def validate(raw: dict):
    """Raise :class:`InvalidArgument` unless ``raw`` matches :data:`SCHEMA`."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InvalidArgument(f"invalid configuration at {path}: {exc.message}") from None
    if "family" in raw:
        if raw["family"] not in family_ids():
            raise InvalidArgument(f"unknown family {raw['family']!r}; known: {family_ids()}")
        extra = {"system", "initial", "final", "nominal"} & set(raw)
        if extra:
            raise InvalidArgument(f"keys {sorted(extra)} cannot be combined with 'family'")
    elif "params" in raw:
        raise InvalidArgument("'params' requires 'family'")


def load_config(source) -> ProblemConfig:
    """Load from a path or a dict, validate and fill defaults."""
    if isinstance(source, (dict, list)):
        raw = source
    else:
        try:
            with open(source, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"malformed JSON in {source}: {exc}") from None
    if not isinstance(raw, dict):
        raise InvalidArgument("configuration must be a JSON object")
    validate(raw)
    merged = {k: dict(v, **raw.get(k, {})) if isinstance(v, dict) else raw.get(k, v) for k, v in DEFAULTS.items()}
    return ProblemConfig(raw, merged["tolerances"], merged["sweep"], merged["tube"], merged["oracle"],
                         int(merged["seed"]))


def _poly(spec, n):
    return PolynomialMap([[(c, e) for c, e in comp] for comp in spec], n)


def _field(spec, n, name):
    base = _poly(spec["base"], n)
    per = [None if p is None else _poly(p, n) for p in spec.get("per_param", [])]
    f = parametric_polynomial(base, per)
    f.name = name
    return f


def _manifold(spec, n):
    kind = spec["kind"]
    if kind == "point":
        if len(spec["x"]) != n:
            raise InvalidArgument("point manifold dimension mismatch")
        return point_manifold(spec["x"], spec.get("r_shift"))
    if kind == "hyperplane":
        return hyperplane_manifold(spec["normal"], spec["offset"])
    if kind == "sphere":
        return sphere_manifold(spec["center"], spec["radius"])
    if kind == "level_set":
        return level_set_manifold(_poly(spec["components"], n))
    return ambient_manifold(n)


def build_problem(raw: dict) -> Fixture:
    """Problem data ``(sys, bounds, ext)`` described by a validated configuration."""
    if "family" in raw:
        return make_nominal(raw["family"], raw.get("params"))
    s = raw["system"]
    n = int(s["dimension"])
    k = int(s.get("param_dim", 1))
    sys = ControlAffineSystem(n, _field(s["drift"], n, "f0"), _field(s["control1"], n, "f1"),
                              _field(s["control2"], n, "f2"), param_dim=k,
                              param_radius=s.get("param_radius", np.inf), name=s.get("name", "custom"))
    nom = raw["nominal"]
    if "derive" in nom:
        d = nom["derive"]
        if "initial" in raw or "final" in raw:
            raise InvalidArgument("'derive' builds its own endpoint manifolds; drop 'initial'/'final'")
        return construct_nominal(sys, d["x0"], d["tau"], d["T"], d.get("initial", "point"),
                                 d.get("final", "point"), fid=sys.name)
    if "initial" not in raw or "final" not in raw:
        raise InvalidArgument("explicit nominal data needs 'initial' and 'final' manifolds")
    if len(nom["p0"]) != n or len(nom["x0"]) != n:
        raise InvalidArgument("nominal covector/state dimension mismatch")
    bounds = BoundaryConditions(_manifold(raw["initial"], n), _manifold(raw["final"], n))
    ext = BangBangExtremal(CotangentPoint(nom["p0"], nom["x0"]), nom["tau"], nom["tau"], nom["T"],
                           r=sys.zero_param())
    return Fixture(sys.name, sys, bounds, ext)
