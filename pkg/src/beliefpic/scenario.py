"""JSON scenario files: schema, defaults and conversion to library objects."""

from __future__ import annotations

import copy
import json
from typing import Any, Dict

import jsonschema
import numpy as np

from beliefpic.covariance import Belief
from beliefpic.errors import InvalidArgument
from beliefpic.model import Affine, ModelSpec, QuadraticCost, Scalar, Scaled, SensingCost

KINDS = ("simulate", "value_sweep", "control", "oracle", "check", "baseline_compare")

_num = {"type": "number"}
_matrix = {"oneOf": [_num, {"type": "array", "items": {"type": "array", "items": _num}}]}
_tensor = {"oneOf": [_matrix, {"type": "array", "items": {"type": "array", "items": {"type": "array", "items": _num}}}]}
_vector = {"oneOf": [_num, {"type": "array", "items": _num}]}
_cost = {
    "type": "object",
    "properties": {"S": _matrix, "s": _vector, "c": _num},
    "additionalProperties": False,
}
_pos_int = {"type": "integer", "minimum": 1}

SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["A", "B", "H", "sigma_o", "R_a", "lambda", "T", "dt", "sensing", "Sigma0", "mu0"],
    "properties": {
        "n": _pos_int, "m": _pos_int, "p": _pos_int, "ell_a": _pos_int, "ell_s": _pos_int,
        "A": _tensor, "B": _matrix, "H": _matrix, "sigma_o": _matrix, "R_a": _matrix, "R_s": _matrix,
        "lambda": {"type": "number", "exclusiveMinimum": 0},
        "T": {"type": "number", "exclusiveMinimum": 0},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "sensing": {
            "type": "object",
            "required": ["type"],
            "properties": {
                "type": {"enum": ["scalar", "scaled", "affine"]},
                "C0": _matrix,
                "C_list": {"type": "array", "items": _matrix, "minItems": 1},
            },
            "additionalProperties": False,
        },
        "q": _cost, "phi": _cost,
        "Sigma0": _matrix, "mu0": _vector, "x0": _vector,
        "seed": {"type": "integer", "minimum": 0},
        "experiment": {
            "type": "object",
            "properties": {
                "kind": {"enum": list(KINDS)},
                "paths": _pos_int,
                "replan_every": _pos_int,
                "seeds": _pos_int,
                "t": {"type": "number", "minimum": 0},
                "mu_points": {"type": "array", "items": _vector},
                "controller": {"enum": ["pic", "zero", "lqg"]},
                "method": {"enum": ["auto", "lr", "fd"]},
                "sensing_mode": {"enum": ["selector", "fixed"]},
                "u_max": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "level": {"enum": ["fast", "full"]},
                "tol_match": {"type": "number", "exclusiveMinimum": 0},
                "pde": {
                    "type": "object",
                    "properties": {
                        "dmu": {"type": "number", "exclusiveMinimum": 0},
                        "dt": {"type": "number", "exclusiveMinimum": 0},
                        "query_min": _num, "query_max": _num,
                        "scheme": {"enum": ["crank_nicolson", "explicit"]},
                    },
                    "additionalProperties": False,
                },
                "lqg_substeps": _pos_int,
            },
            "additionalProperties": False,
        },
        "meta": {"type": "object"},
    },
    "additionalProperties": False,
}

EXPERIMENT_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "simulate": {"controller": "pic", "replan_every": 5, "paths": 1000, "method": "auto", "sensing_mode": "selector"},
    "value_sweep": {"t": 0.0, "paths": 10000},
    "control": {"t": 0.0, "paths": 10000, "method": "auto"},
    "oracle": {"u_max": None, "lqg_substeps": 10,
               "pde": {"dmu": 0.02, "dt": 0.001, "scheme": "crank_nicolson"}},
    "check": {"level": "fast", "tol_match": 1e-8},
    "baseline_compare": {"seeds": 20, "paths": 1000, "replan_every": 5, "method": "auto"},
}


def _shape(value):
    return np.atleast_2d(np.asarray(value, dtype=float)).shape


def _matrix_value(value):
    return np.atleast_2d(np.asarray(value, dtype=float)).tolist()


def _vector_value(value):
    return np.atleast_1d(np.asarray(value, dtype=float)).ravel().tolist()


def load(path) -> dict:
    """Read a scenario or manifest file. JSON errors propagate as ``json.JSONDecodeError``."""
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict) and "scenario" in data and isinstance(data["scenario"], dict):
        data = data["scenario"]
    return data


def resolve(raw: dict, kind: str = None, seed: int = None, paths: int = None) -> dict:
    """Validate ``raw`` and return the fully resolved scenario (all defaults filled in)."""
    jsonschema.validate(raw, SCHEMA)
    sc = copy.deepcopy(raw)
    sc.pop("meta", None)
    exp = sc.setdefault("experiment", {})
    if kind is not None:
        exp["kind"] = kind
    exp.setdefault("kind", "simulate")
    for key, val in EXPERIMENT_DEFAULTS[exp["kind"]].items():
        if isinstance(val, dict):
            exp[key] = {**val, **exp.get(key, {})}
        else:
            exp.setdefault(key, val)
    if paths is not None:
        exp["paths"] = int(paths)
    if seed is not None:
        sc["seed"] = int(seed)
    sc.setdefault("seed", 0)

    n, ell_a = _shape(sc["B"])
    m = _shape(sc["H"])[1]
    p = _shape(sc["sigma_o"])[0]
    stype = sc["sensing"]["type"]
    ell_s = len(sc["sensing"].get("C_list", [])) if stype == "affine" else 1
    inferred = dict(n=n, m=m, p=p, ell_a=ell_a, ell_s=ell_s)
    for key, val in inferred.items():
        if key in sc and sc[key] != val:
            raise InvalidArgument(f"{key}={sc[key]} is inconsistent with the matrices (found {val})")
        sc[key] = val

    for key in ("B", "H", "sigma_o", "R_a", "Sigma0"):
        sc[key] = _matrix_value(sc[key])
    A = np.asarray(sc["A"], dtype=float)
    sc["A"] = A.tolist() if A.ndim == 3 else _matrix_value(A)
    sc["R_s"] = _matrix_value(sc.get("R_s", np.zeros((ell_s, ell_s))))
    for name in ("q", "phi"):
        cost = sc.get(name, {})
        sc[name] = {
            "S": _matrix_value(cost.get("S", np.zeros((n, n)))),
            "s": _vector_value(cost.get("s", np.zeros(n))),
            "c": float(cost.get("c", 0.0)),
        }
    sc["mu0"] = _vector_value(sc["mu0"])
    sc["x0"] = _vector_value(sc.get("x0", sc["mu0"]))
    if "C0" in sc["sensing"]:
        sc["sensing"]["C0"] = _matrix_value(sc["sensing"]["C0"])
    if "C_list" in sc["sensing"]:
        sc["sensing"]["C_list"] = [_matrix_value(C) for C in sc["sensing"]["C_list"]]
    if "mu_points" in exp:
        exp["mu_points"] = [_vector_value(v) for v in exp["mu_points"]]
    elif exp["kind"] in ("value_sweep", "control"):
        exp["mu_points"] = [sc["mu0"]]

    checks = {"Sigma0": (_shape(sc["Sigma0"]), (n, n)), "R_a": (_shape(sc["R_a"]), (ell_a, ell_a)),
              "R_s": (_shape(sc["R_s"]), (ell_s, ell_s)), "sigma_o": (_shape(sc["sigma_o"]), (p, p))}
    for key, (got, want) in checks.items():
        if got != want:
            raise InvalidArgument(f"{key} has shape {got}, expected {want}")
    for key in ("mu0", "x0"):
        if len(sc[key]) != n:
            raise InvalidArgument(f"{key} must have length {n}")
    for v in exp.get("mu_points", []):
        if len(v) != n:
            raise InvalidArgument(f"mu_points entries must have length {n}")
    if stype == "scaled" and "C0" not in sc["sensing"]:
        raise InvalidArgument("scaled sensing needs C0")
    if stype == "affine" and "C_list" not in sc["sensing"]:
        raise InvalidArgument("affine sensing needs C_list")
    build_model(sc)
    Belief(sc["mu0"], sc["Sigma0"])
    return sc


def build_model(sc: dict) -> ModelSpec:
    s = sc["sensing"]
    if s["type"] == "scalar":
        family = Scalar()
    elif s["type"] == "scaled":
        family = Scaled(s["C0"])
    else:
        family = Affine(s["C_list"])
    return ModelSpec(
        A=sc["A"], B=sc["B"], H=sc["H"], sigma_o=sc["sigma_o"], R_a=sc["R_a"], lam=sc["lambda"],
        sensing=family, q=QuadraticCost(**sc["q"]), phi=QuadraticCost(**sc["phi"]),
        rho=SensingCost(sc["R_s"]), T=sc["T"], dt=sc["dt"],
    )


def initial_belief(sc: dict) -> Belief:
    return Belief(sc["mu0"], sc["Sigma0"])
