"""Named problem presets and the JSON problem loader."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .expr import control_set_from_dict, problem_from_expressions
from .problem import ControlProblem, ControlSet, make_lq_problem


def example33() -> ControlProblem:
    """Scalar system dx = u dt + u dW on [0, 1], f = u^2/2, h = -x^2/2, U = [-1, 1]."""
    return make_lq_problem(A=0, B=1, C=0, D=1, R=0, M=0, N=1, G=-1, horizon=1.0,
                           initial_state=[0.0], control_set=ControlSet.box([-1.0], [1.0]),
                           name="example33")


def example33_without_terminal() -> ControlProblem:
    """The example33 problem with h = 0: the reference control is no longer singular."""
    return make_lq_problem(A=0, B=1, C=0, D=1, R=0, M=0, N=1, G=0, horizon=1.0,
                           initial_state=[0.0], control_set=ControlSet.box([-1.0], [1.0]),
                           name="example33-h0")


def example34(T: float = 1.0) -> ControlProblem:
    """Two-dimensional system dx = Bu dt + Du dW with cost <Gx(T), x(T)>/2, U = [-1, 1]^2."""
    B = np.diag([1.0, 0.0])
    D = np.diag([0.0, 1.0])
    G = np.diag([1.0, 0.0])
    Z = np.zeros((2, 2))
    return make_lq_problem(A=Z, B=B, C=Z, D=D, R=Z, M=Z, N=Z, G=G, horizon=T,
                           initial_state=[0.0, 0.0],
                           control_set=ControlSet.box([-1.0, -1.0], [1.0, 1.0]), name="example34")


def sine_drift(x0: float = 1.0, T: float = 1.0) -> ControlProblem:
    """Nonlinear scalar preset b = sin(x) + u, sigma = u."""
    return problem_from_expressions({
        "n": 1, "m": 1, "T": T, "x0": [x0],
        "b": ["sin(x[0]) + u[0]"], "sigma": ["u[0]"],
        "f": "0.5*u[0]**2", "h": "0.5*x[0]**2",
        "control_set": {"kind": "box", "lower": [-1.0], "upper": [1.0]},
        "name": "sine-drift",
    })


def lq_scalar() -> ControlProblem:
    """Scalar LQ problem with every coefficient switched on."""
    return make_lq_problem(A=0.5, B=1.0, C=0.3, D=0.5, R=1.0, M=0.2, N=1.0, G=1.0,
                           horizon=1.0, initial_state=[1.0],
                           control_set=ControlSet.box([-1.0], [1.0]), name="lq-scalar")


PRESETS = {
    "example33": example33,
    "example33-h0": example33_without_terminal,
    "example34": example34,
    "sine-drift": sine_drift,
    "lq-scalar": lq_scalar,
}


def _matrix(d: dict, key: str, shape: tuple) -> np.ndarray:
    if key not in d:
        return np.zeros(shape)
    return np.asarray(d[key], dtype=float).reshape(shape)


def problem_from_dict(d: dict) -> ControlProblem:
    """Problem from a JSON document.

    ``kind`` selects ``"example33"``, ``"example34"``, ``"lq"`` or
    ``"custom-expr"`` (any name in :data:`PRESETS` is accepted too). Keys
    ``n``, ``m``, ``T``, ``x0`` override preset defaults where meaningful.
    """
    if not isinstance(d, dict):
        raise ConfigError("problem document must be a JSON object")
    kind = d.get("kind")
    if kind == "custom-expr":
        return problem_from_expressions(d)
    if kind == "lq":
        try:
            n, m = int(d["n"]), int(d["m"])
        except KeyError as exc:
            raise ConfigError(f"lq problem is missing key {exc}") from None
        cs = control_set_from_dict(d.get("control_set", {"kind": "box", "lower": [-1.0] * m, "upper": [1.0] * m}))
        return make_lq_problem(
            A=_matrix(d, "A", (n, n)), B=_matrix(d, "B", (n, m)), C=_matrix(d, "C", (n, n)),
            D=_matrix(d, "D", (n, m)), R=_matrix(d, "R", (n, n)), M=_matrix(d, "M", (m, n)),
            N=_matrix(d, "N", (m, m)), G=_matrix(d, "G", (n, n)), horizon=float(d.get("T", 1.0)),
            initial_state=d.get("x0", [0.0] * n), control_set=cs, name=d.get("name", "lq"),
        )
    if kind == "example34":
        p = example34(float(d.get("T", 1.0)))
    elif kind in PRESETS:
        p = PRESETS[kind]()
    else:
        raise ConfigError(f"unknown problem kind {kind!r}")
    for key, want in (("n", p.n), ("m", p.m)):
        if key in d and int(d[key]) != want:
            raise ConfigError(f"preset {kind} has {key}={want}, document says {d[key]}")
    return p


def load_problem(path) -> ControlProblem:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read problem file {path}: {exc}") from None
    return problem_from_dict(doc)
