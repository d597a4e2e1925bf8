"""Small arithmetic expression language for custom coefficients.

Expressions are written over ``t``, ``x[i]``, ``u[j]`` and ``w`` (the current
Brownian value) with ``+ - * / **``, ``pow(a, b)``, numeric constants and a
handful of elementary functions. Parsing goes through :mod:`ast` with a
whitelist, so no arbitrary code is evaluated; derivatives are symbolic.
"""

from __future__ import annotations

import ast

import numpy as np
import sympy as sp

from .errors import ConfigError
from .problem import ControlProblem, ControlSet

_FUNCS = {
    "sin": sp.sin, "cos": sp.cos, "tan": sp.tan, "exp": sp.exp, "log": sp.log,
    "sqrt": sp.sqrt, "tanh": sp.tanh, "atan": sp.atan, "pow": sp.Pow,
}
_CONSTS = {"pi": sp.pi, "e": sp.E}
_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a**b,
}


class _Symbols:
    def __init__(self, n: int, m: int):
        self.t = sp.Symbol("t", real=True)
        self.w = sp.Symbol("w", real=True)
        self.x = [sp.Symbol(f"x{i}", real=True) for i in range(n)]
        self.u = [sp.Symbol(f"u{j}", real=True) for j in range(m)]

    @property
    def all(self):
        return [self.t, *self.x, *self.u, self.w]


def parse_expression(text: str, syms: _Symbols) -> sp.Expr:
    """Parse ``text`` into a sympy expression; raise :class:`ConfigError` on anything else."""
    try:
        tree = ast.parse(str(text).replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {text!r}: {exc.msg}") from None

    def conv(node):
        if isinstance(node, ast.Expression):
            return conv(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return sp.Float(node.value) if isinstance(node.value, float) else sp.Integer(node.value)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](conv(node.left), conv(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            val = conv(node.operand)
            return -val if isinstance(node.op, ast.USub) else val
        if isinstance(node, ast.Name):
            if node.id == "t":
                return syms.t
            if node.id == "w":
                return syms.w
            if node.id in _CONSTS:
                return _CONSTS[node.id]
            raise ConfigError(f"unknown name {node.id!r} in {text!r}")
        if isinstance(node, ast.Subscript) and isinstance(node.value, ast.Name):
            idx = node.slice
            if not (isinstance(idx, ast.Constant) and isinstance(idx.value, int)):
                raise ConfigError(f"index must be an integer literal in {text!r}")
            table = {"x": syms.x, "u": syms.u}.get(node.value.id)
            if table is None or not 0 <= idx.value < len(table):
                raise ConfigError(f"bad variable {node.value.id}[{idx.value}] in {text!r}")
            return table[idx.value]
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS and not node.keywords:
            return _FUNCS[node.func.id](*[conv(a) for a in node.args])
        raise ConfigError(f"unsupported syntax in {text!r}: {ast.dump(node)[:60]}")

    return conv(tree)


class _Compiled:
    """Array-valued oracle built from a nested list of sympy expressions."""

    def __init__(self, exprs, syms: _Symbols, shape: tuple):
        self.shape = shape
        flat = list(np.asarray(exprs, dtype=object).reshape(-1)) if shape else [exprs]
        self.fns = [sp.lambdify(syms.all, e, modules="numpy") for e in flat]

    def __call__(self, t, x, u, w):
        P = x.shape[0]
        args = [t, *[x[:, i] for i in range(x.shape[1])], *[u[:, j] for j in range(u.shape[1])], w]
        cols = [np.broadcast_to(np.asarray(fn(*args), dtype=float), (P,)) for fn in self.fns]
        return np.stack(cols, axis=-1).reshape((P,) + self.shape)


def _jac(exprs, vars_):
    return [[sp.diff(e, v) for v in vars_] for e in exprs]


def problem_from_expressions(spec: dict) -> ControlProblem:
    """Build a problem with symbolic derivatives from a ``custom-expr`` document.

    Required keys: ``n``, ``m``, ``T``, ``x0``, ``b`` (list of n strings),
    ``sigma`` (list of n strings), ``f``, ``h``. Optional: ``control_set``
    (``{"kind": "box", "lower": [...], "upper": [...]}`` or
    ``{"kind": "polytope", "vertices": [...]}``), ``coefficient_class``,
    ``lipschitz``, ``name``.
    """
    try:
        n, m = int(spec["n"]), int(spec["m"])
        T = float(spec["T"])
        x0 = spec["x0"]
        b_txt, s_txt, f_txt, h_txt = spec["b"], spec["sigma"], spec["f"], spec["h"]
    except KeyError as exc:
        raise ConfigError(f"custom-expr problem is missing key {exc}") from None
    syms = _Symbols(n, m)
    if len(b_txt) != n or len(s_txt) != n:
        raise ConfigError("b and sigma need one expression per state component")
    b = [parse_expression(e, syms) for e in b_txt]
    s = [parse_expression(e, syms) for e in s_txt]
    f = parse_expression(f_txt, syms)
    h = parse_expression(h_txt, syms)
    if h.free_symbols & ({syms.t} | set(syms.u)):
        raise ConfigError("terminal cost h may depend on x[i] and w only")

    X, U = syms.x, syms.u

    def vec_family(v):
        vx = [_jac([e], X)[0] for e in v]
        vu = [_jac([e], U)[0] for e in v]
        vxx = [_jac(row, X) for row in vx]
        vxu = [_jac(row, X) for row in vu]  # [k][j][i] = d2/du_j dx_i
        vuu = [_jac(row, U) for row in vu]
        return [
            _Compiled(v, syms, (n,)), _Compiled(vx, syms, (n, n)), _Compiled(vu, syms, (n, m)),
            _Compiled(vxx, syms, (n, n, n)), _Compiled(vxu, syms, (n, m, n)), _Compiled(vuu, syms, (n, m, m)),
        ]

    bf = vec_family(b)
    sf = vec_family(s)
    fx = _jac([f], X)[0]
    fu = _jac([f], U)[0]
    ff = [
        _Compiled(f, syms, ()), _Compiled(fx, syms, (n,)), _Compiled(fu, syms, (m,)),
        _Compiled(_jac(fx, X), syms, (n, n)), _Compiled(_jac(fu, X), syms, (m, n)),
        _Compiled(_jac(fu, U), syms, (m, m)),
    ]
    hx = _jac([h], X)[0]
    h0, h1, h2 = _Compiled(h, syms, ()), _Compiled(hx, syms, (n,)), _Compiled(_jac(hx, X), syms, (n, n))

    def terminal(fn):
        return lambda x, w: fn(0.0, x, np.zeros((x.shape[0], m)), w)

    cs_spec = spec.get("control_set", {"kind": "box", "lower": [-1.0] * m, "upper": [1.0] * m})
    cset = control_set_from_dict(cs_spec)
    return ControlProblem(
        state_dim=n, control_dim=m, horizon=T, initial_state=np.asarray(x0, dtype=float),
        b=bf[0], b_x=bf[1], b_u=bf[2], b_xx=bf[3], b_xu=bf[4], b_uu=bf[5],
        sigma=sf[0], sigma_x=sf[1], sigma_u=sf[2], sigma_xx=sf[3], sigma_xu=sf[4], sigma_uu=sf[5],
        f=ff[0], f_x=ff[1], f_u=ff[2], f_xx=ff[3], f_xu=ff[4], f_uu=ff[5],
        h=terminal(h0), h_x=terminal(h1), h_xx=terminal(h2),
        control_set=cset,
        coefficient_class=spec.get("coefficient_class",
                                   "random" if any(syms.w in e.free_symbols for e in [*b, *s, f, h]) else "deterministic"),
        lipschitz=spec.get("lipschitz"),
        name=spec.get("name", "custom-expr"),
    )


def control_set_from_dict(d: dict) -> ControlSet:
    kind = d.get("kind", "box")
    grid = d.get("grid")
    if kind == "box":
        return ControlSet.box(d["lower"], d["upper"], grid)
    if kind == "polytope":
        return ControlSet.polytope(d["vertices"], grid)
    raise ConfigError(f"unknown control set kind {kind!r}")
