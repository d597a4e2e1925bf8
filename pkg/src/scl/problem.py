"""Control problem model: coefficient oracles, control sets, admissible controls.

Oracle conventions (``P`` is a batch of probe points or Monte Carlo paths):

=============  =====================  ===========================================
oracle         call                   output shape
=============  =====================  ===========================================
``b``          ``b(t, x, u, w)``      ``(P, n)``
``b_x``        ``b_x(t, x, u, w)``    ``(P, n, n)``, ``[k, i] = db_k/dx_i``
``b_u``                               ``(P, n, m)``
``b_xx``                              ``(P, n, n, n)``, ``[k, i, j]``
``b_xu``                              ``(P, n, m, n)``, ``[k, j, i] = d2b_k/du_j dx_i``
``b_uu``                              ``(P, n, m, m)``
``f``                                 ``(P,)``; ``f_x (P, n)``, ``f_u (P, m)``,
                                      ``f_xx (P, n, n)``, ``f_xu (P, m, n)``,
                                      ``f_uu (P, m, m)``
``h``          ``h(x, w)``            ``(P,)``; ``h_x (P, n)``, ``h_xx (P, n, n)``
=============  =====================  ===========================================

``sigma`` and its derivatives mirror ``b``. ``x`` has shape ``(P, n)``, ``u``
shape ``(P, m)`` and ``w`` is the current value ``W(t)`` of the driving
Brownian motion, shape ``(P,)``; it is how random coefficients see the noise.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import AdmissibilityError, OracleError, StructureError

Oracle = Callable[..., np.ndarray]

DRIFT_ORACLES = ("b", "b_x", "b_u", "b_xx", "b_xu", "b_uu")
DIFFUSION_ORACLES = ("sigma", "sigma_x", "sigma_u", "sigma_xx", "sigma_xu", "sigma_uu")
COST_ORACLES = ("f", "f_x", "f_u", "f_xx", "f_xu", "f_uu")
TERMINAL_ORACLES = ("h", "h_x", "h_xx")
ALL_ORACLES = DRIFT_ORACLES + DIFFUSION_ORACLES + COST_ORACLES + TERMINAL_ORACLES


# ---------------------------------------------------------------------------
# control sets


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Nonempty, bounded, convex control region: a box or a V-polytope."""

    kind: str
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    vertices: Optional[np.ndarray] = None
    sample_grid: tuple = ()
    _facets: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def box(cls, lower, upper, grid=None) -> "ControlSet":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise StructureError("box bounds must be nonempty vectors of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise StructureError("control set must be bounded")
        if np.any(lo > hi):
            raise StructureError("box is empty: lower > upper")
        if grid is None:
            axes = [np.unique([l, 0.5 * (l + h), h]) for l, h in zip(lo, hi)]
            grid = [np.array(pt) for pt in itertools.product(*axes)]
        cs = cls("box", lower=lo, upper=hi, sample_grid=tuple(np.atleast_1d(np.asarray(g, float)) for g in grid))
        cs._check_grid()
        return cs

    @classmethod
    def polytope(cls, vertices, grid=None) -> "ControlSet":
        V = np.asarray(vertices, dtype=float)
        if V.ndim != 2 or V.shape[0] == 0:
            raise StructureError("polytope needs a nonempty (k, m) vertex array")
        if not np.all(np.isfinite(V)):
            raise StructureError("control set must be bounded")
        m = V.shape[1]
        if m == 1:
            return cls.box(V.min(axis=0), V.max(axis=0), grid)
        try:
            hull = ConvexHull(V)
        except QhullError as exc:
            raise StructureError(f"polytope vertices are degenerate: {exc}") from None
        V = V[hull.vertices]
        if grid is None:
            pts = [v for v in V] + [V.mean(axis=0)]
            pts += [0.5 * (V[i] + V[j]) for i, j in itertools.combinations(range(len(V)), 2)]
            grid = pts
        cs = cls("polytope", vertices=V, _facets=hull.equations,
                 sample_grid=tuple(np.atleast_1d(np.asarray(g, float)) for g in grid))
        cs._check_grid()
        return cs

    def _check_grid(self):
        for g in self.sample_grid:
            if g.shape != (self.dim,):
                raise StructureError(f"grid point {g} has wrong dimension")
        if self.sample_grid:
            d = self.violation(np.stack(self.sample_grid))
            if np.any(d > 1e-12):
                raise AdmissibilityError("sample grid point outside the control set")

    @property
    def dim(self) -> int:
        return int(self.lower.size if self.kind == "box" else self.vertices.shape[1])

    @property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "box":
            return self.lower, self.upper
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def violation(self, u) -> np.ndarray:
        """Nonnegative distance-like violation; zero inside the set.

        Exact Euclidean distance for boxes; the largest facet violation for
        polytopes (a lower bound on the distance).
        """
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            below = np.clip(self.lower - u, 0.0, None)
            above = np.clip(u - self.upper, 0.0, None)
            return np.sqrt(np.sum(below**2 + above**2, axis=-1))
        A, c = self._facets[:, :-1], self._facets[:, -1]
        return np.clip(np.max(u @ A.T + c, axis=-1), 0.0, None)

    def contains(self, u, atol: float = 1e-12):
        return self.violation(u) <= atol

    def random_points(self, rng: np.random.Generator, k: int) -> np.ndarray:
        if self.kind == "box":
            return self.lower + (self.upper - self.lower) * rng.random((k, self.dim))
        lam = rng.dirichlet(np.ones(len(self.vertices)), size=k)
        return lam @ self.vertices

    def to_dict(self) -> dict:
        if self.kind == "box":
            return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}
        return {"kind": "polytope", "vertices": self.vertices.tolist()}


# ---------------------------------------------------------------------------
# admissible controls


@dataclass(frozen=True, eq=False)
class AdmissibleControl:
    """Feedback-free control ``u(.)``.

    ``kind`` is ``"constant"`` (``value`` is a vector), ``"function"``
    (``value(t) -> (m,)``) or ``"process"``. A process is either an array of
    shape ``(P, N + 1, m)`` or a callable ``value(k, t_k, w_prefix)`` that
    receives the Brownian values at nodes ``0..k`` only, so the control at
    node ``k`` cannot look at later increments.
    """

    kind: str
    value: object

    @classmethod
    def constant(cls, value) -> "AdmissibleControl":
        return cls("constant", np.atleast_1d(np.asarray(value, dtype=float)))

    @classmethod
    def function(cls, fn) -> "AdmissibleControl":
        return cls("function", fn)

    @classmethod
    def process(cls, value) -> "AdmissibleControl":
        return cls("process", value)

    @property
    def deterministic(self) -> bool:
        return self.kind in ("constant", "function")

    def at(self, t: float) -> np.ndarray:
        """Value of a deterministic control at time ``t``."""
        if self.kind == "constant":
            return self.value
        if self.kind == "function":
            return np.atleast_1d(np.asarray(self.value(t), dtype=float))
        raise TypeError("process controls have no path-independent value")

    def sample(self, times: np.ndarray, W: np.ndarray, m: int) -> np.ndarray:
        """Control values on the grid, shape ``(P, N + 1, m)``.

        Deterministic controls come back as read-only broadcast views.
        """
        P, K = W.shape
        if self.kind == "constant":
            v = self.value
            if v.shape != (m,):
                raise StructureError(f"control has dimension {v.size}, expected {m}")
            return np.broadcast_to(v, (P, K, m))
        if self.kind == "function":
            vals = np.stack([self.at(t) for t in times])
            if vals.shape != (K, m):
                raise StructureError(f"control has shape {vals.shape[1:]}, expected ({m},)")
            return np.broadcast_to(vals, (P, K, m))
        if callable(self.value):
            out = np.empty((P, K, m))
            for k in range(K):
                out[:, k] = np.asarray(self.value(k, times[k], W[:, : k + 1]), dtype=float).reshape(P, m)
            return out
        arr = np.asarray(self.value, dtype=float)
        if arr.shape != (P, K, m):
            raise StructureError(f"control array has shape {arr.shape}, expected {(P, K, m)}")
        return arr


def check_admissible(values: np.ndarray, cset: ControlSet, atol: float = 1e-12) -> None:
    values = np.asarray(values)
    if values.ndim == 3 and values.strides[0] == 0:
        values = values[:1]
    for k in range(values.shape[1] if values.ndim == 3 else 1):
        block = values[:, k] if values.ndim == 3 else values.reshape(-1, values.shape[-1])
        viol = cset.violation(block)
        if np.any(viol > atol):
            idx = int(np.argmax(viol))
            raise AdmissibilityError(
                f"control value {block[idx]} leaves the control set (violation {viol[idx]:.3e})")


# ---------------------------------------------------------------------------
# problem


@dataclass(frozen=True)
class LQData:
    """Deterministic LQ coefficients as functions of time."""

    A: Callable
    B: Callable
    C: Callable
    D: Callable
    R: Callable
    M: Callable
    N: Callable
    G: np.ndarray


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Controlled SDE ``dx = b dt + sigma dW`` with cost ``E[int f dt + h(x(T))]``.

    Immutable; safe to share between workers.
    """

    state_dim: int
    control_dim: int
    horizon: float
    initial_state: np.ndarray
    b: Oracle
    b_x: Oracle
    b_u: Oracle
    b_xx: Oracle
    b_xu: Oracle
    b_uu: Oracle
    sigma: Oracle
    sigma_x: Oracle
    sigma_u: Oracle
    sigma_xx: Oracle
    sigma_xu: Oracle
    sigma_uu: Oracle
    f: Oracle
    f_x: Oracle
    f_u: Oracle
    f_xx: Oracle
    f_xu: Oracle
    f_uu: Oracle
    h: Oracle
    h_x: Oracle
    h_xx: Oracle
    control_set: ControlSet
    coefficient_class: str = "deterministic"
    lipschitz: Optional[float] = None
    name: str = "custom"
    lq: Optional[LQData] = None

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 1:
            raise StructureError("state and control dimensions must be positive")
        if self.horizon <= 0:
            raise StructureError("horizon must be positive")
        x0 = np.atleast_1d(np.asarray(self.initial_state, dtype=float))
        if x0.shape != (self.state_dim,):
            raise StructureError(f"initial state has shape {x0.shape}, expected ({self.state_dim},)")
        object.__setattr__(self, "initial_state", x0)
        if self.control_set.dim != self.control_dim:
            raise StructureError("control set dimension differs from control_dim")
        if self.coefficient_class not in ("deterministic", "random"):
            raise StructureError(f"unknown coefficient class {self.coefficient_class!r}")

    @property
    def n(self) -> int:
        return self.state_dim

    @property
    def m(self) -> int:
        return self.control_dim

    def expected_shape(self, name: str, P: int) -> tuple:
        n, m = self.n, self.m
        family, _, deriv = name.partition("_")
        if family in ("b", "sigma"):
            return (P, n) + {"": (), "x": (n,), "u": (m,), "xx": (n, n), "xu": (m, n), "uu": (m, m)}[deriv]
        if family in ("f", "h"):
            return (P,) + {"": (), "x": (n,), "u": (m,), "xx": (n, n), "xu": (m, n), "uu": (m, m)}[deriv]
        raise KeyError(name)

    def call(self, name: str, t, x, u, w=None) -> np.ndarray:
        """Evaluate one oracle on a batch with shape and finiteness checks."""
        x = np.atleast_2d(x)
        P = x.shape[0]
        if w is None:
            w = np.zeros(P)
        fn = getattr(self, name)
        out = fn(x, w) if name.startswith("h") else fn(t, x, u, w)
        out = np.asarray(out, dtype=float)
        want = self.expected_shape(name, P)
        if out.shape != want:
            if out.ndim == 0 or out.shape == want[1:]:
                out = np.broadcast_to(out, want).copy()
            else:
                raise StructureError(f"oracle {name} returned shape {out.shape}, expected {want}")
        if not np.all(np.isfinite(out)):
            bad = np.argwhere(~np.isfinite(out.reshape(P, -1)))[0][0]
            point = {"t": t, "x": x[bad].tolist()}
            if not name.startswith("h"):
                point["u"] = np.atleast_2d(u)[bad].tolist()
            raise OracleError(f"oracle {name} returned a non-finite value at {point}")
        return out


def _as_fn(mat, shape):
    if callable(mat):
        return mat
    arr = np.asarray(mat, dtype=float).reshape(shape)
    return lambda t, _a=arr: _a


def _check_symmetric(name, fn, T, tol=1e-12):
    for t in np.linspace(0.0, T, 5):
        a = np.asarray(fn(t))
        if a.shape[0] != a.shape[1] or np.max(np.abs(a - a.T), initial=0.0) > tol:
            raise StructureError(f"{name} must be symmetric")


def make_lq_problem(A, B, C, D, R, M, N, G, horizon=1.0, initial_state=None,
                    control_set: ControlSet | None = None, name="lq") -> ControlProblem:
    """Linear-quadratic problem with exact derivative oracles.

    ``b = Ax + Bu``, ``sigma = Cx + Du``,
    ``f = (x'Rx + 2u'Mx + u'Nu) / 2``, ``h = x'Gx / 2``.
    Matrices may be constants or callables of ``t``.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    n = G.shape[0]
    B0 = np.asarray(B(0.0) if callable(B) else B, dtype=float)
    B0 = B0.reshape(n, -1)
    m = B0.shape[1]
    A_, B_, C_, D_ = (_as_fn(A, (n, n)), _as_fn(B, (n, m)), _as_fn(C, (n, n)), _as_fn(D, (n, m)))
    R_, M_, N_ = _as_fn(R, (n, n)), _as_fn(M, (m, n)), _as_fn(N, (m, m))
    for nm, fn, shp in (("A", A_, (n, n)), ("B", B_, (n, m)), ("C", C_, (n, n)), ("D", D_, (n, m)),
                        ("R", R_, (n, n)), ("M", M_, (m, n)), ("N", N_, (m, m))):
        if np.shape(fn(0.0)) != shp:
            raise StructureError(f"{nm} has shape {np.shape(fn(0.0))}, expected {shp}")
    if G.shape != (n, n):
        raise StructureError("G must be square")
    _check_symmetric("R", R_, horizon)
    _check_symmetric("N", N_, horizon)
    _check_symmetric("G", lambda t: G, horizon)
    if control_set is None:
        control_set = ControlSet.box(-np.ones(m), np.ones(m))
    if initial_state is None:
        initial_state = np.zeros(n)

    def P_(x):
        return x.shape[0]

    def b(t, x, u, w):
        return x @ A_(t).T + u @ B_(t).T

    def sigma(t, x, u, w):
        return x @ C_(t).T + u @ D_(t).T

    def f(t, x, u, w):
        R, M, N = R_(t), M_(t), N_(t)
        return 0.5 * (np.einsum("pi,ij,pj->p", x, R, x) + 2 * np.einsum("pj,ji,pi->p", u, M, x)
                      + np.einsum("pi,ij,pj->p", u, N, u))

    def const(fn, shape):
        return lambda t, x, u, w: np.broadcast_to(fn(t), (P_(x),) + shape).copy()

    def zeros(shape):
        return lambda t, x, u, w: np.zeros((P_(x),) + shape)

    return ControlProblem(
        state_dim=n, control_dim=m, horizon=float(horizon), initial_state=initial_state,
        b=b, b_x=const(A_, (n, n)), b_u=const(B_, (n, m)),
        b_xx=zeros((n, n, n)), b_xu=zeros((n, m, n)), b_uu=zeros((n, m, m)),
        sigma=sigma, sigma_x=const(C_, (n, n)), sigma_u=const(D_, (n, m)),
        sigma_xx=zeros((n, n, n)), sigma_xu=zeros((n, m, n)), sigma_uu=zeros((n, m, m)),
        f=f,
        f_x=lambda t, x, u, w: x @ R_(t).T + u @ M_(t),
        f_u=lambda t, x, u, w: x @ M_(t).T + u @ N_(t).T,
        f_xx=const(R_, (n, n)), f_xu=const(M_, (m, n)), f_uu=const(N_, (m, m)),
        h=lambda x, w: 0.5 * np.einsum("pi,ij,pj->p", x, G, x),
        h_x=lambda x, w: x @ G.T,
        h_xx=lambda x, w: np.broadcast_to(G, (x.shape[0], n, n)).copy(),
        control_set=control_set, coefficient_class="deterministic", name=name,
        lq=LQData(A_, B_, C_, D_, R_, M_, N_, G),
    )


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    """Outcome of :func:`validate_problem`."""

    residuals: dict
    symmetry: dict
    bounds: dict
    set_checks: dict
    tolerance: float
    passed: bool

    def failures(self) -> list[str]:
        out = [f"residual {k}={v:.3e}" for k, v in self.residuals.items() if not v < self.tolerance]
        out += [f"asymmetric {k}={v:.3e}" for k, v in self.symmetry.items() if not v < self.tolerance]
        out += [f"bound {k}={v:.3e}" for k, v in self.bounds.items() if v > 0]
        out += [f"control set: {k}" for k, ok in self.set_checks.items() if not ok]
        return out


# (parent, derivative, variable) triples checked by central differences
_FD_PAIRS = []
for fam in ("b", "sigma", "f"):
    _FD_PAIRS += [(fam, f"{fam}_x", "x"), (fam, f"{fam}_u", "u"),
                  (f"{fam}_x", f"{fam}_xx", "x"), (f"{fam}_u", f"{fam}_xu", "x"),
                  (f"{fam}_u", f"{fam}_uu", "u")]
_FD_PAIRS += [("h", "h_x", "x"), ("h_x", "h_xx", "x")]

_SYMMETRIC = ("f_xx", "f_uu", "h_xx", "b_xx", "b_uu", "sigma_xx", "sigma_uu")


def _central_difference(p: ControlProblem, parent, var, t, x, u, w, step):
    """Jacobian of ``parent`` w.r.t. ``var``, derivative axis appended last."""
    base = x if var == "x" else u
    cols = []
    for i in range(base.shape[1]):
        e = np.zeros_like(base)
        e[:, i] = step
        if var == "x":
            hi, lo = p.call(parent, t, x + e, u, w), p.call(parent, t, x - e, u, w)
        else:
            hi, lo = p.call(parent, t, x, u + e, w), p.call(parent, t, x, u - e, w)
        cols.append((hi - lo) / (2 * step))
    return np.stack(cols, axis=-1)


def validate_problem(p: ControlProblem, probes: int = 16, step: float = 1e-5,
                     tol: float = 1e-6, seed: int = 0) -> ValidationReport:
    """Check oracle shapes, finite differences, symmetry and derivative bounds on probe points.

    Raises :class:`StructureError` on a dimension mismatch and
    :class:`OracleError` when an oracle returns NaN/inf.
    """
    rng = np.random.default_rng(seed)
    T = p.horizon
    t_probe = rng.uniform(0.0, T, probes)
    x_probe = p.initial_state + rng.standard_normal((probes, p.n))
    u_probe = p.control_set.random_points(rng, probes)
    w_probe = rng.standard_normal(probes) * np.sqrt(t_probe)

    residuals = {}
    symmetry = {}
    bounds = {}
    for k in range(probes):
        t = float(t_probe[k])
        x, u, w = x_probe[k:k + 1], u_probe[k:k + 1], w_probe[k:k + 1]
        values = {name: p.call(name, t, x, u, w) for name in ALL_ORACLES}
        for parent, deriv, var in _FD_PAIRS:
            fd = _central_difference(p, parent, var, t, x, u, w, step)
            an = values[deriv]
            err = float(np.max(np.abs(fd.reshape(an.shape) - an)) / max(1.0, float(np.max(np.abs(an)))))
            residuals[deriv] = max(residuals.get(deriv, 0.0), err)
        for name in _SYMMETRIC:
            a = values[name]
            defect = float(np.max(np.abs(a - np.swapaxes(a, -1, -2)), initial=0.0))
            symmetry[name] = max(symmetry.get(name, 0.0), defect)
        if p.lipschitz is not None:
            for name in ("b_x", "b_u", "sigma_x", "sigma_u", "b_xx", "b_xu", "b_uu",
                         "sigma_xx", "sigma_xu", "sigma_uu", "f_xx", "f_xu", "f_uu", "h_xx"):
                excess = float(np.sqrt(np.sum(values[name] ** 2)) - p.lipschitz)
                bounds[name] = max(bounds.get(name, 0.0), max(excess, 0.0))

    cs = p.control_set
    lo, hi = cs.bounding_box
    set_checks = {
        "nonempty": bool(np.all(lo <= hi)),
        "bounded": bool(np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))),
        "convex": cs.kind in ("box", "polytope"),
        "grid_inside": bool(all(cs.contains(g) for g in cs.sample_grid)),
    }
    passed = (all(v < tol for v in residuals.values()) and all(v < tol for v in symmetry.values())
              and all(v == 0 for v in bounds.values()) and all(set_checks.values()))
    return ValidationReport(residuals, symmetry, bounds, set_checks, tol, passed)
