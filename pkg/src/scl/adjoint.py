"""First- and second-order adjoint equations.

Two solution routes:

* ``analytic``: linear-quadratic problems with a deterministic reference
  control. The second adjoint is the deterministic Riccati-type solution
  ``K`` and the first adjoint is affine in the state, ``P1 = K xbar + k``.
* ``regression``: one backward sweep of least-squares projections on a
  polynomial basis of the state (and the Brownian value when coefficients
  or the reference control are random).
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .forward import PathBundle, VariationalPaths
from .problem import AdmissibleControl, ControlProblem
from .regression import PolynomialBasis


@dataclass(eq=False)
class AdjointSolution:
    """Sampled ``(P1, Q1)`` and ``(P2, Q2)``.

    ``p1`` is ``(P, N+1, n)``, ``q1`` is ``(P, N, n)``, ``p2`` is
    ``(P, N+1, n, n)`` and ``q2`` is ``(P, N, n, n)``. Path-independent
    arrays from the analytic route are read-only broadcast views.
    """

    p1: np.ndarray
    q1: np.ndarray
    p2: np.ndarray
    q2: np.ndarray
    method: str
    times: np.ndarray
    basis_spec: Optional[dict] = None
    asymmetry: float = 0.0

    def to_csv(self, path) -> None:
        """One row per node: ``t`` then mean and std of every component."""
        n = self.p1.shape[2]
        N = self.q1.shape[1]
        cols = ["t"]
        blocks = []
        for name, arr, trailing in (("P1", self.p1, [(i,) for i in range(n)]),
                                    ("Q1", self.q1, [(i,) for i in range(n)]),
                                    ("P2", self.p2, list(itertools.product(range(n), repeat=2))),
                                    ("Q2", self.q2, list(itertools.product(range(n), repeat=2)))):
            for idx in trailing:
                label = name + "_" + "".join(str(i) for i in idx)
                cols += [label + "_mean", label + "_std"]
                comp = arr[(slice(None), slice(None)) + idx]
                mean, std = comp.mean(axis=0), comp.std(axis=0)
                if comp.shape[1] == N:
                    mean, std = np.append(mean, np.nan), np.append(std, np.nan)
                blocks += [mean, std]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for k, t in enumerate(self.times):
                w.writerow([repr(float(t))] + [repr(float(b[k])) for b in blocks])


# ---------------------------------------------------------------------------
# analytic route


def _is_deterministic_control(bundle: PathBundle) -> bool:
    c = bundle.control
    return bool(np.all(c == c[:1]))


def _control_fn(bundle: PathBundle, ubar: Optional[AdmissibleControl]):
    if ubar is not None and ubar.deterministic:
        return ubar.at
    nodes = bundle.control[0]
    times = bundle.grid.times

    def interp(t):
        return np.array([np.interp(t, times, nodes[:, j]) for j in range(nodes.shape[1])])
    return interp


def _rk4_backward(rhs, terminal, grid, substeps):
    """Integrate ``y' = rhs(t, y)`` from ``T`` down to 0; values on grid nodes."""
    N = grid.steps
    out = np.empty((N + 1,) + np.shape(terminal))
    y = np.array(terminal, dtype=float)
    out[N] = y
    h = -grid.dt / substeps
    for k in range(N, 0, -1):
        t = k * grid.dt
        for _ in range(substeps):
            k1 = rhs(t, y)
            k2 = rhs(t + h / 2, y + h / 2 * k1)
            k3 = rhs(t + h / 2, y + h / 2 * k2)
            k4 = rhs(t + h, y + h * k3)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        out[k - 1] = y
    return out


def solve_lq_riccati(p: ControlProblem, grid, substeps: int = 4):
    """Deterministic second adjoint of an LQ problem on the grid nodes.

    ``K' = -A'K - KA - C'KC + R`` with ``K(T) = -G`` by classical RK4,
    ``substeps`` RK4 steps per grid step. Returns ``(K, asymmetry)`` where
    ``K`` has shape ``(N+1, n, n)`` and has been symmetrised.
    """
    lq = p.lq
    if lq is None:
        raise ConfigError("Riccati route needs a problem built by make_lq_problem")
    if substeps < 1:
        raise ConfigError("substeps must be positive")

    def rhs(t, K):
        A, C, R = lq.A(t), lq.C(t), lq.R(t)
        return -A.T @ K - K @ A - C.T @ K @ C + R

    K = _rk4_backward(rhs, -lq.G, grid, substeps)
    asym = float(np.max(np.abs(K - np.swapaxes(K, 1, 2))))
    return 0.5 * (K + np.swapaxes(K, 1, 2)), asym


def _analytic(p: ControlProblem, bundle: PathBundle, ubar, substeps: int) -> AdjointSolution:
    lq = p.lq
    g = bundle.grid
    K, asym = solve_lq_riccati(p, g, substeps)
    u_of = _control_fn(bundle, ubar)
    n = p.n

    # the offset k needs K between nodes, so both are integrated jointly

    def rhs(t, y):
        Kt, kt = y[:n * n].reshape(n, n), y[n * n:]
        A, B, C, D, R, M = lq.A(t), lq.B(t), lq.C(t), lq.D(t), lq.R(t), lq.M(t)
        dK = -A.T @ Kt - Kt @ A - C.T @ Kt @ C + R
        dk = -A.T @ kt - (Kt @ B + C.T @ Kt @ D - M.T) @ u_of(t)
        return np.concatenate([dK.ravel(), dk])

    joint = _rk4_backward(rhs, np.concatenate([-lq.G.ravel(), np.zeros(n)]), g, substeps)
    koff = joint[:, n * n:]
    x = bundle.state
    P, N = bundle.path_count, g.steps
    p1 = np.empty((P, N + 1, n))
    q1 = np.empty((P, N, n))
    for j, t in enumerate(g.times):
        p1[:, j] = x[:, j] @ K[j].T + koff[j]
        if j < N:
            sig = x[:, j] @ lq.C(t).T + bundle.control[:, j] @ lq.D(t).T
            q1[:, j] = sig @ K[j].T
    p2 = np.broadcast_to(K, (P,) + K.shape)
    q2 = np.broadcast_to(np.zeros((n, n)), (P, g.steps, n, n))
    # terminal values exactly -h_x, -h_xx
    p1[:, -1] = -p.call("h_x", g.horizon, x[:, -1], None, bundle.W[:, -1])
    return AdjointSolution(p1, q1, p2, q2, "analytic", g.times, None, asym)


# ---------------------------------------------------------------------------
# regression route


def _features(p: ControlProblem, bundle: PathBundle, k: int, use_w: bool) -> np.ndarray:
    x = bundle.state[:, k]
    if use_w:
        return np.column_stack([x, bundle.W[:, k]])
    return x


def _oracles(p, bundle, k, names):
    t = bundle.grid.times[k]
    return [p.call(nm, t, bundle.state[:, k], bundle.control[:, k], bundle.W[:, k]) for nm in names]


def _uses_w(p: ControlProblem, bundle: PathBundle) -> bool:
    return p.coefficient_class == "random" or not _is_deterministic_control(bundle)


def _regression_first(p, bundle, degree):
    g = bundle.grid
    P, N, n = bundle.path_count, g.steps, p.n
    use_w = _uses_w(p, bundle)
    p1 = np.empty((P, N + 1, n))
    q1 = np.empty((P, N, n))
    p1[:, N] = -p.call("h_x", g.horizon, bundle.state[:, N], None, bundle.W[:, N])
    dt = g.dt
    cols = []
    for k in range(N - 1, -1, -1):
        basis = PolynomialBasis(_features(p, bundle, k, use_w), degree)
        cols.append(basis.columns)
        nxt = p1[:, k + 1]
        yhat = basis.project(nxt)
        q = basis.project((nxt - yhat) * bundle.dW[:, k:k + 1]) / dt
        bx, sx, fx = _oracles(p, bundle, k, ("b_x", "sigma_x", "f_x"))
        hx = np.einsum("pki,pk->pi", bx, yhat) + np.einsum("pki,pk->pi", sx, q) - fx
        p1[:, k] = yhat + hx * dt
        q1[:, k] = q
    spec = {"degree": degree, "features": "x" + ("+W" if use_w else ""), "max_columns": int(max(cols))}
    return p1, q1, spec


def _regression_second(p, bundle, p1, q1, degree):
    g = bundle.grid
    P, N, n = bundle.path_count, g.steps, p.n
    use_w = _uses_w(p, bundle)
    p2 = np.empty((P, N + 1, n, n))
    q2 = np.empty((P, N, n, n))
    p2[:, N] = -p.call("h_xx", g.horizon, bundle.state[:, N], None, bundle.W[:, N])
    dt = g.dt
    asym = 0.0
    for k in range(N - 1, -1, -1):
        basis = PolynomialBasis(_features(p, bundle, k, use_w), degree)
        nxt = p2[:, k + 1]
        yhat = basis.project(nxt)
        q = basis.project((nxt - yhat) * bundle.dW[:, k][:, None, None]) / dt
        asym = max(asym, float(np.max(np.abs(q - np.swapaxes(q, 1, 2)), initial=0.0)))
        q = 0.5 * (q + np.swapaxes(q, 1, 2))
        bx, sx, bxx, sxx, fxx = _oracles(p, bundle, k, ("b_x", "sigma_x", "b_xx", "sigma_xx", "f_xx"))
        hxx = np.einsum("pk,pkij->pij", p1[:, k], bxx) + np.einsum("pk,pkij->pij", q1[:, k], sxx) - fxx
        sxT = np.swapaxes(sx, 1, 2)
        drift = (np.swapaxes(bx, 1, 2) @ yhat + yhat @ bx + sxT @ yhat @ sx + sxT @ q + q @ sx + hxx)
        new = yhat + drift * dt
        asym = max(asym, float(np.max(np.abs(new - np.swapaxes(new, 1, 2)), initial=0.0)))
        p2[:, k] = 0.5 * (new + np.swapaxes(new, 1, 2))
        q2[:, k] = q
    return p2, q2, asym


def _choose(p, bundle, method):
    if method not in ("auto", "analytic", "regression"):
        raise ConfigError(f"unknown adjoint method {method!r}")
    analytic_ok = p.lq is not None and _is_deterministic_control(bundle)
    if method == "analytic" and not analytic_ok:
        raise ConfigError("analytic adjoints need an LQ problem and a deterministic reference control")
    if method == "auto":
        return "analytic" if analytic_ok else "regression"
    return method


def solve_first_adjoint(p: ControlProblem, bundle: PathBundle, method: str = "auto", degree: int = 2,
                        ubar: Optional[AdmissibleControl] = None, substeps: int = 4):
    """``(P1, Q1)`` along the reference bundle. Returns ``(p1, q1)``."""
    if _choose(p, bundle, method) == "analytic":
        sol = _analytic(p, bundle, ubar, substeps)
        return sol.p1, sol.q1
    p1, q1, _ = _regression_first(p, bundle, degree)
    return p1, q1


def solve_second_adjoint(p: ControlProblem, bundle: PathBundle, first, method: str = "auto",
                         degree: int = 2, substeps: int = 4):
    """``(P2, Q2)`` given the first adjoint ``first = (p1, q1)``. Returns ``(p2, q2, asymmetry)``."""
    if _choose(p, bundle, method) == "analytic":
        K, asym = solve_lq_riccati(p, bundle.grid, substeps)
        P, N, n = bundle.path_count, bundle.grid.steps, p.n
        return (np.broadcast_to(K, (P,) + K.shape), np.broadcast_to(np.zeros((n, n)), (P, N, n, n)), asym)
    return _regression_second(p, bundle, first[0], first[1], degree)


def solve_adjoints(p: ControlProblem, bundle: PathBundle, method: str = "auto", degree: int = 2,
                   ubar: Optional[AdmissibleControl] = None, substeps: int = 4) -> AdjointSolution:
    """Both adjoint pairs in one call."""
    chosen = _choose(p, bundle, method)
    if chosen == "analytic":
        return _analytic(p, bundle, ubar, substeps)
    p1, q1, spec = _regression_first(p, bundle, degree)
    p2, q2, asym = _regression_second(p, bundle, p1, q1, degree)
    return AdjointSolution(p1, q1, p2, q2, "regression", bundle.grid.times, spec, asym)


# ---------------------------------------------------------------------------
# duality identities


@dataclass
class DualityResidual:
    name: str
    residual: float
    stderr: float
    bias_allowance: float
    k: float = 3.0

    @property
    def passed(self) -> bool:
        return self.residual <= self.k * self.stderr + self.bias_allowance

    def to_dict(self) -> dict:
        return {"name": self.name, "residual": self.residual, "stderr": self.stderr,
                "bias_allowance": self.bias_allowance, "passed": self.passed}


def adjoint_duality_check(p: ControlProblem, bundle: PathBundle, adj: AdjointSolution,
                          var: VariationalPaths, k: float = 3.0, bias_factor: float = 1.0) -> dict:
    """Monte Carlo residuals of the three Ito duality identities.

    For each identity the per-path sample ``terminal + int integrand dt``
    has mean zero in continuous time. The residual is ``|sample mean|``;
    it passes when below ``k * stderr`` plus an O(dt) allowance equal to
    ``bias_factor * dt * E[|terminal| + int |integrand| dt]``.
    """
    g = bundle.grid
    N, dt = g.steps, g.dt
    xT, wT = bundle.state[:, N], bundle.W[:, N]
    y1, v = var.y1, var.v
    hx = p.call("h_x", g.horizon, xT, None, wT)
    hxx = p.call("h_xx", g.horizon, xT, None, wT)
    # running sums of the integrands (and of their magnitudes for the bias allowance)
    sums = {name: np.zeros(bundle.path_count) for name in ("first", "second", "quadratic")}
    mags = {name: np.zeros(bundle.path_count) for name in sums}

    def add(name, integrand):
        sums[name] += dt * integrand
        mags[name] += dt * np.abs(integrand)

    for j in range(N):
        bu, su, sx, fx, bxx, bxu, buu, sxx, sxu, suu, fxx = _oracles(
            p, bundle, j, ("b_u", "sigma_u", "sigma_x", "f_x", "b_xx", "b_xu", "b_uu",
                           "sigma_xx", "sigma_xu", "sigma_uu", "f_xx"))
        a, vj = y1[:, j], v[:, j]
        P1, Q1 = adj.p1[:, j], adj.q1[:, j]
        P2, Q2 = adj.p2[:, j], adj.q2[:, j]
        buv = np.einsum("pij,pj->pi", bu, vj)
        suv = np.einsum("pij,pj->pi", su, vj)
        add("first", np.einsum("pi,pi->p", fx, a) + np.einsum("pi,pi->p", P1, buv)
            + np.einsum("pi,pi->p", Q1, suv))
        if var.y2 is not None:
            c = var.y2[:, j]
            qb = (np.einsum("pkab,pa,pb->pk", bxx, a, a) + 2 * np.einsum("pkab,pa,pb->pk", bxu, vj, a)
                  + np.einsum("pkab,pa,pb->pk", buu, vj, vj))
            qs = (np.einsum("pkab,pa,pb->pk", sxx, a, a) + 2 * np.einsum("pkab,pa,pb->pk", sxu, vj, a)
                  + np.einsum("pkab,pa,pb->pk", suu, vj, vj))
            add("second", np.einsum("pi,pi->p", fx, c) + np.einsum("pi,pi->p", P1, qb)
                + np.einsum("pi,pi->p", Q1, qs))
        hxx_j = (np.einsum("pk,pkij->pij", P1, bxx) + np.einsum("pk,pkij->pij", Q1, sxx) - fxx)
        P2a = np.einsum("pij,pj->pi", P2, a)
        add("quadratic",
            -np.einsum("pi,pij,pj->p", a, hxx_j, a) + 2 * np.einsum("pi,pi->p", P2a, buv)
            + 2 * np.einsum("pi,pi->p", np.einsum("pij,pj->pi", P2, np.einsum("pij,pj->pi", sx, a)), suv)
            + np.einsum("pi,pij,pj->p", suv, P2, suv)
            + 2 * np.einsum("pi,pi->p", np.einsum("pij,pj->pi", Q2, a), suv))
    terminals = {
        "first": np.einsum("pi,pi->p", hx, y1[:, N]),
        "second": np.einsum("pi,pi->p", hx, var.y2[:, N]) if var.y2 is not None else None,
        "quadratic": np.einsum("pi,pij,pj->p", y1[:, N], hxx, y1[:, N]),
    }
    out = {}
    for name, term in terminals.items():
        if term is None:
            continue
        sample = term + sums[name]
        P = sample.shape[0]
        stderr = float(np.std(sample, ddof=1) / np.sqrt(P))
        scale = float(np.mean(np.abs(term) + mags[name]))
        out[name] = DualityResidual(name, float(abs(sample.mean())), stderr, bias_factor * dt * scale, k)
    return out
