"""First- and second-order necessary conditions along a reference control.

Every test produces a :class:`ConditionReport`: a table of cells indexed by
``(tau, v)`` with a Monte Carlo mean, its standard error and a verdict.
A cell is *violated* when its value exceeds ``max(k * stderr, atol)``,
*satisfied* when the value is at most ``atol`` and *inconclusive* otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adjoint import _uses_w, solve_adjoints
from .errors import ConfigError, DomainError
from .forward import (FundamentalMatrixPath, PathBundle, PerturbationSpec, TimeGrid, cost_samples,
                      integrate_state, simulate_state, simulate_variational)
from .hamiltonian import KernelFrame, SingularityReport, build_kernel_frames
from .malliavin import LadderTrace, MalliavinPlugin, martingale_representation
from .norms import mean_and_stderr, time_integral
from .problem import AdmissibleControl, ControlProblem, check_admissible

SATISFIED, VIOLATED, INCONCLUSIVE = "satisfied", "violated", "inconclusive"
NOT_APPLICABLE = "not applicable"


def classify(value: float, stderr: float, k: float = 3.0, atol: float = 1e-12) -> str:
    if not np.isfinite(value):
        return INCONCLUSIVE
    se = stderr if np.isfinite(stderr) else 0.0
    if value > max(k * se, atol):
        return VIOLATED
    if value <= atol:
        return SATISFIED
    return INCONCLUSIVE


def _num(x):
    x = float(x)
    return x if np.isfinite(x) else None


@dataclass
class ConditionCell:
    tau: Optional[float]
    v: object
    value: float
    stderr: float
    verdict: str
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"tau": None if self.tau is None else float(self.tau), "v": self.v,
             "value": _num(self.value), "stderr": _num(self.stderr), "verdict": self.verdict}
        if self.extra:
            d["extra"] = self.extra
        return d


@dataclass
class ConditionReport:
    condition: str
    cells: list
    config_echo: dict = field(default_factory=dict)
    applicable: bool = True
    note: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def global_verdict(self) -> str:
        if not self.applicable:
            return NOT_APPLICABLE
        verdicts = {c.verdict for c in self.cells}
        if VIOLATED in verdicts:
            return VIOLATED
        if INCONCLUSIVE in verdicts:
            return INCONCLUSIVE
        return SATISFIED

    def cell(self, tau=None, v=None) -> ConditionCell:
        """First cell matching ``tau`` and ``v`` (either may be omitted)."""
        for c in self.cells:
            if tau is not None and (c.tau is None or abs(c.tau - tau) > 1e-12):
                continue
            if v is not None and not np.allclose(np.atleast_1d(c.v), np.atleast_1d(v)):
                continue
            return c
        raise KeyError((tau, v))

    def to_dict(self) -> dict:
        taus = sorted({c.tau for c in self.cells if c.tau is not None})
        vs = []
        for c in self.cells:
            if c.v not in vs:
                vs.append(c.v)
        return {"condition": self.condition, "grid": {"tau": taus, "v": vs},
                "cells": [c.to_dict() for c in self.cells], "global_verdict": self.global_verdict,
                "applicable": self.applicable, "note": self.note, "diagnostics": self.diagnostics,
                "config_echo": self.config_echo}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# grids


def theta_ladder(theta0: float, rungs: int = 9) -> np.ndarray:
    """Geometric ladder ``theta0 * 2**-k``, ``k = 0 .. rungs-1``."""
    if theta0 <= 0 or rungs < 1:
        raise ConfigError("theta ladder needs theta0 > 0 and at least one rung")
    return theta0 * 2.0 ** -np.arange(rungs)


def snap_ladder(thetas, dt: float) -> np.ndarray:
    """Window lengths in grid steps, at least two steps each."""
    return np.array([max(2, int(round(t / dt))) for t in np.atleast_1d(thetas)])


def default_tau_grid(grid: TimeGrid, theta_max: float, count: int = 5) -> np.ndarray:
    """Grid nodes in ``[0, T - theta_max]`` (``count`` of them, evenly spread)."""
    last = grid.steps - max(2, int(round(theta_max / grid.dt)))
    if last < 0:
        raise DomainError(f"theta {theta_max} does not fit in [0, {grid.horizon}]")
    nodes = np.unique(np.round(np.linspace(0, last, count)).astype(int))
    return nodes * grid.dt


def default_v_grid(p: ControlProblem, frames: Optional[KernelFrame] = None, node: int = 0) -> list:
    """Control-set sample grid, plus ``ubar(tau)`` when it is path-constant."""
    pts = [np.asarray(g, float) for g in p.control_set.sample_grid]
    if frames is not None:
        u = np.asarray(frames.ubar[:, node])
        if np.all(u == u[:1]) and not any(np.allclose(u[0], g) for g in pts):
            pts.append(u[0].copy())
    return pts


def _node(frames: KernelFrame, tau: float) -> int:
    i = int(round(tau / frames.dt))
    if i < 0 or i >= len(frames.times):
        raise DomainError(f"tau = {tau} lies outside the grid")
    return i


def _diff(v, frames: KernelFrame, i: int) -> np.ndarray:
    """``v - ubar(t_i)`` per path, shape ``(P, m)``."""
    return np.atleast_1d(np.asarray(v, float))[None] - np.asarray(frames.ubar[:, i])


def _first_term(frames: KernelFrame, i: int, d: np.ndarray) -> np.ndarray:
    """Pathwise ``<S b_u d, d>`` at node ``i``."""
    sb = np.asarray(frames.S[:, i]) @ np.asarray(frames.b_u[:, i])
    return np.einsum("pa,pab,pb->p", d, sb, d)


# ---------------------------------------------------------------------------
# cost expansion


@dataclass
class ExpansionReport:
    eps: np.ndarray
    delta_J: np.ndarray
    delta_J_stderr: np.ndarray
    prediction: np.ndarray
    residual: np.ndarray  # (Delta J - prediction) / eps^2
    residual_stderr: np.ndarray

    @property
    def decreasing(self) -> bool:
        """``|residual|`` does not increase along the ladder beyond three standard errors."""
        r, s = np.abs(self.residual), self.residual_stderr
        return bool(np.all(r[1:] <= r[:-1] + 3 * np.hypot(s[1:], s[:-1]) + 1e-12))

    def to_dict(self) -> dict:
        return {"eps": self.eps.tolist(), "delta_J": self.delta_J.tolist(),
                "delta_J_stderr": self.delta_J_stderr.tolist(), "prediction": self.prediction.tolist(),
                "residual_over_eps2": self.residual.tolist(), "residual_stderr": self.residual_stderr.tolist(),
                "decreasing": self.decreasing}


def expansion_terms(p: ControlProblem, bundle: PathBundle, frames: KernelFrame, v: np.ndarray):
    """Pathwise first- and second-order coefficients of the cost expansion.

    ``Delta J(eps) ~ -(eps * a + eps^2 * b)`` with
    ``a = int <H_u, v>`` and
    ``b = int [<H_uu v, v>/2 + <sigma_u' P2 sigma_u v, v>/2 + <S y1, v>]``.
    """
    y1 = simulate_variational(p, bundle, PerturbationSpec(), second_order=False, v=v).y1
    Hu, Huu, sPs, S = (np.asarray(a) for a in (frames.H_u, frames.H_uu, frames.sigma_u_P2_sigma_u, frames.S))
    a = time_integral(np.einsum("pkm,pkm->pk", Hu, v), frames.dt)
    second = (0.5 * np.einsum("pka,pkab,pkb->pk", v, Huu + sPs, v)
              + np.einsum("pka,pkan,pkn->pk", v, S, y1))
    b = time_integral(second, frames.dt)
    return a, b


def cost_expansion_check(p: ControlProblem, ubar: AdmissibleControl, pert: PerturbationSpec,
                         eps_ladder: Sequence[float], grid: TimeGrid, paths: int, seed: int,
                         method: str = "auto", degree: int = 2) -> ExpansionReport:
    """Direct ``Delta J(eps) = J(ubar + eps v) - J(ubar)`` against the second-order prediction.

    All rungs share the Brownian increments of the reference run.
    """
    eps = np.asarray(eps_ladder, dtype=float)
    if eps.size < 1 or np.any(eps <= 0):
        raise ConfigError("eps ladder must be positive")
    bundle = simulate_state(p, ubar, grid, paths, seed)
    J0 = cost_samples(p, bundle)
    adj = solve_adjoints(p, bundle, method=method, degree=degree, ubar=ubar)
    frames = build_kernel_frames(p, bundle, adj)
    v = pert.sample(bundle, p.m)
    a, b = expansion_terms(p, bundle, frames, v)
    out = {k: [] for k in ("dj", "dj_se", "pred", "res", "res_se")}
    for e in eps:
        controls = bundle.control + e * v
        check_admissible(controls, p.control_set)
        moved = integrate_state(p, grid, bundle.dW, bundle.W, controls, seed)
        dj = cost_samples(p, moved) - J0
        pred = -(e * a + e**2 * b)
        m_dj, s_dj = mean_and_stderr(dj)
        m_r, s_r = mean_and_stderr((dj - pred) / e**2)
        out["dj"].append(m_dj)
        out["dj_se"].append(s_dj)
        out["pred"].append(float(np.mean(pred)))
        out["res"].append(m_r)
        out["res_se"].append(s_r)
    return ExpansionReport(eps, *(np.array(out[k]) for k in ("dj", "dj_se", "pred", "res", "res_se")))


# ---------------------------------------------------------------------------
# integral-type and quadratic-form tests


def _describe(pert: PerturbationSpec):
    if pert.mode == "needle":
        return {"needle": {"tau": pert.tau, "theta": pert.theta, "point": np.asarray(pert.point).tolist()}}
    d = pert.direction
    if d is not None and d.kind == "constant":
        return np.atleast_1d(np.asarray(d.value, float)).tolist()
    return "target" if pert.target is not None else "process"


def integral_type_test(p: ControlProblem, bundle: PathBundle, frames: KernelFrame, pert: PerturbationSpec,
                       singularity: Optional[SingularityReport] = None, k: float = 3.0,
                       atol: float = 1e-12) -> ConditionReport:
    """``E int <S y1, v> dt`` for the direction ``v`` of ``pert`` (trapezoid in time)."""
    if singularity is not None and not singularity.singular:
        return ConditionReport("integral", [], applicable=False,
                               note="reference control is not singular; test not applicable",
                               diagnostics={"singularity": singularity.to_dict()})
    v = pert.sample(bundle, p.m)
    y1 = simulate_variational(p, bundle, pert, second_order=False, v=v).y1
    integrand = np.einsum("pka,pkan,pkn->pk", v, np.asarray(frames.S), y1)
    value, se = mean_and_stderr(time_integral(integrand, frames.dt))
    cell = ConditionCell(None, _describe(pert), value, se, classify(value, se, k, atol))
    diag = {"singularity": singularity.to_dict()} if singularity is not None else {}
    return ConditionReport("integral", [cell], diagnostics=diag)


def bonnans_quadratic_form(p: ControlProblem, bundle: PathBundle, frames: KernelFrame, w) -> tuple[float, float]:
    """``E int [<H_xx y,y> + 2<H_xu y,w> + <H_uu w,w>] dt + E<h_xx y(T), y(T)>``; returns ``(mean, stderr)``.

    ``w`` is a :class:`PerturbationSpec` or sampled values ``(P, N+1, m)``;
    ``y`` is the first variational process driven by ``w``.
    """
    if isinstance(w, PerturbationSpec):
        wv = w.sample(bundle, p.m)
    else:
        wv = np.broadcast_to(np.asarray(w, float), bundle.control.shape)
    y = simulate_variational(p, bundle, PerturbationSpec(), second_order=False, v=wv).y1
    integrand = (np.einsum("pka,pkab,pkb->pk", y, np.asarray(frames.H_xx), y)
                 + 2 * np.einsum("pkm,pkmn,pkn->pk", wv, np.asarray(frames.H_xu), y)
                 + np.einsum("pka,pkab,pkb->pk", wv, np.asarray(frames.H_uu), wv))
    T = bundle.grid.horizon
    hxx = p.call("h_xx", T, bundle.state[:, -1], None, bundle.W[:, -1])
    samples = time_integral(integrand, frames.dt) + np.einsum("pa,pab,pb->p", y[:, -1], hxx, y[:, -1])
    return mean_and_stderr(samples)


# ---------------------------------------------------------------------------
# pointwise tests


def needle_first_order_test(frames: KernelFrame, tau_grid, v_grid, k: float = 3.0,
                            atol: float = 1e-12) -> ConditionReport:
    """``<H_u(tau), v - ubar(tau)>`` on the ``(tau, v)`` grid."""
    cells = []
    for tau in tau_grid:
        i = _node(frames, tau)
        hu = np.asarray(frames.H_u[:, i])
        for v in v_grid:
            val, se = mean_and_stderr(np.einsum("pm,pm->p", hu, _diff(v, frames, i)))
            cells.append(ConditionCell(float(tau), np.atleast_1d(v).tolist(), val, se, classify(val, se, k, atol)))
    return ConditionReport("first-order", cells)


@dataclass
class DplusResult:
    value: float
    stderr: float
    samples: np.ndarray  # per-path samples of twice the selected rung
    trace: LadderTrace
    rung: int


def dplus_estimate(frames: KernelFrame, fmp: Optional[FundamentalMatrixPath], kernel, tau: float, v,
                   theta_ladder, kernel_origin: int = 0, tail: int = 4) -> DplusResult:
    """Ladder surrogate for the doubled upper limit of window-normalised double integrals.

    For each rung ``theta`` the ratio is
    ``theta^-2 E int_tau^{tau+theta} int_tau^t <phi_v(s,t), Phi(tau) Psi(s) sigma_u(s)(v - ubar(s))> ds dt``
    with a left-point cell sum in ``s`` and the trapezoid rule in ``t``.
    ``kernel`` holds ``phi_v`` for ``phi = S'(v - ubar)``; its node 0 is the
    absolute node ``kernel_origin``. ``fmp=None`` stands for ``Phi = Psi = I``.
    The estimate is twice the largest mean among the last ``tail`` rungs.
    """
    dt = frames.dt
    i0 = _node(frames, tau)
    steps = snap_ladder(theta_ladder, dt)
    L0 = int(steps.max())
    a0, a1 = kernel.s_start + kernel_origin, kernel.t_end + kernel_origin
    if i0 < a0 or i0 + L0 > a1:
        raise DomainError(f"kernel nodes [{a0}, {a1}] do not cover the window [{i0}, {i0 + L0}]")
    P = frames.path_count
    col = np.zeros((P, L0 + 1))  # col[:, b] = sum_{j < b} <phi_v(s_j, t_b), g_j>
    if not kernel.is_zero():
        for a in range(L0):
            j = i0 + a
            d = _diff(v, frames, j)
            g = np.einsum("pnm,pm->pn", np.asarray(frames.sigma_u[:, j]), d)
            if fmp is not None:
                g = np.einsum("pab,pbc,pc->pa", fmp.phi[:, i0], fmp.phi_inv[:, j], g)
            vals = kernel.values(j - kernel_origin)[:, : L0 - a]
            col[:, a + 1:] += np.einsum("pln,pn->pl", vals, g)
    rows, samples = [], []
    for L in steps:
        w = np.ones(L + 1)
        w[0] = w[-1] = 0.5
        r = (col[:, : L + 1] @ w) * dt * dt / (L * dt) ** 2
        samples.append(r)
        rows.append(mean_and_stderr(r))
    means = np.array([m for m, _ in rows])
    ses = np.array([s for _, s in rows])
    lo = max(0, len(steps) - tail)
    best = lo + int(np.argmax(means[lo:]))
    trace = LadderTrace(steps * dt, means, ses, label=f"dplus tau={float(tau)!r}")
    return DplusResult(2 * means[best], 2 * ses[best], 2 * samples[best], trace, best)


def _window_kernel(p: ControlProblem, bundle: PathBundle, frames: KernelFrame, v, i0: int, L0: int,
                   degree: int):
    sl = slice(i0, i0 + L0 + 1)
    d = np.atleast_1d(np.asarray(v, float)) - np.asarray(frames.ubar[:, sl])
    phi = np.einsum("pkmn,pkm->pkn", np.asarray(frames.S[:, sl]), d)
    return martingale_representation(phi, bundle.W[:, sl], bundle.dW[:, i0:i0 + L0], frames.dt,
                                     state=bundle.state[:, sl], degree=degree, label="S'(v - ubar)",
                                     include_w=_uses_w(p, bundle))


def pointwise_martingale_test(p: ControlProblem, bundle: PathBundle, frames: KernelFrame,
                              fmp: Optional[FundamentalMatrixPath], tau_grid, v_grid, theta_ladder,
                              degree: int = 2, k: float = 3.0, atol: float = 1e-12) -> ConditionReport:
    """``E<S b_u (v - ubar), v - ubar>(tau) + dplus`` on the ``(tau, v)`` grid."""
    L0 = int(snap_ladder(theta_ladder, frames.dt).max())
    cells, traces = [], {}
    for tau in tau_grid:
        i0 = _node(frames, tau)
        if i0 + L0 > bundle.grid.steps:
            raise DomainError(f"window at tau = {tau} leaves [0, {bundle.grid.horizon}]")
        for v in v_grid:
            first = _first_term(frames, i0, _diff(v, frames, i0))
            kern = _window_kernel(p, bundle, frames, v, i0, L0, degree)
            dp = dplus_estimate(frames, fmp, kern, tau, v, theta_ladder, kernel_origin=i0)
            val, se = mean_and_stderr(first + dp.samples)
            vl = np.atleast_1d(v).tolist()
            cells.append(ConditionCell(float(tau), vl, val, se, classify(val, se, k, atol),
                                       {"first": float(first.mean()), "dplus": float(dp.value),
                                        "dplus_stderr": float(dp.stderr), "kernel_zero": bool(kern.is_zero())}))
            traces[f"tau={float(tau)!r} v={vl}"] = dp.trace.rows()
    return ConditionReport("martingale", cells, diagnostics={"dplus_traces": traces})


def pointwise_malliavin_test(p: ControlProblem, bundle: PathBundle, frames: KernelFrame, tau_grid, v_grid,
                             s_plugin: Optional[MalliavinPlugin] = None,
                             u_plugin: Optional[MalliavinPlugin] = None, k: float = 3.0, atol: float = 1e-12,
                             quantiles=(0.01, 0.5, 0.99)) -> ConditionReport:
    """Pathwise ``<S b_u d, d> + <nabla S sigma_u d, d> - <S sigma_u d, nabla ubar>``, ``d = v - ubar(tau)``.

    Needs diagonal Malliavin derivatives of ``S`` and ``ubar`` through plug-ins.
    """
    if s_plugin is None or u_plugin is None:
        missing = [nm for nm, pl in (("S", s_plugin), ("ubar", u_plugin)) if pl is None]
        raise ConfigError(f"diagonal Malliavin derivatives are required (C3); missing plug-in for "
                          f"{' and '.join(missing)}")
    cells = []
    for tau in tau_grid:
        i = _node(frames, tau)
        w = bundle.W[:, i]
        nS = s_plugin.nabla(float(tau), w).reshape(w.shape[0], p.m, p.n)
        nu = u_plugin.nabla(float(tau), w).reshape(w.shape[0], p.m)
        S, su = np.asarray(frames.S[:, i]), np.asarray(frames.sigma_u[:, i])
        for v in v_grid:
            d = _diff(v, frames, i)
            sd = np.einsum("pnm,pm->pn", su, d)
            samples = (_first_term(frames, i, d) + np.einsum("pmn,pn,pm->p", nS, sd, d)
                       - np.einsum("pmn,pn,pm->p", S, sd, nu))
            val, se = mean_and_stderr(samples)
            extra = {"quantiles": {repr(q): float(np.quantile(samples, q)) for q in quantiles},
                     "fraction_positive": float(np.mean(samples > atol))}
            cells.append(ConditionCell(float(tau), np.atleast_1d(v).tolist(), val, se,
                                       classify(val, se, k, atol), extra))
    return ConditionReport("malliavin", cells)


def needle_cross_term(p: ControlProblem, bundle: PathBundle, frames: KernelFrame, fmp: FundamentalMatrixPath,
                      tau: float, v, theta_ladder) -> LadderTrace:
    """Ratio ``C(theta) / theta^(3/2)`` along the ladder, where

    ``C(theta) = E int_tau^{tau+theta} <S(t) Phi(t) int_tau^t Psi sigma_u (v - ubar) dW, v - ubar(t)> dt``.

    ``Phi(t)' S(t)' (v - ubar(t))`` is centred at its value at ``tau``; the
    subtracted part has zero mean and only adds noise.
    """
    dt = frames.dt
    i0 = _node(frames, tau)
    steps = snap_ladder(theta_ladder, dt)
    L0 = int(steps.max())
    if i0 + L0 > bundle.grid.steps:
        raise DomainError(f"window at tau = {tau} leaves [0, {bundle.grid.horizon}]")
    P = frames.path_count

    def A(i):
        d = _diff(v, frames, i)
        return np.einsum("pba,pmb,pm->pa", fmp.phi[:, i], np.asarray(frames.S[:, i]), d)

    a0 = A(i0)
    acc = np.zeros((P, p.n))
    integrand = np.zeros((P, L0 + 1))
    for b in range(1, L0 + 1):
        j = i0 + b - 1
        g = np.einsum("pnm,pm->pn", np.asarray(frames.sigma_u[:, j]), _diff(v, frames, j))
        acc = acc + np.einsum("pab,pb->pa", fmp.phi_inv[:, j], g) * bundle.dW[:, j:j + 1]
        integrand[:, b] = np.einsum("pa,pa->p", A(i0 + b) - a0, acc)
    est, err = [], []
    for L in steps:
        c = time_integral(integrand[:, : L + 1], dt) / (L * dt) ** 1.5
        m, s = mean_and_stderr(c)
        est.append(m)
        err.append(s)
    return LadderTrace(steps * dt, np.array(est), np.array(err), label=f"cross term tau={float(tau)!r}")
