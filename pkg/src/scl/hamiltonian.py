"""Hamiltonian, the H-function of the maximum principle, the S kernel and the
classical singularity test.

With ``H(t, x, u, y, z) = <y, b> + <z, sigma> - f`` the frames hold, per path
and node, ``H_u``, ``H_uu``, ``H_xx``, ``H_xu`` and
``S = H_xu + b_u' P2 + sigma_u' Q2 + sigma_u' P2 sigma_x`` along the
reference pair.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .adjoint import AdjointSolution
from .errors import DomainError
from .forward import PathBundle
from .norms import time_integral
from .problem import ControlProblem


def _batch(a, trailing):
    a = np.asarray(a, dtype=float)
    return a[None] if a.ndim == trailing else a


def _check_domain(p: ControlProblem, u: np.ndarray):
    viol = p.control_set.violation(u)
    if np.any(viol > 1e-12):
        raise DomainError(f"control {u[int(np.argmax(viol))]} is outside the control set")


def evaluate_hamiltonian(p: ControlProblem, t: float, x, u, y1, z1, w=None, check_domain: bool = True):
    """``<y1, b(t,x,u)> + <z1, sigma(t,x,u)> - f(t,x,u)``.

    Accepts single points (vectors) or batches ``(P, .)``; returns a float or
    a ``(P,)`` array accordingly.
    """
    single = np.ndim(x) == 1
    x, u, y1, z1 = _batch(x, 1), _batch(u, 1), _batch(y1, 1), _batch(z1, 1)
    if check_domain:
        _check_domain(p, u)
    w = np.zeros(x.shape[0]) if w is None else np.atleast_1d(np.asarray(w, dtype=float))
    val = (np.einsum("pi,pi->p", y1, p.call("b", t, x, u, w)) + np.einsum("pi,pi->p", z1, p.call("sigma", t, x, u, w))
           - p.call("f", t, x, u, w))
    return float(val[0]) if single else val


@dataclass(frozen=True)
class ReferencePoint:
    """Reference state, control and adjoint values entering the H-function."""

    x: np.ndarray
    u: np.ndarray
    p1: np.ndarray
    q1: np.ndarray
    p2: np.ndarray


def evaluate_calligraphic_H(p: ControlProblem, t: float, x, u, ref: ReferencePoint, w=None,
                            check_domain: bool = True) -> float:
    """``H(t,x,u,P1,Q1) - <P2 s_ref, s_ref>/2 + <P2 (s - s_ref), s - s_ref>/2``.

    ``s = sigma(t, x, u)`` and ``s_ref = sigma(t, x_ref, u_ref)``.
    """
    x, u = np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(u, float))
    if check_domain:
        _check_domain(p, u[None])
    ww = np.zeros(1) if w is None else np.atleast_1d(np.asarray(w, float))
    h = evaluate_hamiltonian(p, t, x, u, ref.p1, ref.q1, ww, check_domain=False)
    s = p.call("sigma", t, x[None], u[None], ww)[0]
    s_ref = p.call("sigma", t, np.atleast_1d(ref.x)[None], np.atleast_1d(ref.u)[None], ww)[0]
    P2 = np.atleast_2d(ref.p2)
    d = s - s_ref
    return float(h - 0.5 * s_ref @ P2 @ s_ref + 0.5 * d @ P2 @ d)


def calligraphic_H_derivatives(p: ControlProblem, t: float, ref: ReferencePoint, step: float = 1e-4, w=None):
    """Central-difference gradient and Hessian in ``u`` of the H-function at the reference pair."""
    u0 = np.atleast_1d(np.asarray(ref.u, float))
    m = u0.size

    def val(u):
        return evaluate_calligraphic_H(p, t, ref.x, u, ref, w, check_domain=False)

    grad = np.empty(m)
    hess = np.empty((m, m))
    f0 = val(u0)
    E = np.eye(m) * step
    for i in range(m):
        grad[i] = (val(u0 + E[i]) - val(u0 - E[i])) / (2 * step)
        hess[i, i] = (val(u0 + E[i]) - 2 * f0 + val(u0 - E[i])) / step**2
        for j in range(i):
            hess[i, j] = hess[j, i] = (val(u0 + E[i] + E[j]) - val(u0 + E[i] - E[j])
                                       - val(u0 - E[i] + E[j]) + val(u0 - E[i] - E[j])) / (4 * step**2)
    return grad, hess


# ---------------------------------------------------------------------------
# frames


@dataclass(eq=False)
class KernelFrame:
    """Second-order kernels along the reference pair, on all ``N + 1`` nodes.

    Arrays have a leading ``(P, N + 1)``; quantities that do not vary across
    paths are stored as read-only broadcast views. ``Q1``/``Q2`` at the
    terminal node repeat their last value.
    """

    times: np.ndarray
    H_u: np.ndarray
    H_uu: np.ndarray
    H_xx: np.ndarray
    H_xu: np.ndarray
    S: np.ndarray
    sigma_u_P2_sigma_u: np.ndarray
    b_u: np.ndarray
    sigma_u: np.ndarray
    sigma_x: np.ndarray
    ubar: np.ndarray
    method: str

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def path_count(self) -> int:
        return self.H_u.shape[0]


def _stack(parts):
    """Stack per-node arrays along axis 1, as a broadcast view when path-constant."""
    if all(np.all(a == a[:1]) for a in parts):
        P = parts[0].shape[0]
        one = np.stack([a[0] for a in parts])
        return np.broadcast_to(one, (P,) + one.shape)
    return np.stack(parts, axis=1)


def _extend(q):
    return lambda k: q[:, min(k, q.shape[1] - 1)]


def build_kernel_frames(p: ControlProblem, bundle: PathBundle, adj: AdjointSolution) -> KernelFrame:
    g = bundle.grid
    q1, q2 = _extend(adj.q1), _extend(adj.q2)
    names = ("b_u", "sigma_u", "sigma_x", "b_xx", "b_xu", "b_uu", "sigma_xx", "sigma_xu", "sigma_uu",
             "f_u", "f_xx", "f_xu", "f_uu")
    out = {k: [] for k in ("H_u", "H_uu", "H_xx", "H_xu", "S", "sPs", "b_u", "sigma_u", "sigma_x")}
    for k, t in enumerate(g.times):
        x, u, w = bundle.state[:, k], bundle.control[:, k], bundle.W[:, k]
        bu, su, sx, bxx, bxu, buu, sxx, sxu, suu, fu, fxx, fxu, fuu = (p.call(nm, t, x, u, w) for nm in names)
        P1, Q1, P2, Q2 = adj.p1[:, k], q1(k), adj.p2[:, k], q2(k)
        suT = np.swapaxes(su, 1, 2)
        Hu = np.einsum("pkj,pk->pj", bu, P1) + np.einsum("pkj,pk->pj", su, Q1) - fu
        Huu = np.einsum("pk,pkab->pab", P1, buu) + np.einsum("pk,pkab->pab", Q1, suu) - fuu
        Hxx = np.einsum("pk,pkab->pab", P1, bxx) + np.einsum("pk,pkab->pab", Q1, sxx) - fxx
        Hxu = np.einsum("pk,pkab->pab", P1, bxu) + np.einsum("pk,pkab->pab", Q1, sxu) - fxu
        S = Hxu + np.swapaxes(bu, 1, 2) @ P2 + suT @ Q2 + suT @ P2 @ sx
        sPs = suT @ P2 @ su
        for key, val in (("H_u", Hu), ("H_uu", Huu), ("H_xx", Hxx), ("H_xu", Hxu), ("S", S), ("sPs", sPs),
                         ("b_u", bu), ("sigma_u", su), ("sigma_x", sx)):
            out[key].append(val)
    st = {k: _stack(v) for k, v in out.items()}
    return KernelFrame(g.times, st["H_u"], st["H_uu"], st["H_xx"], st["H_xu"], st["S"], st["sPs"],
                       st["b_u"], st["sigma_u"], st["sigma_x"], bundle.control, adj.method)


# ---------------------------------------------------------------------------
# singularity


@dataclass
class SingularityReport:
    sup_Hu: float
    sup_Huu_plus: float
    verdict: str
    tolerance: float
    method: str
    quantile: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @property
    def singular(self) -> bool:
        return self.verdict == "singular"


def _magnitude(a, trailing):
    axes = tuple(range(2, 2 + trailing))
    return np.sqrt(np.sum(np.asarray(a) ** 2, axis=axes))


def classical_singularity_check(frames: KernelFrame, tolerance: Optional[float] = None,
                                quantile: float = 0.99, k: float = 3.0) -> SingularityReport:
    """Test ``H_u = 0`` and ``H_uu + sigma_u' P2 sigma_u = 0`` along the frames.

    Analytic frames: supremum over paths and nodes against ``1e-10``.
    Regression frames: the ``quantile`` of the pathwise magnitudes against
    ``k`` times the largest per-node Monte Carlo standard error (never below
    ``1e-10``).
    """
    hu = _magnitude(frames.H_u, 1)
    hp = _magnitude(np.asarray(frames.H_uu) + np.asarray(frames.sigma_u_P2_sigma_u), 2)
    if frames.method == "analytic":
        tol = 1e-10 if tolerance is None else tolerance
        a, b = float(hu.max()), float(hp.max())
        q = None
    else:
        P = hu.shape[0]
        if tolerance is None:
            se = max(float(hu.std(axis=0).max()), float(hp.std(axis=0).max())) / np.sqrt(P)
            tol = max(1e-10, k * se)
        else:
            tol = tolerance
        a, b = float(np.quantile(hu, quantile)), float(np.quantile(hp, quantile))
        q = quantile
    verdict = "singular" if (a <= tol and b <= tol) else "not singular"
    return SingularityReport(a, b, verdict, tol, frames.method, q)


def s_integrability_diagnostic(frames: KernelFrame) -> float:
    """Monte Carlo estimate of ``E[(int |S(t)|^2 dt)^2]`` (trapezoid in time)."""
    sq = np.sum(np.asarray(frames.S) ** 2, axis=(2, 3))
    inner = time_integral(sq, frames.dt, axis=1)
    return float(np.mean(inner**2))
