"""Forward simulation: Brownian paths, state, variational equations and the
fundamental matrix with its inverse, all by explicit one-step schemes on a
uniform grid and driven by common random numbers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import expm

from . import rng
from .errors import ConditioningError, ConfigError, DomainError, IntegrationError, StructureError
from .norms import sup_norm
from .problem import AdmissibleControl, ControlProblem, check_admissible


@dataclass(frozen=True)
class TimeGrid:
    steps: int
    horizon: float

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("grid needs at least one step")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def node(self, t: float) -> int:
        """Index of the grid node nearest to ``t``."""
        k = int(round(t / self.dt))
        if not 0 <= k <= self.steps:
            raise DomainError(f"time {t} outside [0, {self.horizon}]")
        return k


@dataclass(eq=False)
class PathBundle:
    """Brownian increments plus the state and control they generate."""

    grid: TimeGrid
    dW: np.ndarray
    state: np.ndarray
    control: np.ndarray
    seed: int

    @property
    def path_count(self) -> int:
        return self.dW.shape[0]

    @cached_property
    def W(self) -> np.ndarray:
        W = np.zeros((self.path_count, self.grid.steps + 1))
        np.cumsum(self.dW, axis=1, out=W[:, 1:])
        return W

    _MAGIC = b"SCLB"
    _VERSION = 1
    _HEADER = struct.Struct("<4sIIIQQqd")

    def save(self, path) -> None:
        """Write a binary cache file (header, then dW, state, control as float64)."""
        P, N = self.dW.shape
        n, m = self.state.shape[2], self.control.shape[2]
        header = self._HEADER.pack(self._MAGIC, self._VERSION, n, m, N, P, int(self.seed), self.grid.horizon)
        with open(path, "wb") as fh:
            fh.write(header)
            for arr in (self.dW, self.state, self.control):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "PathBundle":
        raw = Path(path).read_bytes()
        size = cls._HEADER.size
        magic, version, n, m, N, P, seed, T = cls._HEADER.unpack(raw[:size])
        if magic != cls._MAGIC:
            raise StructureError(f"{path} is not a path-bundle cache")
        if version != cls._VERSION:
            raise StructureError(f"unsupported cache version {version}")
        data = np.frombuffer(raw[size:], dtype="<f8")
        sizes = [P * N, P * (N + 1) * n, P * (N + 1) * m]
        if data.size != sum(sizes):
            raise StructureError("cache file is truncated")
        a, b = sizes[0], sizes[0] + sizes[1]
        return cls(TimeGrid(N, T), data[:a].reshape(P, N).copy(), data[a:b].reshape(P, N + 1, n).copy(),
                   data[b:].reshape(P, N + 1, m).copy(), seed)


def coarsen_increments(dW: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` increments (same path, coarser grid)."""
    P, N = dW.shape
    if N % factor:
        raise ConfigError("step count must be divisible by the coarsening factor")
    return dW.reshape(P, N // factor, factor).sum(axis=2)


def _check_finite(arr, k, what):
    bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    if bad.any():
        raise IntegrationError(f"{what} became non-finite on path {int(np.argmax(bad))} at node {k}")


def simulate_state(p: ControlProblem, u: AdmissibleControl, grid: TimeGrid, paths: int, seed: int,
                   dW: Optional[np.ndarray] = None, check_controls: bool = True) -> PathBundle:
    """Euler-Maruyama paths of the controlled state.

    Identical ``(seed, grid, paths)`` give bit-identical output. Pass ``dW``
    to reuse the noise of another bundle.
    """
    if abs(grid.horizon - p.horizon) > 1e-12:
        raise ConfigError("grid horizon differs from the problem horizon")
    if dW is None:
        dW = rng.brownian_increments(seed, paths, grid.steps, grid.dt)
    elif dW.shape != (paths, grid.steps):
        raise ConfigError(f"noise has shape {dW.shape}, expected {(paths, grid.steps)}")
    W = np.zeros((paths, grid.steps + 1))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    controls = u.sample(grid.times, W, p.m)
    if check_controls:
        check_admissible(controls, p.control_set)
    return integrate_state(p, grid, dW, W, controls, seed)


def integrate_state(p, grid, dW, W, controls, seed=0) -> PathBundle:
    paths = dW.shape[0]
    x = np.empty((paths, grid.steps + 1, p.n))
    x[:, 0] = p.initial_state
    dt = grid.dt
    times = grid.times
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(grid.steps):
            xk, uk, wk = x[:, k], controls[:, k], W[:, k]
            x[:, k + 1] = xk + p.call("b", times[k], xk, uk, wk) * dt + p.call("sigma", times[k], xk, uk, wk) * dW[:, k:k + 1]
            _check_finite(x[:, k + 1], k + 1, "state")
    bundle = PathBundle(grid, dW, x, controls, seed)
    bundle.__dict__["W"] = W
    return bundle


def cost_samples(p: ControlProblem, bundle: PathBundle) -> np.ndarray:
    """Per-path realised cost ``int f dt + h(x(T))`` (trapezoid in time)."""
    g = bundle.grid
    W = bundle.W
    fvals = np.stack([p.call("f", t, bundle.state[:, k], bundle.control[:, k], W[:, k])
                      for k, t in enumerate(g.times)], axis=1)
    running = g.dt * (0.5 * fvals[:, 0] + fvals[:, 1:-1].sum(axis=1) + 0.5 * fvals[:, -1])
    return running + p.call("h", g.horizon, bundle.state[:, -1], None, W[:, -1])


# ---------------------------------------------------------------------------
# perturbations and variational equations


@dataclass(frozen=True)
class PerturbationSpec:
    """Direction ``v(.)`` of a control perturbation.

    ``convex`` mode: ``v`` is either given directly (``direction``) or as
    ``target - ubar``. ``needle`` mode: ``v(t) = (point - ubar(t))`` on the
    window ``[tau, tau + theta)``, zero elsewhere; the window snaps to grid
    nodes and always spans at least two steps.
    """

    mode: str = "convex"
    direction: Optional[AdmissibleControl] = None
    target: Optional[AdmissibleControl] = None
    tau: float = 0.0
    theta: float = 0.0
    point: Optional[np.ndarray] = None

    @classmethod
    def convex(cls, direction) -> "PerturbationSpec":
        if not isinstance(direction, AdmissibleControl):
            direction = AdmissibleControl.constant(direction)
        return cls("convex", direction=direction)

    @classmethod
    def towards(cls, target: AdmissibleControl) -> "PerturbationSpec":
        return cls("convex", target=target)

    @classmethod
    def needle(cls, tau: float, theta: float, point) -> "PerturbationSpec":
        return cls("needle", tau=float(tau), theta=float(theta), point=np.atleast_1d(np.asarray(point, float)))

    def scaled(self, c: float) -> "PerturbationSpec":
        """Direction multiplied by ``c`` (convex mode with an explicit direction)."""
        if self.direction is None:
            raise ConfigError("only explicit directions can be scaled")
        d = self.direction
        if d.kind == "constant":
            return PerturbationSpec.convex(AdmissibleControl.constant(c * d.value))
        if d.kind == "function":
            return PerturbationSpec.convex(AdmissibleControl.function(lambda t: c * d.at(t)))
        if callable(d.value):
            return PerturbationSpec.convex(AdmissibleControl.process(lambda k, t, w: c * np.asarray(d.value(k, t, w))))
        return PerturbationSpec.convex(AdmissibleControl.process(c * np.asarray(d.value, dtype=float)))

    def window(self, grid: TimeGrid) -> tuple[int, int]:
        i0 = int(round(self.tau / grid.dt))
        i1 = max(int(round((self.tau + self.theta) / grid.dt)), i0 + 2)
        if i0 < 0 or i1 > grid.steps:
            raise DomainError(f"needle window [{self.tau}, {self.tau + self.theta}) does not fit in [0, {grid.horizon}]")
        return i0, i1

    def sample(self, bundle: PathBundle, m: int) -> np.ndarray:
        g = bundle.grid
        if self.mode == "needle":
            i0, i1 = self.window(g)
            v = np.zeros_like(bundle.control)
            v[:, i0:i1] = self.point - bundle.control[:, i0:i1]
            return v
        if self.target is not None:
            return self.target.sample(g.times, bundle.W, m) - bundle.control
        if self.direction is None:
            raise ConfigError("convex perturbation needs a direction or a target")
        return self.direction.sample(g.times, bundle.W, m)


@dataclass(eq=False)
class VariationalPaths:
    y1: np.ndarray
    y2: Optional[np.ndarray]
    v: np.ndarray


def _frozen(p: ControlProblem, bundle: PathBundle, k: int, names):
    t = bundle.grid.times[k]
    return [p.call(nm, t, bundle.state[:, k], bundle.control[:, k], bundle.W[:, k]) for nm in names]


def simulate_variational(p: ControlProblem, bundle: PathBundle, pert: PerturbationSpec,
                         second_order: bool = True, v: Optional[np.ndarray] = None) -> VariationalPaths:
    """First and second variational processes along the reference bundle.

    Coefficients are frozen along ``(xbar, ubar)``; ``y2`` is driven by the
    ``y1`` computed in the same sweep.
    """
    g = bundle.grid
    if v is None:
        v = pert.sample(bundle, p.m)
    P, N = bundle.path_count, g.steps
    y1 = np.zeros((P, N + 1, p.n))
    y2 = np.zeros((P, N + 1, p.n)) if second_order else None
    dt = g.dt
    first = ("b_x", "b_u", "sigma_x", "sigma_u")
    second = ("b_xx", "b_xu", "b_uu", "sigma_xx", "sigma_xu", "sigma_uu")
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            vk = v[:, k]
            if not second_order and not vk.any() and not y1[:, k].any():
                y1[:, k + 1] = 0.0
                continue
            bx, bu, sx, su = _frozen(p, bundle, k, first)
            a = y1[:, k]
            dw = bundle.dW[:, k:k + 1]
            y1[:, k + 1] = a + (_mv(bx, a) + _mv(bu, vk)) * dt + (_mv(sx, a) + _mv(su, vk)) * dw
            if second_order:
                bxx, bxu, buu, sxx, sxu, suu = _frozen(p, bundle, k, second)
                c = y2[:, k]
                drift = _mv(bx, c) + _quad(bxx, a, a) + 2 * _quad(bxu, vk, a) + _quad(buu, vk, vk)
                diff = _mv(sx, c) + _quad(sxx, a, a) + 2 * _quad(sxu, vk, a) + _quad(suu, vk, vk)
                y2[:, k + 1] = c + drift * dt + diff * dw
                _check_finite(y2[:, k + 1], k + 1, "y2")
            _check_finite(y1[:, k + 1], k + 1, "y1")
    return VariationalPaths(y1, y2, v)


def _mv(mat, vec):
    return np.einsum("pij,pj->pi", mat, vec)


def _quad(tensor, left, right):
    """Componentwise bilinear form ``left' T_k right`` for ``T`` of shape (P, n, a, b)."""
    return np.einsum("pkab,pa,pb->pk", tensor, left, right)


@dataclass
class SlopeReport:
    eps: np.ndarray
    norms: dict
    slopes: dict
    moments4: dict

    def to_dict(self) -> dict:
        return {"eps": self.eps.tolist(), "norms": {k: list(map(float, v)) for k, v in self.norms.items()},
                "slopes": {k: float(v) for k, v in self.slopes.items()},
                "moments4": {k: list(map(float, v)) for k, v in self.moments4.items()}}


def loglog_slope(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def perturbation_order_check(p: ControlProblem, ubar: AdmissibleControl, pert: PerturbationSpec,
                             eps_ladder, grid: TimeGrid, paths: int, seed: int) -> SlopeReport:
    """Estimate ``||dx||``, ``||dx - eps y1||`` and ``||dx - eps y1 - eps^2 y2/2||`` per eps.

    All runs share one set of Brownian increments. Slopes are least-squares
    fits in log-log coordinates; a norm that vanishes identically gives a
    ``nan`` slope.
    """
    eps = np.asarray(sorted(eps_ladder, reverse=True), dtype=float)
    if eps.size < 3:
        raise ConfigError("perturbation ladder needs at least three values")
    if pert.mode != "convex":
        raise ConfigError("order check needs a convex perturbation")
    base = simulate_state(p, ubar, grid, paths, seed)
    var = simulate_variational(p, base, pert)
    keys = ("dx", "dx-eps*y1", "dx-eps*y1-eps^2*y2/2")
    norms = {k: [] for k in keys}
    moments4 = {k: [] for k in keys}
    for e in eps:
        controls = base.control + e * var.v
        check_admissible(controls, p.control_set)
        pert_bundle = integrate_state(p, grid, base.dW, base.W, controls, seed)
        dx = pert_bundle.state - base.state
        r1 = dx - e * var.y1
        r2 = r1 - 0.5 * e**2 * var.y2
        for key, arr in zip(keys, (dx, r1, r2)):
            norms[key].append(sup_norm(arr, 2.0))
            moments4[key].append(sup_norm(arr, 4.0))
    slopes = {k: loglog_slope(eps, norms[k]) for k in keys}
    return SlopeReport(eps, {k: np.array(v) for k, v in norms.items()}, slopes,
                       {k: np.array(v) for k, v in moments4.items()})


# ---------------------------------------------------------------------------
# fundamental matrix


@dataclass(eq=False)
class FundamentalMatrixPath:
    phi: np.ndarray
    phi_inv: np.ndarray
    defect: np.ndarray  # max over paths of ||Phi Psi - I||_F per node


def _batched_expm(A: np.ndarray) -> np.ndarray:
    if A.shape[-1] == 1:
        return np.exp(A)
    if not A.any():
        return np.broadcast_to(np.eye(A.shape[-1]), A.shape).copy()
    return expm(A)


def simulate_fundamental(p: ControlProblem, bundle: PathBundle, scheme: str = "exponential",
                         tol: float = 1e-6) -> FundamentalMatrixPath:
    """Fundamental matrix ``Phi`` of the linearised flow and its inverse ``Psi``.

    ``Psi`` follows ``dPsi = Psi (sx sx - bx) dt - Psi sx dW`` and is never
    obtained by inverting ``Phi``. ``scheme="exponential"`` advances both by
    matrix exponentials of the same one-step generator
    ``(bx - sx^2/2) dt + sx dW`` (left and right multiplication), which is
    exact for constant scalar coefficients; ``scheme="euler"`` uses plain
    Euler-Maruyama for both. ``ConditioningError`` is raised when
    ``||Phi Psi - I||_F`` exceeds ``tol`` on any path.
    """
    g = bundle.grid
    P, N, n = bundle.path_count, g.steps, p.n
    eye = np.eye(n)
    phi = np.empty((P, N + 1, n, n))
    psi = np.empty((P, N + 1, n, n))
    phi[:, 0] = eye
    psi[:, 0] = eye
    defect = np.zeros(N + 1)
    dt = g.dt
    for k in range(N):
        bx, sx = _frozen(p, bundle, k, ("b_x", "sigma_x"))
        dw = bundle.dW[:, k][:, None, None]
        if scheme == "exponential":
            gen = (bx - 0.5 * sx @ sx) * dt + sx * dw
            step = _batched_expm(gen)
            back = _batched_expm(-gen)
            phi[:, k + 1] = step @ phi[:, k]
            psi[:, k + 1] = psi[:, k] @ back
        elif scheme == "euler":
            phi[:, k + 1] = phi[:, k] + (bx @ phi[:, k]) * dt + (sx @ phi[:, k]) * dw
            psi[:, k + 1] = psi[:, k] + (psi[:, k] @ (sx @ sx - bx)) * dt - (psi[:, k] @ sx) * dw
        else:
            raise ConfigError(f"unknown scheme {scheme!r}")
        _check_finite(phi[:, k + 1], k + 1, "Phi")
        _check_finite(psi[:, k + 1], k + 1, "Phi inverse")
        d = np.sqrt(np.sum((phi[:, k + 1] @ psi[:, k + 1] - eye) ** 2, axis=(1, 2)))
        defect[k + 1] = d.max()
        if defect[k + 1] > tol:
            raise ConditioningError(
                f"||Phi Psi - I|| = {defect[k + 1]:.3e} exceeds {tol:.1e} on path {int(np.argmax(d))} at node {k + 1}")
    return FundamentalMatrixPath(phi, psi, defect)


def explicit_y1(p: ControlProblem, bundle: PathBundle, fmp: FundamentalMatrixPath,
                pert: PerturbationSpec, v: Optional[np.ndarray] = None) -> VariationalPaths:
    """``y1`` from its representation through the fundamental matrix.

    ``y1(t) = Phi(t) [int_0^t Psi (b_u - s_x s_u) v ds + int_0^t Psi s_u v dW]``,
    both integrals as left-point sums.
    """
    g = bundle.grid
    if v is None:
        v = pert.sample(bundle, p.m)
    P, N, n = bundle.path_count, g.steps, p.n
    acc = np.zeros((P, n))
    y1 = np.zeros((P, N + 1, n))
    for k in range(N):
        vk = v[:, k]
        if vk.any():
            bu, sx, su = _frozen(p, bundle, k, ("b_u", "sigma_x", "sigma_u"))
            psi = fmp.phi_inv[:, k]
            acc = acc + _mv(psi, _mv(bu - sx @ su, vk)) * g.dt + _mv(psi, _mv(su, vk)) * bundle.dW[:, k:k + 1]
        y1[:, k + 1] = _mv(fmp.phi[:, k + 1], acc)
    return VariationalPaths(y1, None, v)


def estimate_cost(p: ControlProblem, u: AdmissibleControl, grid: TimeGrid, paths: int, seed: int):
    """Monte Carlo cost ``J(u)``; returns ``(mean, stderr, bundle)``."""
    bundle = simulate_state(p, u, grid, paths, seed)
    samples = cost_samples(p, bundle)
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(paths)), bundle
