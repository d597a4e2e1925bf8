"""Malliavin-derivative plug-ins, martingale representation kernels, window
diagnostics, limit kernels and the two counterexample integrands.

Plug-ins describe a process ``phi`` driven by the Brownian motion through
callables of the current Brownian values:

* ``value(t, w_t)``: samples of ``phi(t)``;
* ``kernel(s, t, w_s, w_t)``: ``D_s phi(t)``, zero for ``s > t``;
* ``diagonal(t, w_t)``: ``nabla phi(t)``, the diagonal limit from above;
* ``mean(t)``: optional exact ``E phi(t)``;
* ``conditional(s, t, w_s)``: optional exact ``E(D_s phi(t) | F_s)``.

Outputs may be scalars (broadcast over paths) or arrays ``(P, ...)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid, simpson

from . import rng
from .errors import ConfigError, DomainError
from .regression import PolynomialBasis


def _paths(out, P: int, shape: tuple = ()) -> np.ndarray:
    out = np.asarray(out, dtype=float)
    if out.ndim == len(shape):
        return np.broadcast_to(out, (P,) + out.shape)
    return out


@dataclass(frozen=True)
class MalliavinPlugin:
    label: str
    value: Callable
    kernel: Callable
    diagonal: Callable
    mean: Optional[Callable] = None
    minus: Optional[Callable] = None
    shape: tuple = ()
    conditional: Optional[Callable] = None

    def sample(self, t: float, w_t: np.ndarray) -> np.ndarray:
        return _paths(self.value(t, w_t), w_t.shape[0], self.shape)

    def D(self, s: float, t: float, w_s: np.ndarray, w_t: np.ndarray) -> np.ndarray:
        """``D_s phi(t)``; identically zero above the diagonal (``s > t``)."""
        P = w_s.shape[0]
        if s > t:
            return np.zeros((P,) + self.shape)
        return _paths(self.kernel(s, t, w_s, w_t), P, self.shape)

    def nabla(self, t: float, w_t: np.ndarray) -> np.ndarray:
        return _paths(self.diagonal(t, w_t), w_t.shape[0], self.shape)


@dataclass
class PluginReport:
    adapted: bool
    max_future_kernel: float
    minus_zero: bool
    max_minus: float


def check_plugin(plugin: MalliavinPlugin, probes: int = 64, horizon: float = 1.0, seed: int = 0) -> PluginReport:
    """Probe the raw kernel above the diagonal and any supplied ``D^-``.

    For adapted processes ``D_s phi(t) = 0`` when ``s > t`` and ``D^- = 0``;
    a nonzero supply of either is flagged.
    """
    gen = np.random.default_rng(seed)
    worst = 0.0
    worst_minus = 0.0
    for _ in range(probes):
        a, b = gen.uniform(0.0, horizon, 2)
        t, s = min(a, b), max(a, b)
        if s == t:
            continue
        w_t = gen.standard_normal(4) * math.sqrt(t)
        w_s = w_t + gen.standard_normal(4) * math.sqrt(s - t)
        raw = _paths(plugin.kernel(s, t, w_s, w_t), 4, plugin.shape)
        worst = max(worst, float(np.max(np.abs(raw))))
        if plugin.minus is not None:
            worst_minus = max(worst_minus, float(np.max(np.abs(_paths(plugin.minus(t, w_t), 4, plugin.shape)))))
    return PluginReport(worst == 0.0, worst, worst_minus == 0.0, worst_minus)


def _upper(s, t, val):
    return val if s <= t else 0.0


def brownian_plugin() -> MalliavinPlugin:
    """``phi(t) = W(t)``: ``D_s phi(t) = 1`` for ``s <= t``."""
    return MalliavinPlugin("W", lambda t, w: w, lambda s, t, ws, wt: _upper(s, t, 1.0),
                           lambda t, w: 1.0, mean=lambda t: 0.0,
                           conditional=lambda s, t, ws: _upper(s, t, 1.0))


def brownian_square_plugin() -> MalliavinPlugin:
    """``phi(t) = W(t)^2``: ``D_s phi(t) = 2 W(t)`` for ``s <= t``."""
    return MalliavinPlugin("W^2", lambda t, w: w**2, lambda s, t, ws, wt: _upper(s, t, 2.0 * wt),
                           lambda t, w: 2.0 * w, mean=lambda t: t,
                           conditional=lambda s, t, ws: _upper(s, t, 2.0 * ws))


def deterministic_plugin(fn: Callable[[float], np.ndarray], label: str = "deterministic",
                         shape: tuple = ()) -> MalliavinPlugin:
    """A deterministic function of time: every Malliavin derivative vanishes."""
    zero = np.zeros(shape)
    return MalliavinPlugin(label, lambda t, w: np.asarray(fn(t), float), lambda s, t, ws, wt: zero,
                           lambda t, w: zero, mean=lambda t: np.asarray(fn(t), float), shape=shape,
                           conditional=lambda s, t, ws: zero)


def zero_plugin(shape: tuple = (), label: str = "zero") -> MalliavinPlugin:
    return deterministic_plugin(lambda t: np.zeros(shape), label, shape)


def _brownian(seed: int, paths: int, steps: int, horizon: float):
    dt = horizon / steps
    dW = rng.brownian_increments(seed, paths, steps, dt)
    W = np.zeros((paths, steps + 1))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    return dt, dW, W


def _rel_l2(err: np.ndarray, ref: np.ndarray) -> float:
    num = float(np.sqrt(np.mean(err**2)))
    den = float(np.sqrt(np.mean(ref**2)))
    if num == 0.0:
        return 0.0
    return num / den if den > 0 else float("inf")


@dataclass
class ClarkOconeResult:
    residual: float
    mean: float
    paths: int
    steps: int
    conditional: str
    conditional_error: Optional[float] = None


def clark_ocone_check(plugin: MalliavinPlugin, paths: int, steps: int, seed: int, horizon: float = 1.0,
                      degree: int = 2, conditional: str = "regression") -> ClarkOconeResult:
    """Relative L2 error of ``zeta ~ E zeta + sum_k E(D_{t_k} zeta | F_{t_k}) dW_k``.

    ``zeta = phi(T)``. With ``conditional="regression"`` the conditional
    expectations are regressions on a polynomial basis in ``W(t_k)``; with
    ``"analytic"`` the plug-in's ``conditional`` oracle is used instead. When
    the oracle exists, ``conditional_error`` reports the relative L2 gap
    between the regression estimates and the oracle over all nodes. The
    exact mean is used when the plug-in provides one.
    """
    if conditional not in ("regression", "analytic"):
        raise ConfigError(f"unknown conditional expectation route {conditional!r}")
    if conditional == "analytic" and plugin.conditional is None:
        raise ConfigError(f"plug-in {plugin.label!r} has no conditional expectation oracle")
    dt, dW, W = _brownian(seed, paths, steps, horizon)
    zeta = plugin.sample(horizon, W[:, -1])
    mean = plugin.mean(horizon) if plugin.mean is not None else zeta.mean(axis=0)
    recon = np.broadcast_to(np.asarray(mean, dtype=float), zeta.shape).copy()
    gap = ref = 0.0
    for k in range(steps):
        s = k * dt
        exact = None
        if plugin.conditional is not None:
            exact = _paths(plugin.conditional(s, horizon, W[:, k]), paths, plugin.shape)
        if conditional == "analytic":
            cond = exact
        else:
            d = plugin.D(s, horizon, W[:, k], W[:, -1])
            if np.all(d == d[:1]):
                cond = d
            elif k == 0:
                cond = np.broadcast_to(d.mean(axis=0), d.shape)
            else:
                cond = PolynomialBasis(W[:, k], degree).project(np.ascontiguousarray(d))
            if exact is not None:
                gap += float(np.sum((cond - exact) ** 2))
                ref += float(np.sum(exact**2))
        if np.any(cond):
            recon += cond * dW[:, k].reshape((-1,) + (1,) * (cond.ndim - 1))
    cerr = None
    if conditional == "regression" and plugin.conditional is not None:
        cerr = 0.0 if gap == 0.0 else (math.sqrt(gap / ref) if ref > 0 else float("inf"))
    return ClarkOconeResult(_rel_l2(recon - zeta, zeta), float(np.mean(mean)), paths, steps, conditional, cerr)


# ---------------------------------------------------------------------------
# martingale representation


@dataclass(eq=False)
class MartingaleKernel:
    """Regression estimate of ``phi_v(s, t)`` in ``phi(t) = E phi(t) + int_0^t phi_v(s, t) dW(s)``.

    For each source node ``j`` in ``[s_start, t_end)`` the kernel at the
    target nodes ``k = j+1 .. t_end`` is stored as coefficients on the
    orthonormal basis at ``j`` (shape ``(K_j, t_end - j, d)``); the basis is
    rebuilt on demand from the stored features.
    """

    label: str
    coeffs: dict
    mean: np.ndarray
    features: np.ndarray
    degree: int
    dt: float
    dW: np.ndarray
    s_start: int
    t_end: int
    value_shape: tuple = ()
    _cache: dict = field(default_factory=dict, repr=False)

    def basis(self, j: int) -> PolynomialBasis:
        if j not in self._cache:
            self._cache.clear()
            self._cache[j] = PolynomialBasis(self.features[:, j], self.degree)
        return self._cache[j]

    def values(self, j: int) -> np.ndarray:
        """Per-path kernel ``phi_v(s_j, t_k)`` for ``k = j+1 .. t_end``, shape ``(P, L, d)``."""
        c = self.coeffs[j]
        if not c.any():
            return np.zeros((self.features.shape[0],) + c.shape[1:])
        return self.basis(j).evaluate(c)

    def is_zero(self) -> bool:
        return all(not c.any() for c in self.coeffs.values())

    def reconstruct(self) -> np.ndarray:
        """``E phi(t_k) + sum_{j<k} phi_v(s_j, t_k) dW_j`` for every node, shape ``(P, N+1, d)``."""
        if self.s_start != 0:
            raise ConfigError("reconstruction needs a kernel built from time 0")
        P = self.features.shape[0]
        d = self.mean.shape[1]
        out = np.broadcast_to(self.mean[: self.t_end + 1], (P, self.t_end + 1, d)).copy()
        for j in range(self.t_end):
            c = self.coeffs[j]
            if c.any():
                qdw = self.basis(j).q * self.dW[:, j:j + 1]
                out[:, j + 1:] += (qdw @ c.reshape(c.shape[0], -1)).reshape((P,) + c.shape[1:])
        return out

    def reconstruction_error(self, values: np.ndarray) -> float:
        """Relative L2 error over paths and nodes."""
        values = np.asarray(values, float).reshape(values.shape[0], values.shape[1], -1)[:, : self.t_end + 1]
        return _rel_l2(self.reconstruct() - values, values)


def martingale_representation(values: np.ndarray, W: np.ndarray, dW: np.ndarray, dt: float,
                              state: Optional[np.ndarray] = None, degree: int = 2,
                              window: Optional[tuple] = None, label: str = "phi",
                              include_w: bool = True) -> MartingaleKernel:
    """Estimate the martingale-representation kernel of sampled ``phi``.

    ``values`` has shape ``(P, N+1, ...)``. Conditional expectations use a
    polynomial basis in ``(state(s), W(s))``. Writing ``F_j(k)`` for the
    estimate of ``E(phi(t_k) - E phi(t_k) | F_{t_j})``, built backwards by
    ``F_k(k) = phi(t_k) - E phi(t_k)`` and ``F_j(k) = proj_j F_{j+1}(k)``,
    the kernel at ``(s_j, t_k)`` is ``proj_j[(F_{j+1}(k) - F_j(k)) dW_j] / dt``.
    The telescoping sum over ``j`` reproduces the centred ``phi(t_k)``.
    Every projection is carried in basis coefficients, so each step costs
    ``O(P K^2)`` regardless of how many targets are open.
    ``include_w=False`` drops ``W`` from the features when ``state`` is
    Markov on its own (``W`` can be collinear with the state).
    ``window = (i0, i1)`` restricts source and target nodes to ``[i0, i1]``.
    A path-constant ``phi`` gives an identically zero kernel.
    """
    values = np.asarray(values, dtype=float)
    P, K1 = values.shape[:2]
    vshape = values.shape[2:]
    flat = values.reshape(P, K1, -1)
    const = np.all(flat == flat[:1], axis=0)
    mean = np.where(const, flat[0], flat.mean(axis=0))  # exact mean where phi is path-constant
    centred = flat - mean
    if state is None:
        feats = W[:, :, None]
    elif include_w:
        feats = np.concatenate([state.reshape(P, K1, -1), W[:, :, None]], axis=2)
    else:
        feats = state.reshape(P, K1, -1)
    i0, i1 = (0, K1 - 1) if window is None else (int(window[0]), int(window[1]))
    if not 0 <= i0 < i1 <= K1 - 1:
        raise DomainError(f"window {window} does not fit the grid")
    kern = MartingaleKernel(label, {}, mean, feats, degree, dt, dW, i0, i1, vshape)
    d = flat.shape[2]
    if not centred[:, i0:i1 + 1].any():
        for j in range(i0, i1):
            kern.coeffs[j] = np.zeros((1, i1 - j, d))
        return kern
    q_next = None   # orthonormal basis at node j+1
    a_next = None   # coefficients of F_{j+1}(k), k = j+2 .. i1, in q_next
    for j in range(i1 - 1, i0 - 1, -1):
        q = PolynomialBasis(feats[:, j], degree).q
        qdw = q * dW[:, j:j + 1]
        new = centred[:, j + 1]
        a_first = (q.T @ new)[:, None]
        upper_first = (qdw.T @ new)[:, None]
        if a_next is None:
            a, upper = a_first, upper_first
        else:
            a = np.concatenate([a_first, np.einsum("ab,bld->ald", q.T @ q_next, a_next)], axis=1)
            upper = np.concatenate([upper_first, np.einsum("ab,bld->ald", qdw.T @ q_next, a_next)], axis=1)
        kern.coeffs[j] = (upper - np.einsum("ab,bld->ald", qdw.T @ q, a)) / dt
        q_next, a_next = q, a
    return kern


# ---------------------------------------------------------------------------
# window diagnostics and limit kernels


@dataclass
class LadderTrace:
    """Sequence of ``(theta, estimate, stderr)`` rows."""

    theta: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    label: str = ""

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["theta", "estimate", "stderr"])
            for row in zip(self.theta, self.estimate, self.stderr):
                w.writerow([repr(float(x)) for x in row])

    def rows(self) -> list:
        return [{"theta": float(a), "estimate": float(b), "stderr": float(c)}
                for a, b, c in zip(self.theta, self.estimate, self.stderr)]


def _window_paths(seed: int, paths: int, tau: float, theta: float, substeps: int):
    """Brownian values at ``tau + i theta / substeps``, ``i = 0..substeps``."""
    z = rng.standard_normals(seed, paths, substeps + 1)
    w = np.empty((paths, substeps + 1))
    w[:, 0] = math.sqrt(tau) * z[:, 0]
    w[:, 1:] = w[:, :1] + np.cumsum(z[:, 1:] * math.sqrt(theta / substeps), axis=1)
    return w


def _double_window(e: np.ndarray, h: float) -> np.ndarray:
    """``int_0^theta int_0^t e(s, t) ds dt`` per path for ``e[p, i, j]`` on ``s_i, t_j``.

    Inner integral by the trapezoid rule over ``s_0..s_j``, outer by
    composite Simpson over ``t``.
    """
    inner = cumulative_trapezoid(e, dx=h, axis=1, initial=0.0)
    diag = np.diagonal(inner, axis1=1, axis2=2)  # inner[:, j, j]
    return simpson(diag, dx=h, axis=1)


def window_diagonal_check(plugin: MalliavinPlugin, theta_ladder, tau_grid, paths: int, seed: int,
                          substeps: int = 32) -> LadderTrace:
    """``w(theta) = theta^-2 int int E|D_s phi(t) - nabla phi(s)|^2 ds dt`` averaged over ``tau``.

    Each ``(tau, theta)`` cell draws its own Brownian window; ``substeps``
    must be even.
    """
    if substeps % 2:
        raise ConfigError("substeps must be even for Simpson's rule")
    thetas = np.asarray(theta_ladder, dtype=float)
    taus = np.asarray(tau_grid, dtype=float)
    est, err = [], []
    for a, theta in enumerate(thetas):
        per_path = np.zeros(paths)
        for b, tau in enumerate(taus):
            w = _window_paths(rng.sub_seed(seed, a, b), paths, tau, theta, substeps)
            h = theta / substeps
            times = tau + h * np.arange(substeps + 1)
            e = np.zeros((paths, substeps + 1, substeps + 1))
            for j, t in enumerate(times):
                for i in range(j + 1):
                    diff = plugin.D(times[i], t, w[:, i], w[:, j]) - plugin.nabla(times[i], w[:, i])
                    e[:, i, j] = np.sum(diff.reshape(paths, -1) ** 2, axis=1)
            per_path += _double_window(e, h) / theta**2
        per_path /= len(taus)
        est.append(per_path.mean())
        err.append(per_path.std(ddof=1) / math.sqrt(paths))
    return LadderTrace(thetas, np.array(est), np.array(err), plugin.label)


@dataclass
class LimitKernelResult:
    theta: np.ndarray
    first: np.ndarray
    first_stderr: np.ndarray
    second: np.ndarray
    second_stderr: np.ndarray
    target: float
    target_stderr: float


def limit_kernel_check(phi: np.ndarray, psi: np.ndarray, times: np.ndarray, tau: float,
                       theta_ladder) -> LimitKernelResult:
    """Window ratios whose common limit is ``E<Phi(tau), Psi(tau)>/2``.

    ``first(theta) = theta^-2 E int <Phi(tau), int_tau^t Psi ds> dt`` and
    ``second`` uses ``Phi(t)`` in place of ``Phi(tau)``. ``phi`` and ``psi``
    are samples ``(P, K)`` or ``(P, K, n)`` on the uniform ``times``; each
    window must span an even number of grid steps.
    """
    phi = np.asarray(phi, float)
    psi = np.asarray(psi, float)
    if phi.ndim == 2:
        phi, psi = phi[:, :, None], psi[:, :, None]
    h = float(times[1] - times[0])
    i0 = int(round((tau - times[0]) / h))
    if not 0 <= i0 < len(times):
        raise DomainError(f"tau={tau} is outside the sample grid")
    P = phi.shape[0]
    out = {"first": [], "first_se": [], "second": [], "second_se": []}
    thetas = np.asarray(theta_ladder, dtype=float)
    for theta in thetas:
        M = int(round(theta / h))
        if M < 2 or M % 2 or abs(M * h - theta) > 1e-9 * max(theta, 1.0):
            raise DomainError(f"theta={theta} is not an even multiple of the grid step {h}")
        if i0 + M >= len(times):
            raise DomainError(f"window [{tau}, {tau + theta}] leaves the sample grid")
        win_psi = psi[:, i0: i0 + M + 1]
        inner = cumulative_trapezoid(win_psi, dx=h, axis=1, initial=0.0)
        f1 = simpson(np.einsum("pi,pki->pk", phi[:, i0], inner), dx=h, axis=1) / theta**2
        f2 = simpson(np.einsum("pki,pki->pk", phi[:, i0: i0 + M + 1], inner), dx=h, axis=1) / theta**2
        out["first"].append(f1.mean())
        out["first_se"].append(f1.std(ddof=1) / math.sqrt(P) if P > 1 else 0.0)
        out["second"].append(f2.mean())
        out["second_se"].append(f2.std(ddof=1) / math.sqrt(P) if P > 1 else 0.0)
    tgt = 0.5 * np.einsum("pi,pi->p", phi[:, i0], psi[:, i0])
    return LimitKernelResult(thetas, np.array(out["first"]), np.array(out["first_se"]), np.array(out["second"]),
                             np.array(out["second_se"]), float(tgt.mean()),
                             float(tgt.std(ddof=1) / math.sqrt(P)) if P > 1 else 0.0)


# ---------------------------------------------------------------------------
# counterexample integrands
#
# Both integrands depend on d = t - s only, so the window double integral
# reduces to  int_0^theta (theta - d) g(d) dd.

OSC_HORIZON = math.sqrt(2.0)
SINGULAR_HORIZON = 1.0


def osc_band_edge(n: int) -> float:
    """``a_n = 2 / 3^n``."""
    return 2.0 / 3.0**n


def _osc_bands(theta: float):
    """Signed bands ``(sign, lo, hi)`` in ``d`` covering ``(0, theta]``."""
    r = math.sqrt(2.0)
    n = 1
    out = []
    while True:
        a_n, a_prev = osc_band_edge(n), osc_band_edge(n - 1)
        pos = (r * a_n / 2, r * a_n)
        neg = (r * a_n, r * a_prev / 2)
        out += [(1.0, *pos), (-1.0, *neg)]
        if pos[1] < theta * 1e-20:
            break
        n += 1
    return out


def _profile_piece(theta: float, lo: float, hi: float) -> float:
    """``int_lo^hi (theta - d) dd`` over ``[lo, hi] cap [0, theta]``."""
    hi = min(hi, theta)
    if hi <= lo:
        return 0.0
    return theta * (hi - lo) - 0.5 * (hi * hi - lo * lo)


def osc_window_integral(theta: float) -> float:
    return math.fsum(sign * _profile_piece(theta, lo, hi) for sign, lo, hi in _osc_bands(theta))


def singular_window_integral(theta: float) -> float:
    """``-int_0^theta (theta - d) d^{-1/2} dd = -(4/3) theta^{3/2}``."""
    return -4.0 / 3.0 * theta**1.5


def osc_integrand(s: float, t: float) -> float:
    """Piecewise +-1 integrand on diagonal bands (for independent quadrature)."""
    r = (t - s) / math.sqrt(2.0)
    if r <= 0 or r >= 1:
        return 0.0
    n = max(1, int(math.floor(-math.log(r / 2.0) / math.log(3.0))))
    for m in (n - 1, n, n + 1):
        if m < 1:
            continue
        a, ap = osc_band_edge(m), osc_band_edge(m - 1)
        if a / 2 <= r < a:
            return 1.0
        if a <= r < ap / 2:
            return -1.0
    return 0.0


def singular_integrand(s: float, t: float) -> float:
    return -1.0 / math.sqrt(t - s) if t > s else 0.0


def osc_theta_sequence(kind: str, n_max: int) -> np.ndarray:
    """``theta_n = sqrt2 a_{n-1} / 2`` (``kind="half"``) or ``sqrt2 a_n`` (``kind="full"``), ``n = 1..n_max``."""
    r = math.sqrt(2.0)
    if kind == "half":
        return np.array([r * osc_band_edge(n - 1) / 2 for n in range(1, n_max + 1)])
    if kind == "full":
        return np.array([r * osc_band_edge(n) for n in range(1, n_max + 1)])
    raise ConfigError(f"unknown theta sequence {kind!r}")


def counterexample_ratio(which: str, tau: float, thetas) -> LadderTrace:
    """``r(theta) = theta^-2 int_tau^{tau+theta} int_tau^t phi(s, t) ds dt`` by exact band accounting."""
    if which == "osc":
        horizon, integral = OSC_HORIZON, osc_window_integral
    elif which == "singular":
        horizon, integral = SINGULAR_HORIZON, singular_window_integral
    else:
        raise ConfigError(f"unknown counterexample {which!r}")
    thetas = np.asarray(thetas, dtype=float)
    vals = []
    for theta in thetas:
        if theta <= 0 or tau < 0 or tau + theta > horizon * (1 + 1e-15):
            raise DomainError(f"window [{tau}, {tau + theta}] is outside [0, {horizon}]")
        vals.append(integral(theta) / theta**2)
    return LadderTrace(thetas, np.array(vals), np.zeros(len(vals)), which)


class SyntheticKernel:
    """Kernel given in closed form, ``fn(s, t) -> (n,)``, with the interface of :class:`MartingaleKernel`."""

    def __init__(self, fn: Callable, paths: int, dt: float, s_start: int, t_end: int):
        self.fn, self.paths, self.dt = fn, paths, dt
        self.s_start, self.t_end = s_start, t_end

    def values(self, j: int) -> np.ndarray:
        rows = [np.atleast_1d(np.asarray(self.fn(j * self.dt, k * self.dt), float))
                for k in range(j + 1, self.t_end + 1)]
        return np.broadcast_to(np.stack(rows), (self.paths, len(rows), rows[0].size))

    def is_zero(self) -> bool:
        return all(not np.any(self.values(j)) for j in range(self.s_start, self.t_end))
