"""Command-line front end: ``scl validate|simulate|adjoint|check|reproduce``.

Exit codes: 0 success (a violated condition is a result, not a failure),
1 a reproduction assertion failed, 2 usage or configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .adjoint import solve_adjoints, solve_lq_riccati
from .conditions import (ConditionReport, cost_expansion_check, default_tau_grid, default_v_grid,
                         integral_type_test, needle_first_order_test, pointwise_malliavin_test,
                         pointwise_martingale_test, theta_ladder)
from .errors import AdmissibilityError, ConfigError, SCLError, StructureError
from .forward import (PerturbationSpec, TimeGrid, estimate_cost, perturbation_order_check,
                      simulate_fundamental, simulate_state)
from .hamiltonian import build_kernel_frames, classical_singularity_check, s_integrability_diagnostic
from .malliavin import counterexample_ratio, osc_theta_sequence, zero_plugin
from .presets import PRESETS, example33, example34, load_problem, problem_from_dict, sine_drift
from .problem import AdmissibleControl, ControlProblem, make_lq_problem, validate_problem

MIN_PATHS, MIN_STEPS = 100, 16
REPRODUCE_IDS = ("example33", "example34", "lq-riccati", "counterexample-osc", "counterexample-singular",
                 "prop31-slopes", "expansion33")


# ---------------------------------------------------------------------------
# configuration


def _decreasing(name, seq):
    a = np.asarray(seq, dtype=float)
    if a.ndim != 1 or a.size == 0 or np.any(a <= 0) or np.any(np.diff(a) >= 0):
        raise ConfigError(f"{name} must be a strictly decreasing list of positive numbers, got {seq}")


@dataclass
class RunConfig:
    """Run parameters; ``echo`` is the merged document written into every report."""

    problem: object = "example33"
    control: Optional[list] = None
    paths: int = 10000
    steps: int = 256
    seed: int = 0
    eps_ladder: list = field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025])
    theta_ladder: Optional[list] = None
    tau_grid: Optional[list] = None
    v_grid: Optional[list] = None
    method: str = "auto"
    degree: int = 2
    k: float = 3.0
    order: int = 2
    form: str = "martingale"
    plugins: Optional[str] = None
    out: str = "scl-out"
    base_dir: str = "."

    _KEYS = ("problem", "control", "paths", "steps", "seed", "eps_ladder", "theta_ladder", "tau_grid", "v_grid",
             "method", "degree", "k", "order", "form", "plugins", "out")

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str = ".") -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(doc) - set(cls._KEYS)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(doc), base_dir=base_dir)
        cfg.check()
        return cfg

    def check(self) -> None:
        try:
            self.paths, self.steps, self.seed = int(self.paths), int(self.steps), int(self.seed)
            self.degree, self.order, self.k = int(self.degree), int(self.order), float(self.k)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad numeric setting: {exc}") from None
        if self.paths < MIN_PATHS:
            raise ConfigError(f"paths = {self.paths} is below the floor {MIN_PATHS}")
        if self.steps < MIN_STEPS:
            raise ConfigError(f"steps = {self.steps} is below the floor {MIN_STEPS}")
        _decreasing("eps_ladder", self.eps_ladder)
        if self.theta_ladder is not None:
            _decreasing("theta_ladder", self.theta_ladder)
        if self.method not in ("auto", "analytic", "regression"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.order not in (1, 2):
            raise ConfigError("order must be 1 or 2")
        if self.form not in ("integral", "martingale", "malliavin"):
            raise ConfigError(f"unknown form {self.form!r}")
        if self.plugins not in (None, "deterministic"):
            raise ConfigError(f"unknown plug-in set {self.plugins!r}")
        if self.k <= 0:
            raise ConfigError("verdict gate k must be positive")

    def echo(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self._KEYS}

    def load_problem(self) -> ControlProblem:
        prob = self.problem
        if isinstance(prob, dict):
            return problem_from_dict(prob)
        if isinstance(prob, str):
            if prob in PRESETS:
                return PRESETS[prob]()
            path = Path(prob)
            if not path.is_absolute():
                path = Path(self.base_dir) / path
            return load_problem(path)
        raise ConfigError("problem must be a preset name, a file path or an inline object")

    def reference_control(self, p: ControlProblem) -> AdmissibleControl:
        u = np.zeros(p.m) if self.control is None else np.asarray(self.control, dtype=float)
        if u.shape != (p.m,):
            raise ConfigError(f"control must have {p.m} entries")
        if not p.control_set.contains(u):
            raise AdmissibilityError(f"reference control {u.tolist()} is outside the control set")
        return AdmissibleControl.constant(u)


def _config_from_args(args) -> RunConfig:
    doc, base = {}, "."
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {args.config}: {exc}") from None
        base = str(Path(args.config).parent)
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    for key in ("paths", "steps", "seed", "order", "form", "out"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    if getattr(args, "preset", None):
        doc["problem"] = args.preset
    return RunConfig.from_dict(doc, base)


# ---------------------------------------------------------------------------
# output helpers


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


class _Timer:
    """Wall-clock seconds per named stage."""

    def __init__(self):
        self.stages = {}

    @contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = time.perf_counter() - t0


def _envelope(kind: str, cfg_echo: dict, body: dict) -> dict:
    return {"artifact": "scl", "artifact_version": __version__, "command": kind, "config_echo": cfg_echo, **body}


# ---------------------------------------------------------------------------
# pipeline commands


def cmd_validate(cfg: RunConfig) -> int:
    p = cfg.load_problem()
    rep = validate_problem(p, seed=cfg.seed)
    doc = _envelope("validate", cfg.echo(), {
        "problem": p.name, "passed": rep.passed, "failures": rep.failures(), "residuals": rep.residuals,
        "symmetry": rep.symmetry, "bounds": rep.bounds, "set_checks": rep.set_checks, "tolerance": rep.tolerance})
    _write_json(Path(cfg.out) / "validation.json", doc)
    print(f"validate {p.name}: {'passed' if rep.passed else 'FAILED'}")
    for line in rep.failures():
        print(f"  {line}")
    return 0 if rep.passed else 3


def cmd_simulate(cfg: RunConfig) -> int:
    p = cfg.load_problem()
    u = cfg.reference_control(p)
    timer = _Timer()
    with timer("simulate"):
        mean, se, bundle = estimate_cost(p, u, TimeGrid(cfg.steps, p.horizon), cfg.paths, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle.save(out / "bundle.sclb")
    _write_json(out / "simulate.json", _envelope("simulate", cfg.echo(), {"cost": mean, "cost_stderr": se}))
    _write_json(out / "timings.json", timer.stages)
    print(f"J = {mean:.6g} +/- {se:.2g}")
    return 0


def cmd_adjoint(cfg: RunConfig) -> int:
    p = cfg.load_problem()
    u = cfg.reference_control(p)
    timer = _Timer()
    with timer("simulate"):
        bundle = simulate_state(p, u, TimeGrid(cfg.steps, p.horizon), cfg.paths, cfg.seed)
    with timer("adjoint"):
        adj = solve_adjoints(p, bundle, method=cfg.method, degree=cfg.degree, ubar=u)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    adj.to_csv(out / "adjoint.csv")
    body = {"method": adj.method, "basis": adj.basis_spec, "p2_asymmetry": adj.asymmetry}
    _write_json(out / "adjoint.json", _envelope("adjoint", cfg.echo(), body))
    _write_json(out / "timings.json", timer.stages)
    print(f"adjoints solved ({adj.method}); written to {out / 'adjoint.csv'}")
    return 0


def _plugins(cfg: RunConfig, frames):
    if cfg.plugins != "deterministic":
        return None, None
    for name, arr in (("S", frames.S), ("ubar", frames.ubar)):
        a = np.asarray(arr)
        if not (np.all(a == a[:1]) and np.all(a == a[:, :1])):
            raise ConfigError(f"plug-in set 'deterministic' needs a path-constant {name}")
    m, n = frames.S.shape[2:]
    return zero_plugin((m, n), "S"), zero_plugin((m,), "ubar")


def run_check(cfg: RunConfig, timer: Optional[_Timer] = None) -> dict:
    """validate, simulate, adjoints, frames, singularity and the selected condition tests."""
    timer = timer or _Timer()
    p = cfg.load_problem()
    u = cfg.reference_control(p)
    grid = TimeGrid(cfg.steps, p.horizon)
    with timer("validate"):
        val = validate_problem(p, seed=cfg.seed)
    if not val.passed:
        raise StructureError("problem validation failed: " + "; ".join(val.failures()))
    with timer("simulate"):
        bundle = simulate_state(p, u, grid, cfg.paths, cfg.seed)
    with timer("adjoint"):
        adj = solve_adjoints(p, bundle, method=cfg.method, degree=cfg.degree, ubar=u)
    with timer("frames"):
        frames = build_kernel_frames(p, bundle, adj)
        sing = classical_singularity_check(frames, k=cfg.k)
    thetas = np.asarray(cfg.theta_ladder if cfg.theta_ladder is not None else theta_ladder(p.horizon / 8))
    taus = (np.asarray(cfg.tau_grid, float) if cfg.tau_grid is not None
            else default_tau_grid(grid, float(thetas.max())))
    vs = ([np.atleast_1d(np.asarray(v, float)) for v in cfg.v_grid] if cfg.v_grid is not None
          else default_v_grid(p, frames))
    with timer("first-order"):
        first = needle_first_order_test(frames, taus, vs, k=cfg.k)
    result = {"adjoint": adj, "frames": frames, "singularity": sing, "first": first, "second": None}
    if cfg.order == 2:
        with timer(f"second-order-{cfg.form}"):
            if cfg.form == "integral":
                cells = []
                for v in vs:
                    pert = PerturbationSpec.towards(AdmissibleControl.constant(v))
                    rep = integral_type_test(p, bundle, frames, pert, sing, k=cfg.k)
                    if not rep.applicable:
                        cells = None
                        second = rep
                        break
                    cells += [c for c in rep.cells]
                    for c in rep.cells:
                        c.v = np.atleast_1d(v).tolist()
                if cells is not None:
                    second = ConditionReport("integral", cells)
            elif cfg.form == "martingale":
                fmp = simulate_fundamental(p, bundle)
                second = pointwise_martingale_test(p, bundle, frames, fmp, taus, vs, thetas,
                                                   degree=cfg.degree, k=cfg.k)
            else:
                s_pl, u_pl = _plugins(cfg, frames)
                second = pointwise_malliavin_test(p, bundle, frames, taus, vs, s_pl, u_pl, k=cfg.k)
        if cfg.form != "integral" and not sing.singular:
            second.applicable = False
            second.note = "reference control is not singular; pointwise values are reported for information"
        result["second"] = second
    result["s_integrability"] = s_integrability_diagnostic(frames)
    return result


def _traces_csv(path: Path, traces: dict) -> None:
    with open(path, "w") as fh:
        fh.write("cell,theta,estimate,stderr\n")
        for name, rows in traces.items():
            for r in rows:
                fh.write(f"\"{name}\",{r['theta']!r},{r['estimate']!r},{r['stderr']!r}\n")


def cmd_check(cfg: RunConfig) -> int:
    timer = _Timer()
    res = run_check(cfg, timer)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    res["adjoint"].to_csv(out / "adjoint.csv")
    _write_json(out / "singularity.json", _envelope("check", cfg.echo(), {"singularity": res["singularity"].to_dict()}))
    for key in ("first", "second"):
        rep = res[key]
        if rep is None:
            continue
        rep.config_echo = cfg.echo()
        doc = {"artifact_version": __version__, **rep.to_dict()}
        _write_json(out / f"condition-{rep.condition}.json", doc)
        if "dplus_traces" in rep.diagnostics:
            _traces_csv(out / f"dplus-traces-{rep.condition}.csv", rep.diagnostics["dplus_traces"])
    _write_json(out / "timings.json", timer.stages)
    final = res["second"] if res["second"] is not None else res["first"]
    print(f"singularity: {res['singularity'].verdict}")
    print(f"first-order: {res['first'].global_verdict}")
    if res["second"] is not None:
        print(f"{final.condition}: {final.global_verdict}")
    return 0


# ---------------------------------------------------------------------------
# reproduction


class _Checks:
    def __init__(self):
        self.rows = []

    def add(self, name: str, ok: bool, detail: str) -> None:
        self.rows.append({"check": name, "ok": bool(ok), "detail": detail})

    @property
    def ok(self) -> bool:
        return all(r["ok"] for r in self.rows)


def _repro_example33(cfg, out, checks):
    p = example33()
    run = RunConfig(problem="example33", paths=cfg.paths, steps=cfg.steps, seed=cfg.seed, form="malliavin",
                    plugins="deterministic", v_grid=[[1.0], [0.0], [-1.0]], out=str(out))
    res = run_check(run)
    adj, sing, mall = res["adjoint"], res["singularity"], res["second"]
    checks.add("adjoints (0,0) and (1,0)", np.all(adj.p1 == 0) and np.all(adj.q1 == 0)
               and np.all(np.asarray(adj.p2) == 1) and np.all(np.asarray(adj.q2) == 0), adj.method)
    checks.add("classically singular", sing.singular and max(sing.sup_Hu, sing.sup_Huu_plus) < 1e-12,
               json.dumps(sing.to_dict(), sort_keys=True))
    vals = [c.value for c in mall.cells if c.v == [1.0]]
    checks.add("malliavin form value 1 at v=1", all(v == 1.0 for v in vals), repr(vals))
    run.form = "martingale"
    mart = run_check(run)["second"]
    mvals = [c.value for c in mart.cells if c.v == [1.0]]
    zero = all(c.extra["kernel_zero"] and c.extra["dplus"] == 0.0 for c in mart.cells)
    checks.add("martingale form agrees, dplus identically 0", zero and mvals == vals, repr(mvals))
    grid = TimeGrid(cfg.steps, p.horizon)
    J, se, _ = estimate_cost(p, AdmissibleControl.constant([-1.0]), grid, cfg.paths, cfg.seed)
    checks.add("J(-1) = -1/2 within 3 stderr", abs(J + 0.5) <= 3 * se, f"{J!r} +/- {se!r}")
    mall.config_echo = run.echo()
    _write_json(out / "example33-malliavin.json", mall.to_dict())
    return {"singularity": sing.to_dict(), "malliavin": mall.to_dict(), "J_hat": [J, se]}


def _repro_example34(cfg, out, checks):
    p = example34()
    run = RunConfig(problem="example34", paths=cfg.paths, steps=cfg.steps, seed=cfg.seed, form="martingale",
                    out=str(out))
    res = run_check(run)
    G = p.lq.G
    checks.add("P2 = -G", np.all(np.asarray(res["adjoint"].p2) == -G), "")
    checks.add("classically singular", res["singularity"].singular, "")
    rep = res["second"]
    Bm = p.lq.B(0.0)
    errs, signs = [], []
    for c in rep.cells:
        v = np.asarray(c.v)
        exact = -v @ Bm.T @ G @ Bm @ v
        errs.append(abs(c.value - exact))
        signs.append(c.value <= 0 and (c.value == 0) == (v[0] == 0))
    checks.add("value = -<B'GBv, v> on the grid", max(errs) < 1e-12, f"max error {float(max(errs))!r}")
    checks.add("<= 0 with equality on span(e2)", all(signs), "")
    checks.add("global verdict satisfied", rep.global_verdict == "satisfied", rep.global_verdict)
    rep.config_echo = run.echo()
    _write_json(out / "example34-martingale.json", rep.to_dict())
    return {"martingale": rep.to_dict()}


def _repro_lq_riccati(cfg, out, checks):
    grid = TimeGrid(max(cfg.steps, 64), 1.0)
    p = make_lq_problem(A=0, B=1, C=1, D=0, R=0, M=0, N=1, G=1, horizon=1.0, initial_state=[1.0])
    K, _ = solve_lq_riccati(p, grid)
    exact = -np.exp(1 - grid.times)
    err = float(np.max(np.abs(K[:, 0, 0] - exact)))
    checks.add("P2(t) = -exp(1-t)", err < 1e-8, f"max error {err!r}")
    G = np.array([[2.0, 0.5], [0.5, 1.0]])
    Z = np.zeros((2, 2))
    q = make_lq_problem(A=Z, B=np.eye(2), C=Z, D=Z, R=Z, M=Z, N=np.eye(2), G=G, horizon=1.0,
                        initial_state=[0.0, 0.0])
    K2, _ = solve_lq_riccati(q, grid)
    checks.add("A=C=R=0 gives P2 = -G", np.all(K2 == -G), "")
    with open(out / "lq-riccati.csv", "w") as fh:
        fh.write("t,P2,exact\n")
        for t, a, b in zip(grid.times, K[:, 0, 0], exact):
            fh.write(f"{t!r},{a!r},{b!r}\n")
    return {"max_error": err}


def _repro_osc(cfg, out, checks):
    res = {}
    for kind, limit in (("half", 1 / 8), ("full", 5 / 32)):
        tr = counterexample_ratio("osc", 0.0, osc_theta_sequence(kind, 8))
        tr.to_csv(out / f"counterexample-osc-{kind}.csv")
        err = abs(tr.estimate[-1] - limit)
        checks.add(f"osc subsequence -> {limit!r}", err < 1e-6, f"r(theta_8) = {float(tr.estimate[-1])!r}")
        res[kind] = tr.rows()
    return res


def _repro_singular(cfg, out, checks):
    thetas = np.array([1e-1, 1e-2, 1e-3])
    tr = counterexample_ratio("singular", 0.0, thetas)
    tr.to_csv(out / "counterexample-singular.csv")
    exact = -(4.0 / 3.0) / np.sqrt(thetas)
    rel = np.abs(tr.estimate / exact - 1)
    checks.add("r = -(4/3) theta^(-1/2)", float(rel.max()) < 1e-6, f"max relative error {float(rel.max())!r}")
    return {"trace": tr.rows()}


def _repro_prop31(cfg, out, checks):
    p = sine_drift()
    rep = perturbation_order_check(p, AdmissibleControl.constant([0.0]), PerturbationSpec.convex([1.0]),
                                   [0.2, 0.1, 0.05, 0.025], TimeGrid(1024, p.horizon), 10000, cfg.seed)
    bands = {"dx": (0.9, 1.1), "dx-eps*y1": (1.8, 2.2), "dx-eps*y1-eps^2*y2/2": (2.7, 3.3)}
    for key, (lo, hi) in bands.items():
        s = rep.slopes[key]
        checks.add(f"slope {key} in [{lo}, {hi}]", lo <= s <= hi, f"{float(s)!r}")
    with open(out / "prop31-slopes.csv", "w") as fh:
        fh.write("eps," + ",".join(bands) + "\n")
        for i, e in enumerate(rep.eps):
            fh.write(f"{e!r}," + ",".join(repr(float(rep.norms[k][i])) for k in bands) + "\n")
    return rep.to_dict()


def _repro_expansion33(cfg, out, checks):
    p = example33()
    rep = cost_expansion_check(p, AdmissibleControl.constant([0.0]), PerturbationSpec.convex([1.0]),
                               [0.2, 0.1, 0.05, 0.025], TimeGrid(cfg.steps, p.horizon), max(cfg.paths, 20000),
                               cfg.seed)
    gap = abs(rep.delta_J[-1] / rep.eps[-1] ** 2 + 0.5)
    checks.add("|Delta J/eps^2 + 1/2| < 0.05 at the smallest eps", gap < 0.05, f"{float(gap)!r}")
    checks.add("prediction = -eps^2/2", np.allclose(rep.prediction, -0.5 * rep.eps**2, atol=0.05 * rep.eps**2),
               repr(rep.prediction.tolist()))
    with open(out / "expansion33.csv", "w") as fh:
        fh.write("eps,delta_J,delta_J_stderr,prediction,residual_over_eps2,residual_stderr\n")
        for row in zip(rep.eps, rep.delta_J, rep.delta_J_stderr, rep.prediction, rep.residual, rep.residual_stderr):
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    return rep.to_dict()


_REPRO = {"example33": _repro_example33, "example34": _repro_example34, "lq-riccati": _repro_lq_riccati,
          "counterexample-osc": _repro_osc, "counterexample-singular": _repro_singular,
          "prop31-slopes": _repro_prop31, "expansion33": _repro_expansion33}


def cmd_reproduce(example_id: str, cfg: RunConfig) -> int:
    if example_id not in _REPRO:
        print(f"unknown example id {example_id!r}; choose from {', '.join(REPRODUCE_IDS)}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    checks = _Checks()
    timer = _Timer()
    with timer(example_id):
        body = _REPRO[example_id](cfg, out, checks)
    doc = _envelope("reproduce", cfg.echo(), {"example": example_id, "checks": checks.rows, "ok": checks.ok,
                                               "results": body})
    _write_json(out / f"{example_id}.json", doc)
    _write_json(out / "timings.json", timer.stages)
    for r in checks.rows:
        print(f"[{'PASS' if r['ok'] else 'FAIL'}] {example_id}: {r['check']}" + (f"  ({r['detail']})" if r["detail"] else ""))
    return 0 if checks.ok else 1


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scl", description="Second-order necessary conditions for stochastic control.")
    ap.add_argument("--version", action="version", version=f"scl {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="JSON run configuration")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="use a named problem instead of the config's")
        sp.add_argument("--paths", type=int, metavar="P")
        sp.add_argument("--steps", type=int, metavar="N")
        sp.add_argument("--seed", type=int, metavar="S")
        sp.add_argument("--out", metavar="DIR")

    for name in ("validate", "simulate", "adjoint"):
        common(sub.add_parser(name))
    chk = sub.add_parser("check")
    common(chk)
    chk.add_argument("--order", type=int, choices=(1, 2))
    chk.add_argument("--form", choices=("integral", "martingale", "malliavin"))
    rep = sub.add_parser("reproduce")
    rep.add_argument("example_id", metavar="EXAMPLE_ID", help=", ".join(REPRODUCE_IDS))
    common(rep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "reproduce":
            return cmd_reproduce(args.example_id, cfg)
        return {"validate": cmd_validate, "simulate": cmd_simulate, "adjoint": cmd_adjoint,
                "check": cmd_check}[args.command](cfg)
    except (ConfigError, StructureError, AdmissibilityError) as exc:
        print(f"scl: configuration error [{exc.module}]: {exc}", file=sys.stderr)
        return 2
    except SCLError as exc:
        print(f"scl: numerical failure [{exc.module}]: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
