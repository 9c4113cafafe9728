"""Acceptance criteria as executable checks.

Each check returns a :class:`CheckResult`; ``run_checks`` runs the registry at
either the ``fast`` (seconds) or ``full`` (acceptance) level and prints one
line per criterion. Tolerances are fixed here and never calibrated at run time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from beliefpic.covariance import (
    TOL_MATCH,
    Belief,
    feasibility_horizon,
    matching_target,
    propagate_cov,
    selector,
    solve_matching,
)
from beliefpic.model import Affine, ModelSpec, QuadraticCost, Scaled, scalar_model, sensing_D
from beliefpic.oracle import lqg_solve, pde_bounds, solve_scalar_pde
from beliefpic.pic import estimate_control, estimate_psi, martingale_check
from beliefpic.sampler import simulate_closed_loop


@dataclass
class CheckResult:
    key: str
    name: str
    passed: bool
    detail: str
    elapsed: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.key} {self.name}: {self.detail} ({self.elapsed:.2f}s)"


@dataclass
class Context:
    level: str = "full"
    tol_match: float = TOL_MATCH
    workers: int = 1
    seed: int = 20260101

    @property
    def full(self) -> bool:
        return self.level == "full"


def quadratic_example(dt: float = 0.01) -> ModelSpec:
    """Scalar example with q(x) = phi(x) = x^2, lam = R_a = R_o = T = 1."""
    return scalar_model(lam=1.0, R_a=1.0, R_o=1.0, T=1.0, dt=dt, q=(2.0, 0.0, 0.0), phi=(2.0, 0.0, 0.0))


MU_POINTS = np.linspace(-2.0, 2.0, 9)
PDE_DMU = 0.02
PDE_DT = 1e-3


def _pde(model: ModelSpec, Sigma0=1.0, dmu=PDE_DMU, dt=PDE_DT, t0=0.0):
    lo, hi = pde_bounds(model, MU_POINTS[0], MU_POINTS[-1], t0)
    J = int(round((hi - lo) / dmu)) + 1
    K = int(round((model.T - t0) / dt))
    return solve_scalar_pde(model, Sigma0, lo, hi, J, K)


_registry: List = []


def criterion(key: str, name: str):
    def deco(fn):
        _registry.append((key, name, fn))
        return fn
    return deco


def _log_uniform(rng, lo, hi, size=None):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


@criterion("C1", "scalar matching set")
def check_scalar_matching(ctx: Context):
    rng = np.random.default_rng(ctx.seed + 1)
    t0 = time.perf_counter()
    worst, ok = 0.0, True
    for _ in range(100):
        S, lam, R_o, R_a = _log_uniform(rng, 0.1, 10.0, 4)
        model = scalar_model(lam=lam, R_a=R_a, R_o=R_o)
        sol = solve_matching(model.sensing, [[S]], model, ctx.tol_match)
        if len(sol.solutions) != 2:
            ok = False
            continue
        target = np.sqrt(lam * R_o)
        for u, sign in zip(sol.solutions, (1.0, -1.0)):
            err = abs(u[0] * S * np.sqrt(R_a) - sign * target)
            worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = ok and worst <= 1e-10 and elapsed < 1.0
    return ok, f"max |u S sqrt(R_a) - (+/-)sqrt(lam R_o)| = {worst:.2e} (tol 1e-10), runtime {elapsed:.3f}s (< 1s)"


@criterion("C2", "covariance schedule")
def check_cov_schedule(ctx: Context):
    t0 = time.perf_counter()
    errs = {}
    for lam, T in ((0.5, 1.0), (1.0, 1.0), (2.0, 0.5)):
        model = scalar_model(lam=lam, T=T, dt=0.01)
        path = propagate_cov([[1.0]], model, tol_match=ctx.tol_match)
        exact = 1.0 + (1.0 - lam) * T
        errs[lam] = abs(path.Sigmas[-1, 0, 0] - exact) if path.feasible else np.inf
    elapsed = time.perf_counter() - t0
    ok = errs[0.5] <= 1e-8 and errs[2.0] <= 1e-8 and errs[1.0] <= 1e-10 and elapsed < 1.0
    return ok, (f"|Sigma_T - line| = {errs[0.5]:.1e}, {errs[2.0]:.1e} (tol 1e-8); frozen {errs[1.0]:.1e} (tol 1e-10); "
                f"runtime {elapsed:.3f}s")


@criterion("C3", "feasibility horizon")
def check_feasibility(ctx: Context):
    rng = np.random.default_rng(ctx.seed + 3)
    dt = 0.01
    problems = []
    for i in range(20):
        S0 = rng.uniform(0.5, 2.0)
        R_a = rng.uniform(0.5, 2.0)
        R_o = rng.uniform(0.5, 2.0)
        lam = R_a * rng.uniform(1.5, 3.0) if i % 2 == 0 else R_a * rng.uniform(0.2, 1.0)
        model = scalar_model(lam=lam, R_a=R_a, R_o=R_o, T=5.0, dt=dt)
        th = feasibility_horizon([[S0]], model)
        if lam > R_a:
            if th != S0 / (lam / R_a - 1):
                problems.append(f"t* mismatch {th} vs {S0 / (lam / R_a - 1)}")
            fu = propagate_cov([[S0]], model, tol_match=ctx.tol_match).feasible_until
            if abs(fu - th) > 2 * dt:
                problems.append(f"feasible_until {fu} vs t* {th}")
        elif th != model.T:
            problems.append(f"expected global feasibility, got {th}")
        # bounded sensor
        u_max = rng.uniform(0.5, 3.0)
        floor = np.sqrt(lam * R_o / R_a) / u_max
        if np.max(np.abs(selector(0.0, [[floor]], model, ctx.tol_match))) - u_max > 1e-10 * u_max:
            problems.append("selector at the threshold exceeds u_max")
        S0b = floor * rng.uniform(1.05, 2.0)
        tb = feasibility_horizon([[S0b]], model, u_max=u_max)
        fub = propagate_cov([[S0b]], model, tol_match=ctx.tol_match, u_max=u_max).feasible_until
        if abs(tb - fub) > 2 * dt:
            problems.append(f"bounded-sensor horizon {tb} vs propagated {fub}")
    return not problems, "; ".join(problems[:3]) or "t* exact, feasible_until within 2 dt, 20 bounded-sensor configurations agree"


def _fk_vs_pde(ctx: Context, N: int):
    model = quadratic_example()
    grid = _pde(model)
    rows = []
    for mu in MU_POINTS:
        est = estimate_psi(0.0, Belief([mu], [[1.0]]), model, N, ctx.seed, workers=ctx.workers, tol_match=ctx.tol_match)
        ref = float(np.interp(mu, grid.mu, grid.psi[0]))
        rows.append((mu, est, ref))
    return model, grid, rows


@criterion("C4", "Feynman-Kac vs PDE oracle")
def check_fk_vs_pde(ctx: Context):
    N = 100_000 if ctx.full else 20_000
    t0 = time.perf_counter()
    _, _, rows = _fk_vs_pde(ctx, N)
    elapsed = time.perf_counter() - t0
    z = max(abs(e.psi_hat - ref) / e.stderr for _, e, ref in rows)
    return z <= 3.0 and elapsed < 60.0, f"max |psi_hat - psi_pde| / stderr = {z:.2f} (tol 3) over 9 points, N={N}, runtime {elapsed:.1f}s (< 60s)"


@criterion("C5", "PDE / LQG / MC triangle")
def check_triangle(ctx: Context):
    N = 100_000 if ctx.full else 20_000
    model, grid, rows = _fk_vs_pde(ctx, N)
    lqg = lqg_solve(model, 1.0, substeps=10)
    V_lqg = lqg.value(0.0, MU_POINTS)
    V_pde = np.interp(MU_POINTS, grid.mu, grid.value[0])
    tol_pde = max(1e-3, 5 * grid.dmu ** 2)
    e_pde = float(np.max(np.abs(V_pde - V_lqg)))
    z_mc = max(abs(e.value - v) / e.value_stderr for (_, e, _), v in zip(rows, V_lqg))
    return e_pde <= tol_pde and z_mc <= 3.0, f"|V_pde - V_lqg| = {e_pde:.2e} (tol {tol_pde:.1e}); max |V_mc - V_lqg| / stderr = {z_mc:.2f} (tol 3)"


@criterion("C6", "control consistency")
def check_control(ctx: Context):
    N = 100_000 if ctx.full else 20_000
    model = quadratic_example()
    lqg = lqg_solve(model, 1.0, substeps=10)
    mus = np.linspace(-2.0, 2.0, 5)
    times = (0.0, 0.25, 0.5) if ctx.full else (0.0,)
    z_lqg = z_fd = 0.0
    for t in times:
        for mu in mus:
            b = Belief([mu], [[1.0]])
            lr = estimate_control(t, b, model, N, ctx.seed, method="lr", workers=ctx.workers, tol_match=ctx.tol_match)
            fd = estimate_control(t, b, model, N, ctx.seed, method="fd", workers=ctx.workers, tol_match=ctx.tol_match)
            ref = lqg.feedback(t, [mu])
            z_lqg = max(z_lqg, float(np.max(np.abs(lr.u - ref) / lr.stderr)))
            z_fd = max(z_fd, float(np.max(np.abs(lr.u - fd.u) / np.hypot(lr.stderr, fd.stderr))))
    return z_lqg <= 3.0 and z_fd <= 3.0, (f"max |u_lr - u_lqg| / stderr = {z_lqg:.2f}; max |u_lr - u_fd| / combined stderr = {z_fd:.2f} "
                                          f"(tol 3) over {len(mus)} mu x {len(times)} times")


@criterion("C7", "martingale flatness")
def check_martingale(ctx: Context):
    N = 10_000 if ctx.full else 2_000
    model = quadratic_example()
    grid = _pde(model)
    table = martingale_check(0.0, Belief([0.5], [[1.0]]), model, N, [0.2, 0.4, 0.6, 0.8, 1.0], ctx.seed,
                             psi_evaluator=lambda s, mus, S: grid(s, mus), workers=ctx.workers, tol_match=ctx.tol_match)
    z = np.abs(table.m_hat[1:] - table.m_hat[0]) / table.stderr[1:]
    within = bool(np.all(np.abs(table.m_hat) <= table.bound))
    return bool(np.all(z <= 3.0)) and within, f"max |E[M_s] - E[M_t]| / stderr = {np.max(z):.2f} (tol 3) over 5 checkpoints, N={N}"


def _audit_models():
    models = []
    for lam, T in ((0.5, 1.0), (1.0, 1.0), (2.0, 0.5)):
        models.append((f"scalar lam={lam}", scalar_model(lam=lam, T=T, dt=0.01), np.eye(1)))
    models.append(("quadratic example", quadratic_example(), np.eye(1)))
    scaled = ModelSpec(A=np.zeros((2, 2)), B=[[1.0], [0.0]], H=np.eye(2), sigma_o=[[1.0]], R_a=[[1.0]], lam=0.5,
                       sensing=Scaled([[1.0, 0.0]]), q=QuadraticCost.zero(2), phi=QuadraticCost.zero(2), T=1.0, dt=0.05)
    models.append(("scaled n=2", scaled, np.diag([1.0, 2.0])))
    affine = ModelSpec(A=np.zeros((2, 2)), B=[[1.0], [1.0]], H=np.eye(2), sigma_o=[[1.0]], R_a=[[1.0]], lam=0.2,
                       sensing=Affine([[[1.0, 0.0]], [[0.0, 1.0]]]), q=QuadraticCost.zero(2),
                       phi=QuadraticCost.zero(2), T=0.5, dt=0.05)
    models.append(("affine n=2", affine, np.array([[1.0, 0.2], [0.2, 1.5]])))
    return models


@criterion("C8", "cancellation identity audit")
def check_cancellation(ctx: Context):
    worst, points, infeasible = 0.0, 0, []
    for label, model, S0 in _audit_models():
        Dstar = matching_target(model)
        path = propagate_cov(S0, model, tol_match=ctx.tol_match)
        if not path.feasible:
            infeasible.append(label)
        for t, S in zip(path.times, path.Sigmas):
            if not np.all(np.isfinite(S)):
                break
            u = selector(t, S, model, ctx.tol_match)
            worst = max(worst, float(np.linalg.norm(sensing_D(model.sensing, S, u, model.R_o) - Dstar)))
            points += 1
    # closed-loop run on the quadratic example
    model = quadratic_example()
    rec = simulate_closed_loop(model, [0.3], Belief([0.0], [[1.0]]), lambda t, b: np.zeros(1), ctx.seed, tol_match=ctx.tol_match)
    Dstar = matching_target(model)
    for t, S, u in zip(rec.times, rec.Sigma_path, rec.u_s_path):
        worst = max(worst, float(np.linalg.norm(sensing_D(model.sensing, S, u, model.R_o) - Dstar)))
        points += 1
    ok = worst <= 1e-8 and not infeasible
    extra = f"; infeasible: {infeasible}" if infeasible else ""
    return ok, f"max ||D(Sigma, kappa) - D*||_F = {worst:.2e} (tol 1e-8) over {points} grid points{extra}"


@criterion("C9", "matching emptiness (n=2, rank-1 C0)")
def check_emptiness(ctx: Context):
    rng = np.random.default_rng(ctx.seed + 9)
    fails = 0
    worst_ratio = np.inf
    for _ in range(20):
        th = rng.uniform(0, np.pi)
        Rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        B = Rot @ np.diag([1.0, rng.uniform(0.6, 1.0)])
        R_a = np.diag(rng.uniform(0.5, 1.5, 2))
        C0 = rng.normal(size=(1, 2))
        L = rng.normal(size=(2, 2))
        Sigma = L @ L.T + 0.5 * np.eye(2)
        model = ModelSpec(A=np.zeros((2, 2)), B=B, H=np.eye(2), sigma_o=[[rng.uniform(0.5, 2.0)]], R_a=R_a,
                          lam=rng.uniform(0.5, 2.0), sensing=Scaled(C0), q=QuadraticCost.zero(2),
                          phi=QuadraticCost.zero(2), T=1.0, dt=0.1)
        Dstar = matching_target(model)
        sol = solve_matching(model.sensing, Sigma, model, ctx.tol_match)
        ratio = sol.residual / np.linalg.norm(Dstar)
        worst_ratio = min(worst_ratio, ratio)
        if not sol.empty or ratio <= 0.1:
            fails += 1
    return fails == 0, f"{20 - fails}/20 Empty; min residual / ||D*||_F = {worst_ratio:.3f} (> 0.1)"


@criterion("C10", "closed-loop filter consistency")
def check_filter(ctx: Context):
    n_seeds = 500 if ctx.full else 100
    model = scalar_model(lam=0.5, R_a=1.0, R_o=1.0, T=1.0, dt=0.01)
    S0 = 1.0
    t0 = time.perf_counter()
    errs = []
    for i in range(n_seeds):
        x0 = np.random.default_rng([ctx.seed, i]).normal(0.0, np.sqrt(S0), 1)
        rec = simulate_closed_loop(model, x0, Belief([0.0], [[S0]]), lambda t, b: np.zeros(1), ctx.seed + 1000 + i,
                                   tol_match=ctx.tol_match)
        errs.append(rec.x_path[-1, 0] - rec.mu_path[-1, 0])
    elapsed = time.perf_counter() - t0
    errs = np.array(errs)
    Sigma_T = propagate_cov([[S0]], model, tol_match=ctx.tol_match).Sigmas[-1, 0, 0]
    var = np.var(errs, ddof=1)
    se = Sigma_T * np.sqrt(2.0 / (n_seeds - 1))
    z = abs(var - Sigma_T) / se
    return z <= 5.0 and elapsed < 120.0, f"sample var {var:.4f} vs Sigma_T {Sigma_T:.4f}: {z:.2f} stderr (tol 5), {n_seeds} seeds, runtime {elapsed:.1f}s"


@criterion("C11", "determinism across thread counts")
def check_determinism(ctx: Context):
    N = 100_000 if ctx.full else 20_000
    model = quadratic_example()
    same = True
    for mu in MU_POINTS:
        b = Belief([mu], [[1.0]])
        a = estimate_psi(0.0, b, model, N, ctx.seed, workers=1, tol_match=ctx.tol_match)
        c = estimate_psi(0.0, b, model, N, ctx.seed, workers=4, tol_match=ctx.tol_match)
        same = same and a.psi_hat == c.psi_hat and a.stderr == c.stderr
    return same, f"psi_hat bit-identical for workers=1 and workers=4 at 9 points, N={N}"


@criterion("M1", "matching residual bound")
def check_matching_residual(ctx: Context):
    """Every returned matching control must meet the hard 1e-8 residual bound,
    whatever ``tol_match`` the solver was configured with."""
    rng = np.random.default_rng(ctx.seed + 11)
    worst = 0.0
    for i in range(10):
        C0 = np.array([[1.0, 0.0]])
        Sigma = np.diag(rng.uniform(0.5, 2.0, 2))
        B = np.array([[1.0, 0.0], [0.0, 1e-3 * (i % 2)]]) + 0.0
        model = ModelSpec(A=np.zeros((2, 2)), B=B, H=np.eye(2), sigma_o=[[1.0]], R_a=np.eye(2), lam=1.0,
                          sensing=Scaled(C0), q=QuadraticCost.zero(2), phi=QuadraticCost.zero(2), T=1.0, dt=0.1)
        Dstar = matching_target(model)
        sol = solve_matching(model.sensing, Sigma, model, ctx.tol_match)
        for u in sol.solutions:
            worst = max(worst, float(np.linalg.norm(sensing_D(model.sensing, Sigma, u, model.R_o) - Dstar))
                        / max(1.0, float(np.linalg.norm(Dstar))))
    return worst <= 1e-8, f"max relative residual of returned controls = {worst:.2e} (tol 1e-8), tol_match={ctx.tol_match:g}"



def registry() -> Dict[str, tuple]:
    return {key: (name, fn) for key, name, fn in _registry}


def run_check(key: str, ctx: Context) -> CheckResult:
    name, fn = registry()[key]
    t0 = time.perf_counter()
    try:
        passed, detail = fn(ctx)
    except Exception as err:  # a crashing check is a failed check
        passed, detail = False, f"error: {type(err).__name__}: {err}"
    return CheckResult(key, name, bool(passed), detail, time.perf_counter() - t0)


def run_checks(level: str = "fast", tol_match: float = TOL_MATCH, workers: int = 1, seed: Optional[int] = None,
               keys=None, echo: Callable[[str], None] = print) -> List[CheckResult]:
    ctx = Context(level=level, tol_match=tol_match, workers=workers)
    if seed is not None:
        ctx.seed = seed
    results = []
    for key in keys or [k for k, _, _ in _registry]:
        res = run_check(key, ctx)
        echo(res.line())
        results.append(res)
    return results
