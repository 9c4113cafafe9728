"""Command line driver: ``beliefpic <command> --scenario FILE --out DIR``.

Exit codes: 0 success, 1 failed checks, 2 parse error, 3 validation error,
4 infeasibility, 5 numerical failure. Errors are reported on stderr as one
JSON object with ``error`` and ``exit_code`` keys.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from importlib import resources

import jsonschema
import numpy as np

from beliefpic import __version__
from beliefpic import scenario as scn
from beliefpic.checks import run_checks
from beliefpic.covariance import TOL_MATCH, _fmt, feasibility_horizon, matching_target, propagate_cov, selector
from beliefpic.errors import (DegenerateWeights, InfeasibleHorizon, InvalidArgument, MatchingInfeasible,
                              PositivityViolation)
from beliefpic.model import Scalar
from beliefpic.oracle import lqg_solve, pde_bounds, solve_scalar_pde
from beliefpic.pic import estimate_control, estimate_psi, receding_horizon_control, write_value_sweep
from beliefpic.sampler import simulate_closed_loop

COMMANDS = {
    "simulate": "simulate",
    "value": "value_sweep",
    "control": "control",
    "oracle": "oracle",
    "check": "check",
    "compare": "baseline_compare",
}

EXIT_CHECKS, EXIT_PARSE, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_NUMERICAL = 1, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def bundled_scenario(name: str) -> str:
    """Path of a scenario file shipped with the package (``name`` without ``.json``)."""
    return str(resources.files("beliefpic") / "scenarios" / f"{name}.json")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (str, int)) else _fmt(v) for v in row])


def _lqg_controller(model, sc):
    sol = lqg_solve(model, sc["Sigma0"], substeps=4)
    return lambda t, belief: sol.feedback(t, belief.mu)


def _closed_loop(model, sc, seed, workers, sensing_mode, u_fixed=None):
    exp = sc["experiment"]
    belief = scn.initial_belief(sc)
    if exp.get("controller", "pic") == "pic":
        return receding_horizon_control(model, sc["x0"], belief, exp["replan_every"], exp["paths"], seed,
                                        method=exp["method"], workers=workers, sensing_mode=sensing_mode,
                                        u_fixed=u_fixed)
    if exp["controller"] == "lqg":
        ctrl = _lqg_controller(model, sc)
    else:
        ctrl = lambda t, belief: np.zeros(model.ell_a)
    return simulate_closed_loop(model, sc["x0"], belief, ctrl, seed, sensing_mode=sensing_mode, u_fixed=u_fixed)


def _run_simulate(model, sc, out, workers):
    exp = sc["experiment"]
    u_fixed = None
    if exp["sensing_mode"] == "fixed":
        u_fixed = np.ones(model.ell_s)
    rec = _closed_loop(model, sc, sc["seed"], workers, exp["sensing_mode"], u_fixed)
    rec.to_csv(os.path.join(out, "closed_loop.csv"))
    if rec.status != "ok":
        raise MatchingInfeasible(rec.failure_time, rec.Sigma_path[-1], np.nan,
                                 f"selector infeasible at t={rec.failure_time:.6g}")
    return [
        f"controller = {exp['controller']}",
        f"steps = {len(rec.times) - 1}",
        f"realized_cost = {rec.realized_cost!r}",
        f"realized_cost_belief = {rec.realized_cost_belief!r}",
        f"final_Sigma_trace = {float(np.trace(rec.Sigma_path[-1]))!r}",
    ]


def _run_value(model, sc, out, workers):
    exp = sc["experiment"]
    Sigma = _sigma_at(model, sc, exp["t"])
    ests = []
    seeds = np.random.SeedSequence(sc["seed"]).generate_state(len(exp["mu_points"]))
    for mu, s in zip(exp["mu_points"], seeds):
        ests.append(estimate_psi(exp["t"], scn.Belief(mu, Sigma), model, exp["paths"], int(s), workers=workers))
    write_value_sweep(os.path.join(out, "value_sweep.csv"), ests)
    return [f"points = {len(ests)}", f"paths = {exp['paths']}"] + [
        f"V(t={e.t!r}, mu={list(map(float, e.mu))}) = {e.value!r} +/- {e.value_stderr!r}" for e in ests]


def _run_control(model, sc, out, workers):
    exp = sc["experiment"]
    Sigma = _sigma_at(model, sc, exp["t"])
    seeds = np.random.SeedSequence(sc["seed"]).generate_state(len(exp["mu_points"]))
    ests = [estimate_control(exp["t"], scn.Belief(mu, Sigma), model, exp["paths"], int(s),
                             method=exp["method"], workers=workers)
            for mu, s in zip(exp["mu_points"], seeds)]
    n, la = model.n, model.ell_a
    header = (["t"] + [f"mu_{i}" for i in range(n)] + [f"u_a_{i}" for i in range(la)]
              + [f"stderr_{i}" for i in range(la)] + ["psi_hat", "method"])
    _write_csv(os.path.join(out, "control.csv"), header,
               [[e.t, *e.mu, *e.u, *e.stderr, e.psi_hat, e.method] for e in ests])
    return [f"points = {len(ests)}", f"paths = {exp['paths']}"] + [
        f"u_a(mu={list(map(float, e.mu))}) = {list(map(float, e.u))} +/- {list(map(float, e.stderr))}" for e in ests]


def _sigma_at(model, sc, t):
    k = model.grid_index(t)
    if k == 0:
        return np.asarray(sc["Sigma0"], dtype=float)
    cov = propagate_cov(sc["Sigma0"], model, "selector")
    if not np.isfinite(cov.Sigmas[k]).all():
        raise MatchingInfeasible(cov.feasible_until, np.asarray(sc["Sigma0"]), np.nan,
                                 f"selector infeasible before t={t:.6g}")
    return cov.Sigmas[k]


def _scalar_closed_form(model):
    return (model.n == 1 and isinstance(model.sensing, Scalar) and model.time_invariant
            and float(model.A_at(0)[0, 0]) == 0.0)


def _run_oracle(model, sc, out, workers):
    exp = sc["experiment"]
    lines = []
    dstar = matching_target(model)
    lines.append(f"D_star = {dstar.ravel().tolist()}")
    cov = propagate_cov(sc["Sigma0"], model, "selector")
    cov.to_csv(os.path.join(out, "covariance.csv"))
    if _scalar_closed_form(model):
        decay = float(dstar[0, 0] - model.Q[0, 0])
        s0 = float(np.asarray(sc["Sigma0"])[0, 0])
        t_star = s0 / decay if decay > 0 else float("inf")
        lines.append(f"t_star = {t_star!r}")
    horizon = float(feasibility_horizon(sc["Sigma0"], model, u_max=exp["u_max"]))
    lines.append(f"feasibility_horizon = {horizon!r}")
    if not cov.feasible:
        lines.append(f"selector feasible until t = {cov.feasible_until!r}")
        err = InfeasibleHorizon(cov.feasible_until, model.T)
        err.lines = lines
        raise err
    lqg = lqg_solve(model, sc["Sigma0"], substeps=exp["lqg_substeps"])
    if model.n == 1 and _scalar_closed_form(model):
        pde = exp["pde"]
        qmin = pde.get("query_min", float(sc["mu0"][0]) - 2.0)
        qmax = pde.get("query_max", float(sc["mu0"][0]) + 2.0)
        lo, hi = pde_bounds(model, qmin, qmax)
        J = int(np.ceil((hi - lo) / pde["dmu"])) + 1
        K = max(1, int(round(model.T / pde["dt"])))
        grid = solve_scalar_pde(model, sc["Sigma0"], lo, hi, J, K, scheme=pde["scheme"])
        grid.to_csv(os.path.join(out, "pde.csv"))
        mask = (grid.mu >= qmin) & (grid.mu <= qmax)
        err = float(np.max(np.abs(grid.value[0, mask] - lqg.value(0.0, grid.mu[mask]))))
        lines.append(f"pde_vs_lqg_max_abs_value_error_t0 = {err!r}")
        lqg.to_csv(os.path.join(out, "lqg.csv"), grid.mu[mask])
    else:
        n = model.n
        header = (["t"] + [f"P_{i}{j}" for i in range(n) for j in range(n)] + [f"b_{i}" for i in range(n)] + ["c"])
        _write_csv(os.path.join(out, "lqg.csv"), header,
                   [[t, *lqg.P[k].ravel(), *lqg.b[k], lqg.c[k]] for k, t in enumerate(lqg.times)])
    lines.append(f"V_lqg(0, mu0) = {float(lqg.value(0.0, np.asarray(sc['mu0']).reshape(1, -1))[0])!r}")
    return lines


def _run_compare(model, sc, out, workers):
    """Selector-driven sensing versus sensing held at its initial selector value."""
    exp = sc["experiment"]
    u0 = selector(0.0, np.asarray(sc["Sigma0"], dtype=float), model)
    seeds = np.random.SeedSequence(sc["seed"]).generate_state(exp["seeds"])
    rows, diffs = [], []
    for s in seeds:
        a = _closed_loop(model, sc, int(s), workers, "selector")
        b = _closed_loop(model, sc, int(s), workers, "fixed", u_fixed=u0)
        if a.status != "ok":
            raise MatchingInfeasible(a.failure_time, a.Sigma_path[-1], np.nan, "selector infeasible in comparison run")
        rows.append([int(s), a.realized_cost, b.realized_cost, a.realized_cost - b.realized_cost])
        diffs.append(a.realized_cost - b.realized_cost)
    _write_csv(os.path.join(out, "compare.csv"), ["seed", "cost_selector", "cost_fixed", "difference"], rows)
    d = np.array(diffs)
    se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else float("nan")
    return [f"runs = {d.size}", f"fixed_sensing = {list(map(float, u0))}",
            f"mean_cost_selector = {float(np.mean([r[1] for r in rows]))!r}",
            f"mean_cost_fixed = {float(np.mean([r[2] for r in rows]))!r}",
            f"mean_difference = {float(d.mean())!r} +/- {se!r}"]


RUNNERS = {
    "simulate": _run_simulate,
    "value_sweep": _run_value,
    "control": _run_control,
    "oracle": _run_oracle,
    "baseline_compare": _run_compare,
}


def _manifest(sc, args):
    return {
        "scenario": sc,
        "meta": {"package": "beliefpic", "version": __version__, "threads": args.threads},
    }


def run_scenario(path, out_dir, kind=None, seed=None, paths=None, threads=1) -> int:
    """Library entry equivalent to ``beliefpic run``; returns the exit code."""
    argv = ["run", "--scenario", str(path), "--out", str(out_dir), "--threads", str(threads)]
    if kind is not None:
        argv[0] = {v: k for k, v in COMMANDS.items()}[kind]
    if seed is not None:
        argv += ["--seed", str(seed)]
    if paths is not None:
        argv += ["--paths", str(paths)]
    return main(argv)


def _load(args, kind):
    try:
        raw = scn.load(args.scenario)
    except FileNotFoundError as err:
        raise CliError(EXIT_PARSE, "parse", f"scenario file not found: {err.filename}")
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise CliError(EXIT_PARSE, "parse", f"malformed JSON: {err}")
    try:
        return scn.resolve(raw, kind=kind, seed=args.seed, paths=args.paths)
    except jsonschema.ValidationError as err:
        loc = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise CliError(EXIT_VALIDATION, "validation", f"{loc}: {err.message}")
    except (InvalidArgument, ValueError) as err:
        raise CliError(EXIT_VALIDATION, "validation", str(err))


def _run_check_command(args, sc) -> int:
    level = args.level or (sc["experiment"]["level"] if sc else "fast")
    tol = args.tol_match if args.tol_match is not None else (sc["experiment"]["tol_match"] if sc else TOL_MATCH)
    seed = args.seed if args.seed is not None else (sc["seed"] if sc else None)
    results = run_checks(level=level, tol_match=tol, workers=args.threads, seed=seed)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_csv(os.path.join(args.out, "checks.csv"), ["key", "name", "passed"],
                   [[r.key, r.name, "true" if r.passed else "false"] for r in results])
        with open(os.path.join(args.out, "summary.txt"), "w") as fh:
            fh.write("".join(r.line() + "\n" for r in results))
        if sc is not None:
            with open(os.path.join(args.out, "manifest.json"), "w") as fh:
                json.dump(_manifest(sc, args), fh, indent=2, sort_keys=True)
    failed = [r.key for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_CHECKS if failed else 0


def _write_summary(out, lines):
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _dispatch(args) -> int:
    kind = COMMANDS.get(args.command)
    if args.command == "check" and args.scenario is None:
        return _run_check_command(args, None)
    if args.scenario is None:
        raise CliError(EXIT_PARSE, "parse", "--scenario is required")
    if args.out is None and args.command != "check":
        raise CliError(EXIT_PARSE, "parse", "--out is required")
    sc = _load(args, kind)
    if args.tol_match is not None and sc["experiment"]["kind"] == "check":
        sc["experiment"]["tol_match"] = args.tol_match
    if args.level is not None and sc["experiment"]["kind"] == "check":
        sc["experiment"]["level"] = args.level
    if sc["experiment"]["kind"] == "check":
        return _run_check_command(args, sc)
    model = scn.build_model(sc)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(_manifest(sc, args), fh, indent=2, sort_keys=True)
    header = [f"kind = {sc['experiment']['kind']}", f"seed = {sc['seed']}"]
    try:
        lines = RUNNERS[sc["experiment"]["kind"]](model, sc, args.out, args.threads)
    except (MatchingInfeasible, InfeasibleHorizon) as err:
        lines = getattr(err, "lines", []) + [f"status = infeasible: {err}"]
        _write_summary(args.out, header + lines)
        raise
    _write_summary(args.out, header + lines)
    print("\n".join(header + lines))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_PARSE, "parse", message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario JSON file (a manifest.json also works)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--paths", type=int, help="override the number of Monte Carlo paths")
    common.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    common.add_argument("--level", choices=("fast", "full"), help="check level")
    common.add_argument("--tol-match", dest="tol_match", type=float, help="matching residual tolerance for checks")
    parser = _Parser(prog="beliefpic", description="Sensing-aware path-integral control experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "run": "run the experiment kind named in the scenario",
        "simulate": "closed-loop simulation",
        "value": "Monte Carlo value sweep",
        "control": "Monte Carlo control estimates",
        "oracle": "covariance schedule, feasibility horizon, PDE and LQG oracles",
        "check": "run the invariant and acceptance checks",
        "compare": "selector sensing versus fixed sensing over many seeds",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def _fail(code, kind, message) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise CliError(EXIT_PARSE, "parse", "--threads must be >= 1")
        if args.paths is not None and args.paths < 2:
            raise CliError(EXIT_VALIDATION, "validation", "--paths must be >= 2")
        return _dispatch(args)
    except CliError as err:
        return _fail(err.code, err.kind, str(err))
    except (MatchingInfeasible, InfeasibleHorizon) as err:
        return _fail(EXIT_INFEASIBLE, "infeasible", str(err))
    except (DegenerateWeights, PositivityViolation, FloatingPointError, np.linalg.LinAlgError) as err:
        return _fail(EXIT_NUMERICAL, "numerical", str(err))
    except InvalidArgument as err:
        return _fail(EXIT_VALIDATION, "validation", str(err))


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
