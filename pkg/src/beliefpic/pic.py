"""Feynman-Kac estimation of the desirability, the value and the optimal actuation.

With the sensing control pinned to the matching selector, the desirability
``Psi = exp(-V / lam)`` is the expectation of ``exp(-cost / lam)`` over
uncontrolled belief rollouts. Weights are formed after subtracting the
smallest cost so that large ``cost / lam`` does not underflow.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from beliefpic.covariance import Belief, TOL_MATCH, _fmt, matching_target, propagate_cov
from beliefpic.errors import DegenerateWeights, InvalidArgument, MatchingInfeasible
from beliefpic.model import ModelSpec, gaussian_expect
from beliefpic.sampler import ClosedLoopRecord, rollout_augmented, simulate_closed_loop

PSI_FLOOR = 1e-300


@dataclass(frozen=True)
class ValueEstimate:
    psi_hat: float
    stderr: float
    N: int
    t: float
    mu: np.ndarray
    Sigma: np.ndarray
    value: float
    value_stderr: float
    log_psi: float


@dataclass(frozen=True)
class ControlEstimate:
    u: np.ndarray
    stderr: np.ndarray
    grad_V: np.ndarray
    psi_hat: float
    method: str
    t: float
    mu: np.ndarray


@dataclass(frozen=True)
class MartingaleTable:
    checkpoints: np.ndarray
    m_hat: np.ndarray
    stderr: np.ndarray
    bound: float
    N: int

    @property
    def max_drift(self) -> float:
        return float(np.max(np.abs(self.m_hat - self.m_hat[0])))


def _shifted(cost_over_lam: np.ndarray):
    cmin = float(np.min(cost_over_lam))
    return cmin, np.exp(-(cost_over_lam - cmin))


def _std(x, axis=0):
    return np.std(x, axis=axis, ddof=1) if x.shape[axis] > 1 else np.zeros(np.shape(np.take(x, 0, axis=axis)))


def _value_from_costs(cost_over_lam, t, belief, lam) -> ValueEstimate:
    N = cost_over_lam.size
    cmin, w = _shifted(cost_over_lam)
    mean = float(np.mean(w))
    sd = float(_std(w))
    scale = np.exp(-cmin)
    log_psi = -cmin + np.log(mean)
    return ValueEstimate(
        psi_hat=float(scale * mean), stderr=float(scale * sd / np.sqrt(N)), N=N, t=float(t),
        mu=belief.mu, Sigma=belief.Sigma, value=float(-lam * log_psi),
        value_stderr=float(lam * sd / (mean * np.sqrt(N))), log_psi=float(log_psi),
    )


def estimate_psi(t: float, belief: Belief, model: ModelSpec, N: int, rng_seed: int,
                 workers: int = 1, tol_match: float = TOL_MATCH) -> ValueEstimate:
    """Monte Carlo desirability at ``(t, mu, Sigma)`` with its standard error."""
    if N < 1:
        raise InvalidArgument("N must be positive")
    batch = rollout_augmented(t, belief, model, N, rng_seed, workers=workers, keep_paths=False, tol_match=tol_match)
    return _value_from_costs(batch.total_cost / model.lam, t, belief, model.lam)


def _control_map(model: ModelSpec) -> np.ndarray:
    # u* = -R_a^{-1} B^T grad V = lam R_a^{-1} B^T grad log Psi
    return model.lam * np.linalg.solve(model.R_a, model.B.T)


def _lr_gradient(t, belief, model, N, rng_seed, workers, tol_match, psi_floor):
    batch = rollout_augmented(t, belief, model, N, rng_seed, workers=workers, keep_paths=False, tol_match=tol_match)
    c = batch.total_cost / model.lam
    cmin, w = _shifted(c)
    mean_w = float(np.mean(w))
    if -cmin + np.log(mean_w) < np.log(psi_floor):
        raise DegenerateWeights(f"desirability below {psi_floor:g} at t={t:.6g}; increase lambda or N")
    dt = model.dt
    k = model.grid_index(t)
    # Exact derivative of the discretized estimator w.r.t. the initial mean:
    # score of the first Euler step, chained through (I + A dt), minus the
    # half-weight trapezoid term evaluated at mu0.
    score = batch.first_noise @ np.linalg.pinv(matching_target(model)).T / dt
    score = score @ (np.eye(model.n) + dt * model.A_at(k))
    # the score has zero mean, so subtracting its sample mean is a free control variate
    g = w[:, None] * score
    ratio = np.mean(g, axis=0) / mean_w
    grad_log = ratio - np.mean(score, axis=0) - 0.5 * dt / model.lam * model.q.gradient(belief.mu)
    z = (g - ratio[None, :] * w[:, None]) / mean_w - score
    psi = float(np.exp(-cmin) * mean_w)
    return grad_log, z, psi


def _fd_gradient(t, belief, model, N, rng_seed, workers, tol_match, psi_floor, h_fd):
    mu = belief.mu
    h = h_fd if h_fd is not None else (np.linalg.norm(mu) + 1.0) * 1e-3
    n = model.n
    grad_log = np.zeros(n)
    z = np.zeros((N, n))
    log_psi0 = None
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        logs, ws = [], []
        for sign in (1.0, -1.0):
            b = Belief(mu + sign * e, belief.Sigma)
            batch = rollout_augmented(t, b, model, N, rng_seed, workers=workers, keep_paths=False, tol_match=tol_match)
            cmin, w = _shifted(batch.total_cost / model.lam)
            m = float(np.mean(w))
            logs.append(-cmin + np.log(m))
            ws.append(w / m)
        if min(logs) < np.log(psi_floor):
            raise DegenerateWeights(f"desirability below {psi_floor:g} at t={t:.6g}; increase lambda or N")
        grad_log[j] = (logs[0] - logs[1]) / (2 * h)
        z[:, j] = (ws[0] - ws[1]) / (2 * h)
        log_psi0 = 0.5 * (logs[0] + logs[1]) if log_psi0 is None else log_psi0
    return grad_log, z, float(np.exp(log_psi0))


def estimate_control(t: float, belief: Belief, model: ModelSpec, N: int, rng_seed: int,
                     method: str = "auto", workers: int = 1, h_fd: Optional[float] = None,
                     psi_floor: float = PSI_FLOOR, tol_match: float = TOL_MATCH) -> ControlEstimate:
    """Optimal actuation ``-R_a^{-1} B^T grad_mu V`` estimated from rollouts.

    Parameters
    ----------
    method : {"auto", "lr", "fd"}
        ``lr`` uses the likelihood ratio of the first Euler step; ``fd`` uses
        central differences of the desirability with common random numbers.
        ``auto`` picks ``lr`` when ``D*`` is nonsingular and ``fd`` otherwise.
    """
    if N < 2:
        raise InvalidArgument("N must be at least 2")
    k = model.grid_index(t)
    M = _control_map(model)
    if k == model.K:
        grad_log = -model.phi.gradient(belief.mu) / model.lam
        psi = float(np.exp(-gaussian_expect(model.phi, belief.mu, belief.Sigma) / model.lam))
        return ControlEstimate(M @ grad_log, np.zeros(model.ell_a), -model.lam * grad_log, psi, "exact", float(t), belief.mu)
    if method == "auto":
        ev = np.linalg.eigvalsh(matching_target(model))
        method = "lr" if ev[0] > 1e-12 * max(1.0, ev[-1]) else "fd"
    if method == "lr":
        grad_log, z, psi = _lr_gradient(t, belief, model, N, rng_seed, workers, tol_match, psi_floor)
    elif method == "fd":
        grad_log, z, psi = _fd_gradient(t, belief, model, N, rng_seed, workers, tol_match, psi_floor, h_fd)
    else:
        raise InvalidArgument(f"unknown gradient method {method!r}")
    u = M @ grad_log
    stderr = _std(z @ M.T) / np.sqrt(N)
    return ControlEstimate(u, stderr, -model.lam * grad_log, psi, method, float(t), belief.mu)


def _stage_costs(batch, model: ModelSpec) -> np.ndarray:
    det = np.array([0.5 * float(np.sum(model.q.S * S)) + model.rho(u) for S, u in zip(batch.Sigma_path, batch.u_s_path)])
    c = model.q(batch.mu_paths) + det[None, :]
    if model.extra_cost is not None:
        c = c + np.stack([model.extra_cost(t, batch.mu_paths[:, j], batch.Sigma_path[j])
                          for j, t in enumerate(batch.times)], axis=1)
    return c


def _nested_evaluator(model, N_inner, rng_seed, tol_match):
    def evaluate(s, mus, Sigma):
        ss = np.random.SeedSequence(int(rng_seed), spawn_key=(2, model.grid_index(s)))
        seeds = ss.generate_state(len(mus))
        return np.array([estimate_psi(s, Belief(m, Sigma), model, N_inner, int(sd), tol_match=tol_match).psi_hat
                         for m, sd in zip(mus, seeds)])
    return evaluate


def martingale_check(t: float, belief: Belief, model: ModelSpec, N: int, checkpoints: Sequence[float],
                     rng_seed: int, psi_evaluator: Optional[Callable] = None, workers: int = 1,
                     tol_match: float = TOL_MATCH) -> MartingaleTable:
    """Estimate E[M_s] for ``M_s = exp(-int_t^s (q + rho)/lam) Psi(s, mu_s, Sigma_s)``.

    ``psi_evaluator(s, mus, Sigma)`` returns Psi at a batch of means; when
    omitted, Psi is estimated by nested Monte Carlo with ``ceil(sqrt(N))``
    inner paths. The first entry always corresponds to ``s = t``.
    """
    k0 = model.grid_index(t)
    checkpoints = np.asarray(sorted(set([float(t)] + [float(s) for s in checkpoints])))
    idx = [model.grid_index(s) - k0 for s in checkpoints]
    if idx[0] < 0:
        raise InvalidArgument("checkpoints must not precede t")
    batch = rollout_augmented(t, belief, model, N, rng_seed, workers=workers, keep_paths=True, tol_match=tol_match)
    if psi_evaluator is None:
        psi_evaluator = _nested_evaluator(model, int(np.ceil(np.sqrt(N))), rng_seed, tol_match)
    c = _stage_costs(batch, model)
    cum = np.concatenate([np.zeros((N, 1)), np.cumsum(0.5 * model.dt * (c[:, 1:] + c[:, :-1]), axis=1)], axis=1)
    lam = model.lam
    m_hat, se = [], []
    last = len(batch.times) - 1
    for j in idx:
        if j == last:
            M = np.exp(-batch.total_cost / lam)
        else:
            psi = np.asarray(psi_evaluator(batch.times[j], batch.mu_paths[:, j], batch.Sigma_path[j]), dtype=float)
            M = np.exp(-cum[:, j] / lam) * psi
        m_hat.append(float(np.mean(M)))
        se.append(float(_std(M) / np.sqrt(N)))
    m_low = model.q.lower_bound() + 0.0  # rho >= 0 with infimum 0
    phi_low = model.phi.lower_bound()
    horizon = model.T - t
    if np.isfinite(m_low) and np.isfinite(phi_low):
        psi_bound = np.exp((max(0.0, -m_low) * horizon - phi_low) / lam)
        bound = float(psi_bound * np.exp(abs(m_low) * horizon / lam))
    else:
        bound = np.inf
    return MartingaleTable(checkpoints, np.array(m_hat), np.array(se), bound, N)


def receding_horizon_control(model: ModelSpec, x0, belief0: Belief, replan_every: int, N: int, rng_seed: int,
                             method: str = "auto", workers: int = 1, sensing_mode: str = "selector",
                             u_fixed=None, tol_match: float = TOL_MATCH) -> ClosedLoopRecord:
    """Closed loop with the sampled optimal actuation, re-planned every ``replan_every`` steps.

    The returned record carries the control-estimator standard errors in
    ``u_a_stderr``.
    """
    if replan_every < 1:
        raise InvalidArgument("replan_every must be >= 1")
    cov = propagate_cov(belief0.Sigma, model, "selector", tol_match=tol_match)
    if not cov.feasible:
        raise MatchingInfeasible(cov.feasible_until, belief0.Sigma, np.nan,
                                 f"selector infeasible from t={cov.feasible_until:.6g}")
    state = {"u": None, "se": None}
    stderrs = []

    def controller(t, belief):
        k = model.grid_index(t)
        if k % replan_every == 0 or state["u"] is None:
            seed = int(np.random.SeedSequence(int(rng_seed), spawn_key=(1, k)).generate_state(1)[0])
            try:
                est = estimate_control(t, belief, model, N, seed, method=method, workers=workers, tol_match=tol_match)
            except DegenerateWeights as err:
                raise DegenerateWeights(f"t={t:.6g}: {err}") from err
            state["u"], state["se"] = est.u, est.stderr
        stderrs.append(state["se"])
        return state["u"]

    rec = simulate_closed_loop(model, x0, belief0, controller, rng_seed, sensing_mode=sensing_mode,
                               u_fixed=u_fixed, tol_match=tol_match)
    return replace(rec, u_a_stderr=np.array(stderrs).reshape(-1, model.ell_a))


def write_value_sweep(path, estimates: Sequence[ValueEstimate]) -> None:
    """CSV with columns ``t, mu..., Sigma_flat..., psi_hat, stderr, value``."""
    n = estimates[0].mu.size
    header = ["t"] + [f"mu_{i}" for i in range(n)] + [f"Sigma_{i}{j}" for i in range(n) for j in range(n)] + ["psi_hat", "stderr", "value"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for e in estimates:
            w.writerow([_fmt(v) for v in [e.t, *e.mu, *e.Sigma.ravel(), e.psi_hat, e.stderr, e.value]])
