"""Monte Carlo rollouts of the augmented belief state and closed-loop simulation.

Random streams are counter-based (Philox) and keyed by ``(seed, block)``
where a block is a fixed range of ``BLOCK`` consecutive path indices, so a
batch is bit-identical no matter how many workers share the blocks.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from beliefpic.covariance import (
    Belief,
    TOL_MATCH,
    _fmt,
    matching_target,
    propagate_cov,
    rk4_cov_step,
    selector,
)
from beliefpic.errors import InvalidArgument, MatchingInfeasible
from beliefpic.model import ModelSpec, gaussian_expect, is_symmetric, sensing_matrix, symmetrize

BLOCK = 4096


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Independent Philox stream for path block ``block`` under ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(block),))))


def sqrt_psd(M) -> np.ndarray:
    """Factor L with L L^T = M via eigendecomposition; negative eigenvalues are clamped."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or not is_symmetric(M, 1e-10):
        raise InvalidArgument("sqrt_psd needs a symmetric matrix")
    w, V = np.linalg.eigh(symmetrize(M))
    return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class RolloutBatch:
    N: int
    t0: float
    horizon: float
    times: np.ndarray
    mu_paths: Optional[np.ndarray]  # (N, K+1, n) or None when not kept
    Sigma_path: np.ndarray
    u_s_path: np.ndarray  # selector output at every node, (K+1, ell_s)
    running_cost: np.ndarray
    terminal_cost: np.ndarray
    first_noise: np.ndarray

    @property
    def total_cost(self) -> np.ndarray:
        return self.running_cost + self.terminal_cost


def _node_costs(model: ModelSpec, Sigmas, u_nodes, times):
    """Path-independent part of q + rho_kappa at every node."""
    S_q = model.q.S
    return np.array([0.5 * float(np.sum(S_q * S)) + model.rho(u) for S, u in zip(Sigmas, u_nodes)])


def rollout_augmented(t0: float, belief0: Belief, model: ModelSpec, N: int, rng_seed: int,
                      workers: int = 1, keep_paths: bool = True,
                      tol_match: float = TOL_MATCH) -> RolloutBatch:
    """Sample N paths of ``dmu = A mu ds + L* dbeta`` with the covariance on the
    selector schedule, accumulating the running cost by the trapezoid rule.

    The mean drift carries no actuation term; the optimal actuation enters only
    through the Feynman-Kac weights.
    """
    if N < 1:
        raise InvalidArgument("N must be positive")
    k0 = model.grid_index(t0)
    cov = propagate_cov(belief0.Sigma, model, "selector", t0=t0, tol_match=tol_match)
    if not cov.feasible:
        bad = np.searchsorted(cov.times, cov.feasible_until)
        raise MatchingInfeasible(cov.feasible_until, cov.Sigmas[max(bad - 1, 0)], np.nan,
                                 f"selector infeasible at t={cov.feasible_until:.6g} < T={model.T:.6g}")
    steps = model.K - k0
    n, dt = model.n, model.dt
    u_last = selector(model.T, cov.Sigmas[-1], model, tol_match)
    u_nodes = np.vstack([cov.u_s, u_last[None, :]])
    det = _node_costs(model, cov.Sigmas, u_nodes, cov.times)
    L = sqrt_psd(matching_target(model))
    sqdt = np.sqrt(dt)
    q_mu = model.q
    extra = model.extra_cost
    A_list = [model.A_at(k0 + j) for j in range(steps)]

    def stage(j, mu):
        c = q_mu(mu) + det[j]
        if extra is not None:
            c = c + extra(cov.times[j], mu, cov.Sigmas[j])
        return c

    def run_block(b):
        start = b * BLOCK
        size = min(BLOCK, N - start)
        rng = block_rng(rng_seed, b)
        mu = np.tile(belief0.mu, (size, 1))
        path = np.empty((size, steps + 1, n)) if keep_paths else None
        if keep_paths:
            path[:, 0] = mu
        acc = 0.5 * stage(0, mu) if steps else np.zeros(size)
        first = np.zeros((size, n))
        for j in range(steps):
            inc = sqdt * rng.standard_normal((size, n)) @ L.T
            if j == 0:
                first = inc
            mu = mu + dt * (mu @ A_list[j].T) + inc
            if keep_paths:
                path[:, j + 1] = mu
            acc = acc + (0.5 if j == steps - 1 else 1.0) * stage(j + 1, mu)
        term = gaussian_expect(model.phi, mu, cov.Sigmas[-1])
        return dt * acc, np.atleast_1d(term), first, path

    nblocks = -(-N // BLOCK)
    if workers > 1 and nblocks > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run_block, range(nblocks)))
    else:
        parts = [run_block(b) for b in range(nblocks)]
    running = np.concatenate([p[0] for p in parts])
    terminal = np.concatenate([p[1] for p in parts])
    first = np.concatenate([p[2] for p in parts])
    mu_paths = np.concatenate([p[3] for p in parts]) if keep_paths else None
    return RolloutBatch(N, float(cov.times[0]), model.T, cov.times, mu_paths, cov.Sigmas,
                        u_nodes, running, terminal, first)


@dataclass(frozen=True)
class ClosedLoopRecord:
    times: np.ndarray
    x_path: np.ndarray
    y_increments: np.ndarray
    innovations: np.ndarray
    mu_path: np.ndarray
    Sigma_path: np.ndarray
    u_a_path: np.ndarray
    u_s_path: np.ndarray
    stage_cost_true: np.ndarray
    stage_cost_belief: np.ndarray
    realized_cost: float
    realized_cost_belief: float
    status: str = "ok"
    failure_time: Optional[float] = None
    u_a_stderr: Optional[np.ndarray] = None

    def to_csv(self, path) -> None:
        n = self.x_path.shape[1]
        ell_a = self.u_a_path.shape[1]
        ell_s = self.u_s_path.shape[1]
        header = (["t"] + [f"x_{i}" for i in range(n)] + [f"mu_{i}" for i in range(n)]
                  + [f"Sigma_{i}{j}" for i in range(n) for j in range(n)]
                  + [f"u_a_{i}" for i in range(ell_a)] + [f"u_s_{i}" for i in range(ell_s)]
                  + ["stage_cost_true", "stage_cost_belief"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k, t in enumerate(self.times):
                ua = self.u_a_path[k] if k < len(self.u_a_path) else np.full(ell_a, np.nan)
                us = self.u_s_path[k] if k < len(self.u_s_path) else np.full(ell_s, np.nan)
                row = ([t, *self.x_path[k], *self.mu_path[k], *self.Sigma_path[k].ravel(), *ua, *us,
                        self.stage_cost_true[k], self.stage_cost_belief[k]])
                w.writerow([_fmt(v) for v in row])


def simulate_closed_loop(model: ModelSpec, x0, belief0: Belief, controller: Callable, rng_seed: int,
                         sensing_mode: str = "selector", u_fixed=None, t0: float = 0.0,
                         tol_match: float = TOL_MATCH) -> ClosedLoopRecord:
    """Euler-Maruyama co-simulation of plant, sensor and Kalman-Bucy filter.

    ``controller(t, belief)`` returns the actuation. The sensing control comes
    from the selector (``sensing_mode="selector"``) or is held at ``u_fixed``.
    A selector failure truncates the record and sets ``status="infeasible"``.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if x.size != model.n:
        raise InvalidArgument(f"x0 must have length {model.n}")
    if sensing_mode not in ("selector", "fixed"):
        raise InvalidArgument(f"unknown sensing mode {sensing_mode!r}")
    if sensing_mode == "fixed":
        u_fixed = np.atleast_1d(np.asarray(u_fixed, dtype=float)).ravel()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(rng_seed))))
    k0 = model.grid_index(t0)
    dt = model.dt
    sqdt = np.sqrt(dt)
    mu, Sigma = belief0.mu.copy(), belief0.Sigma.copy()

    def sensing(t, S):
        return selector(t, S, model, tol_match) if sensing_mode == "selector" else u_fixed

    xs, mus, Ss = [x.copy()], [mu.copy()], [Sigma.copy()]
    uas, uss, dys, innos = [], [], [], []
    status, failure_time = "ok", None
    for k in range(k0, model.K):
        t = k * dt
        try:
            u_s = sensing(t, Sigma)
            S_next = rk4_cov_step(t, Sigma, dt, k, model, sensing)
            if np.min(np.linalg.eigvalsh(S_next)) <= 0:
                raise MatchingInfeasible(t + dt, S_next, np.nan, "covariance left the PD cone")
        except MatchingInfeasible as err:
            status, failure_time = "infeasible", err.t
            break
        u_a = np.atleast_1d(np.asarray(controller(t, Belief(mu, Sigma)), dtype=float)).ravel()
        A = model.A_at(k)
        C = sensing_matrix(model.sensing, u_s)
        dw = sqdt * rng.standard_normal(model.m)
        dnu = sqdt * rng.standard_normal(model.p)
        dy = C @ x * dt + model.sigma_o @ dnu
        innov = dy - C @ mu * dt
        gain = Sigma @ C.T @ np.linalg.inv(model.R_o)
        x = x + (A @ x + model.B @ u_a) * dt + model.H @ dw
        mu = mu + (A @ mu + model.B @ u_a) * dt + gain @ innov
        Sigma = S_next
        xs.append(x.copy()); mus.append(mu.copy()); Ss.append(Sigma.copy())
        uas.append(u_a); uss.append(np.array(u_s, dtype=float)); dys.append(dy); innos.append(innov)

    xs, mus, Ss = np.array(xs), np.array(mus), np.array(Ss)
    K = len(xs) - 1
    times = (k0 + np.arange(K + 1)) * dt
    uas = np.array(uas).reshape(K, model.ell_a)
    uss = np.array(uss).reshape(K, model.ell_s)
    q_true = np.atleast_1d(model.q(xs))
    q_bel = np.array([gaussian_expect(model.q, m_, S_) for m_, S_ in zip(mus, Ss)])
    ctrl = sum(0.5 * u @ model.R_a @ u + model.rho(us) for u, us in zip(uas, uss)) * dt
    trap = lambda c: dt * (np.sum(c) - 0.5 * (c[0] + c[-1])) if K else 0.0
    J_true = float(trap(q_true) + ctrl + model.phi(xs[-1]))
    J_bel = float(trap(q_bel) + ctrl + gaussian_expect(model.phi, mus[-1], Ss[-1]))
    return ClosedLoopRecord(times, xs, np.array(dys).reshape(K, model.p), np.array(innos).reshape(K, model.p),
                            mus, Ss, uas, uss, q_true, q_bel, J_true, J_bel, status, failure_time)
