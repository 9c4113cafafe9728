"""Controlled Riccati dynamics, the matching set and its selector.

Under a sensing control ``u`` the filter covariance obeys

    dSigma/dt = A Sigma + Sigma A^T + Q - D(Sigma, u),

and path-integral linearization needs ``D(Sigma, u) = D*`` with
``D* = lam B R_a^{-1} B^T``. The selector picks one such ``u`` for every
covariance, which turns the Riccati equation into an autonomous ODE.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.optimize import least_squares

from beliefpic.errors import InvalidArgument, MatchingInfeasible
from beliefpic.model import (
    Affine,
    ModelSpec,
    Scalar,
    Scaled,
    SensingFamily,
    _innovation_D,
    is_spd,
    sensing_matrix,
    symmetrize,
)

TOL_MATCH = 1e-8
EPS_PD = 1e-10
AFFINE_STARTS = 16


@dataclass(frozen=True)
class Belief:
    """Gaussian belief N(mu, Sigma)."""

    mu: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float)).ravel()
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if Sigma.shape != (mu.size, mu.size):
            raise InvalidArgument(f"Sigma must be {mu.size}x{mu.size}, got {Sigma.shape}")
        if np.linalg.norm(Sigma - Sigma.T) > 1e-10 * np.linalg.norm(Sigma):
            raise InvalidArgument("Sigma must be symmetric")
        if np.min(np.linalg.eigvalsh(Sigma)) <= 0:
            raise InvalidArgument("Sigma must be positive definite")
        mu.setflags(write=False)
        Sigma = Sigma.copy()
        Sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", Sigma)

    @property
    def n(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class MatchingSolution:
    solutions: tuple
    residual: float

    @property
    def empty(self) -> bool:
        return len(self.solutions) == 0

    @property
    def status(self) -> str:
        return "Empty" if self.empty else "Solutions"


def riccati_rhs(t: float, Sigma, u, model: ModelSpec, k: Optional[int] = None) -> np.ndarray:
    """Right-hand side ``a(t, Sigma, u)`` of the controlled Riccati ODE.

    ``k`` selects the grid interval for time-varying drift; by default it is
    derived from ``t``.
    """
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if k is None:
        k = min(int(np.floor(t / model.dt + 1e-9)), model.K - 1)
    A = model.A_at(k)
    out = A @ Sigma + Sigma @ A.T + model.Q - _innovation_D(sensing_matrix(model.sensing, u), Sigma, model.R_o)
    return symmetrize(out)


def matching_target(model: ModelSpec) -> np.ndarray:
    """D* = lam B R_a^{-1} B^T."""
    B = model.B
    return symmetrize(model.lam * (B @ np.linalg.solve(model.R_a, B.T)))


def _residual(family, Sigma, u, R_o, Dstar) -> float:
    return float(np.linalg.norm(_innovation_D(sensing_matrix(family, u), Sigma, R_o) - Dstar))


def _dedupe(us: List[np.ndarray]) -> List[np.ndarray]:
    us = sorted(us, key=lambda u: tuple(-u))
    out: List[np.ndarray] = []
    for u in us:
        if not any(np.linalg.norm(u - v) <= 1e-6 * max(1.0, np.linalg.norm(v)) for v in out):
            out.append(u)
    return out


def _affine_matching(family: Affine, Sigma, model, Dstar, tol, n_starts, seed):
    n = Sigma.shape[0]
    iu = np.triu_indices(n)
    w = np.where(iu[0] == iu[1], 1.0, np.sqrt(2.0))

    def resid(u):
        return w * (_innovation_D(sensing_matrix(family, u), Sigma, model.R_o) - Dstar)[iu]

    scale = np.sqrt(max(np.linalg.norm(Dstar, 2), 1e-12) * np.linalg.norm(model.R_o, 2)) / np.linalg.norm(Sigma, 2)
    rng = np.random.default_rng(seed)
    starts = rng.uniform(-scale, scale, size=(n_starts, family.ell_s))
    found, best = [], np.inf
    for u0 in starts:
        sol = least_squares(resid, u0, xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        r = _residual(family, Sigma, sol.x, model.R_o, Dstar)
        best = min(best, r)
        if r <= tol:
            found.append(sol.x)
    return _dedupe(found), best


def solve_matching(family: SensingFamily, Sigma, model: ModelSpec, tol_match: float = TOL_MATCH,
                   n_starts: int = AFFINE_STARTS, seed: int = 0) -> MatchingSolution:
    """Sensing controls u with ``D(Sigma, u) = D*``.

    Infeasibility is reported as an empty solution set together with the best
    residual found, never raised.
    """
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    Dstar = matching_target(model)
    dnorm = float(np.linalg.norm(Dstar))
    tol = tol_match * max(1.0, dnorm)
    if not np.allclose(Sigma, Sigma.T, rtol=1e-10, atol=0) or np.min(np.linalg.eigvalsh(Sigma)) <= 0:
        return MatchingSolution((), dnorm)

    if isinstance(family, Scalar):
        b, ra, ro = model.B[0, 0], model.R_a[0, 0], model.R_o[0, 0]
        mag = np.sqrt(model.lam * b * b * ro / ra) / Sigma[0, 0]
        cands = _dedupe([np.array([mag]), np.array([-mag])])
    elif isinstance(family, Scaled):
        G = _innovation_D(family.C0, Sigma, model.R_o)
        alpha = float(np.sum(Dstar * G) / np.sum(G * G))
        if alpha < 0 or np.linalg.norm(Dstar - alpha * G) > tol:
            return MatchingSolution((), float(np.linalg.norm(Dstar - max(alpha, 0.0) * G)))
        r = np.sqrt(alpha)
        cands = _dedupe([np.array([r]), np.array([-r])])
    elif isinstance(family, Affine):
        cands, best = _affine_matching(family, Sigma, model, Dstar, tol, n_starts, seed)
        if not cands:
            return MatchingSolution((), best)
    else:
        raise InvalidArgument(f"unknown sensing family {family!r}")

    res = [_residual(family, Sigma, u, model.R_o, Dstar) for u in cands]
    if max(res) > tol:
        return MatchingSolution((), min(res))
    for u in cands:
        u.setflags(write=False)
    return MatchingSolution(tuple(cands), max(res))


def selector(t: float, Sigma, model: ModelSpec, tol_match: float = TOL_MATCH) -> np.ndarray:
    """Deterministic element of the matching set: minimal sensing cost, ties
    broken towards the lexicographically largest control."""
    sol = solve_matching(model.sensing, Sigma, model, tol_match)
    if sol.empty:
        raise MatchingInfeasible(t, np.array(Sigma, dtype=float), sol.residual)
    costs = [model.rho(u) for u in sol.solutions]
    cmin = min(costs)
    tied = [u for u, c in zip(sol.solutions, costs) if c <= cmin + 1e-12 * max(1.0, abs(cmin))]
    return max(tied, key=lambda u: tuple(u)).copy()


@dataclass(frozen=True)
class CovariancePath:
    """Covariance trajectory on the model grid.

    Entries after ``feasible_until`` are NaN. ``u_s[k]`` is the sensing control
    applied on ``[t_k, t_{k+1})``.
    """

    times: np.ndarray
    Sigmas: np.ndarray
    u_s: np.ndarray
    feasible_until: float
    mode: str = "selector"

    @property
    def feasible(self) -> bool:
        return bool(np.all(np.isfinite(self.Sigmas)))

    def to_csv(self, path) -> None:
        n = self.Sigmas.shape[1]
        ell = self.u_s.shape[1]
        header = ["t"] + [f"Sigma_{i}{j}" for i in range(n) for j in range(n)] + [f"u_s_{k}" for k in range(ell)] + ["feasible"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k, t in enumerate(self.times):
                us = self.u_s[k] if k < len(self.u_s) else np.full(ell, np.nan)
                ok = int(t <= self.feasible_until + 1e-12 and np.all(np.isfinite(self.Sigmas[k])))
                w.writerow([_fmt(t)] + [_fmt(v) for v in self.Sigmas[k].ravel()] + [_fmt(v) for v in us] + [ok])


def _fmt(v) -> str:
    v = float(v)
    return "" if np.isnan(v) else repr(v)


class _StepFailed(Exception):
    pass


def _sensing_rhs(model, mode, u_fixed, tol_match, u_max):
    def control(t, S):
        if mode == "selector":
            try:
                u = selector(t, S, model, tol_match)
            except MatchingInfeasible:
                raise _StepFailed from None
            if u_max is not None and np.max(np.abs(u)) > u_max:
                raise _StepFailed
            return u
        return u_fixed

    return control


def rk4_cov_step(t: float, Sigma: np.ndarray, h: float, k: int, model: ModelSpec, control) -> np.ndarray:
    """One classical RK4 step of the Riccati ODE, symmetrizing every stage.

    ``control(t, Sigma)`` supplies the sensing control at each stage.
    """
    def f(tt, S):
        return riccati_rhs(tt, S, control(tt, S), model, k)

    k1 = f(t, Sigma)
    k2 = f(t + h / 2, symmetrize(Sigma + h / 2 * k1))
    k3 = f(t + h / 2, symmetrize(Sigma + h / 2 * k2))
    k4 = f(t + h, symmetrize(Sigma + h * k3))
    return symmetrize(Sigma + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4))


def propagate_cov(Sigma0, model: ModelSpec, mode: str = "selector", u=None, t0: float = 0.0,
                  tol_match: float = TOL_MATCH, eps_pd: float = EPS_PD,
                  u_max: Optional[float] = None) -> CovariancePath:
    """Integrate the covariance from ``t0`` to ``T`` on the model grid.

    Parameters
    ----------
    mode : {"selector", "fixed", "schedule"}
        ``selector`` re-solves the matching set at every RK4 stage;
        ``fixed`` holds ``u`` constant; ``schedule`` takes ``u[k]`` on the
        k-th step.
    u_max : float, optional
        Selector outputs exceeding this bound count as infeasible.
    """
    Sigma0 = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    if Sigma0.shape != (model.n, model.n) or not is_spd(Sigma0):
        raise InvalidArgument("Sigma0 must be a symmetric positive definite n x n matrix")
    k0 = model.grid_index(t0)
    steps = model.K - k0
    ell = model.ell_s
    if mode == "fixed":
        uf = np.atleast_1d(np.asarray(u, dtype=float)).ravel()
        if uf.size != ell:
            raise InvalidArgument(f"fixed sensing control must have length {ell}")
        schedule = np.tile(uf, (steps, 1))
    elif mode == "schedule":
        schedule = np.asarray(u, dtype=float).reshape(-1, ell)
        if schedule.shape[0] < steps:
            raise InvalidArgument(f"schedule needs {steps} entries, got {schedule.shape[0]}")
    elif mode != "selector":
        raise InvalidArgument(f"unknown covariance mode {mode!r}")

    times = (k0 + np.arange(steps + 1)) * model.dt
    Sigmas = np.full((steps + 1, model.n, model.n), np.nan)
    u_s = np.full((steps, ell), np.nan)
    Sigmas[0] = symmetrize(Sigma0)
    feasible_until = model.T
    for j in range(steps):
        t, S = times[j], Sigmas[j]
        try:
            if mode == "selector":
                control = _sensing_rhs(model, mode, None, tol_match, u_max)
                u_s[j] = control(t, S)
            else:
                u_s[j] = schedule[j]
                control = _sensing_rhs(model, mode, schedule[j], tol_match, u_max)
            S_next = rk4_cov_step(t, S, model.dt, k0 + j, model, control)
            if not np.all(np.isfinite(S_next)) or np.min(np.linalg.eigvalsh(S_next)) <= eps_pd:
                raise _StepFailed
        except _StepFailed:
            feasible_until = float(times[j + 1]) if np.all(np.isfinite(u_s[j])) else float(t)
            u_s[j + 1:] = np.nan
            break
        Sigmas[j + 1] = S_next
    return CovariancePath(times, Sigmas, u_s, feasible_until, mode)


def feasibility_horizon(Sigma0, model: ModelSpec, u_max: Optional[float] = None, t0: float = 0.0) -> float:
    """First time the selector-driven covariance leaves the feasible region, capped at T.

    For the scalar family with zero drift the covariance schedule is linear,
    ``Sigma_t = Sigma_0 + (Q - D*) t``, and the horizon has a closed form. A
    sensor bound ``|u_s| <= u_max`` requires ``Sigma >= sqrt(D* R_o) / u_max``.
    """
    Sigma0 = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    if isinstance(model.sensing, Scalar) and model.time_invariant and model.A[0, 0] == 0.0:
        s0 = float(Sigma0[0, 0])
        b, ra, ro = model.B[0, 0], model.R_a[0, 0], model.R_o[0, 0]
        dstar = model.lam * b * b / ra
        decay = dstar - model.Q[0, 0]
        floor = 0.0 if u_max is None else np.sqrt(dstar * ro) / u_max
        if s0 <= floor:
            return float(t0)
        if decay <= 0:
            return model.T
        return float(min(model.T, t0 + (s0 - floor) / decay))
    path = propagate_cov(Sigma0, model, "selector", t0=t0, u_max=u_max)
    return path.feasible_until
