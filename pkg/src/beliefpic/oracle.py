"""Independent reference solutions used to verify the Monte Carlo estimator.

* ``solve_scalar_pde`` integrates the linear desirability PDE of the scalar
  example by finite differences. The covariance enters only through an
  advection term whose characteristics are the deterministic schedule
  ``Sigma_t``, so along that curve the problem is a 1-D reaction-diffusion
  equation in the mean.
* ``lqg_solve`` integrates the Riccati/affine/constant ODEs of the quadratic
  value function ``V = 1/2 mu^T P mu + b^T mu + c``.
* ``hjb_residual`` and ``cole_hopf_check`` compare sampled value functions
  against the nonlinear HJB equation and the log transform.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from beliefpic.covariance import TOL_MATCH, _fmt, matching_target, rk4_cov_step, selector
from beliefpic.errors import InfeasibleHorizon, InvalidArgument, PositivityViolation, UnsupportedCost
from beliefpic.model import ModelSpec, Scalar


# ---------------------------------------------------------------- scalar example


@dataclass(frozen=True)
class _ScalarSchedule:
    """Closed-form covariance line and sensing cost of the scalar example under the positive selector."""

    Sigma0: float
    t0: float
    slope: float
    dstar: float
    gain: float  # B^2 / R_a
    kappa_sigma: float  # kappa(Sigma) * Sigma
    r_s: float

    def Sigma(self, t):
        return self.Sigma0 + self.slope * (np.asarray(t) - self.t0)

    def rho(self, t):
        return 0.5 * self.r_s * (self.kappa_sigma / self.Sigma(t)) ** 2


def _scalar_schedule(model: ModelSpec, Sigma0, t0: float) -> _ScalarSchedule:
    if model.n != 1 or not isinstance(model.sensing, Scalar):
        raise InvalidArgument("the scalar oracle needs n = 1 and the Scalar sensing family")
    if not model.time_invariant or model.A[0, 0] != 0.0:
        raise InvalidArgument("the scalar oracle needs zero drift A = 0")
    s0 = float(np.asarray(Sigma0, dtype=float).ravel()[0])
    if s0 <= 0:
        raise InvalidArgument("Sigma0 must be positive")
    b, ra, ro = model.B[0, 0], model.R_a[0, 0], model.R_o[0, 0]
    dstar = model.lam * b * b / ra
    slope = model.Q[0, 0] - dstar
    if slope < 0 and model.T >= t0 + s0 / (-slope):
        raise InfeasibleHorizon(t0 + s0 / (-slope), model.T)
    return _ScalarSchedule(s0, t0, slope, dstar, b * b / ra, np.sqrt(dstar * ro), model.rho.R_s[0, 0])


@dataclass(frozen=True)
class PdeGrid:
    """Desirability ``psi[k, j] = Psi(times[k], mu[j], Sigma_t[k])``."""

    mu_min: float
    mu_max: float
    J: int
    K: int
    times: np.ndarray
    mu: np.ndarray
    Sigma_t: np.ndarray
    psi: np.ndarray
    scheme: str
    lam: float

    @property
    def dmu(self) -> float:
        return (self.mu_max - self.mu_min) / (self.J - 1)

    @property
    def value(self) -> np.ndarray:
        return -self.lam * np.log(self.psi)

    def index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise InvalidArgument(f"t={t} is not a node of the PDE time grid")
        return k

    def __call__(self, t: float, mu) -> np.ndarray:
        """Linear interpolation in mu at grid time t (clamped at the boundary)."""
        mu = np.asarray(mu, dtype=float)
        return np.interp(mu.reshape(mu.shape[0], -1)[:, 0] if mu.ndim > 1 else mu, self.mu, self.psi[self.index(t)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "mu", "psi", "value"])
            V = self.value
            for k, t in enumerate(self.times):
                for j, m in enumerate(self.mu):
                    w.writerow([_fmt(t), _fmt(m), _fmt(self.psi[k, j]), _fmt(V[k, j])])


def pde_bounds(model: ModelSpec, query_min: float, query_max: float, t0: float = 0.0, n_std: float = 6.0):
    """Domain placing the Neumann boundary ``n_std`` diffusion deviations beyond the query points."""
    dstar = float(matching_target(model)[0, 0])
    pad = n_std * np.sqrt(dstar * (model.T - t0))
    return query_min - pad, query_max + pad


def solve_scalar_pde(model: ModelSpec, Sigma0, mu_min: float, mu_max: float, J: int, K: int,
                     scheme: str = "crank_nicolson", t0: float = 0.0) -> PdeGrid:
    """Backward solve of ``-psi_t = -(q + rho)/lam psi + (D*/2) psi_mumu`` on ``[t0, T]``.

    Homogeneous Neumann boundaries; terminal data ``exp(-phi(mu, Sigma_T)/lam)``.
    """
    if model.extra_cost is not None:
        raise UnsupportedCost("the PDE oracle supports quadratic costs only")
    sched = _scalar_schedule(model, Sigma0, t0)
    if J < 3 or K < 1:
        raise InvalidArgument("need J >= 3 and K >= 1")
    mu = np.linspace(mu_min, mu_max, J)
    dmu = mu[1] - mu[0]
    times = np.linspace(t0, model.T, K + 1)
    dt = times[1] - times[0]
    lam = model.lam
    if scheme == "explicit":
        if dt > dmu * dmu / sched.dstar:
            raise InvalidArgument(f"explicit scheme unstable: dt={dt:.3g} > dmu^2/D*={dmu * dmu / sched.dstar:.3g}")
    elif scheme != "crank_nicolson":
        raise InvalidArgument(f"unknown scheme {scheme!r}")
    Sig = sched.Sigma(times)
    S, s, c = model.q.S[0, 0], model.q.s[0], model.q.c

    def reaction(k):
        return (0.5 * S * mu ** 2 + s * mu + c + 0.5 * S * Sig[k] + sched.rho(times[k])) / lam

    d = 0.5 * sched.dstar / dmu ** 2
    # Laplacian with mirrored ghost nodes: row 0 is (-2, 2), row J-1 is (2, -2)
    up = np.full(J - 1, d)
    lo = np.full(J - 1, d)
    up[0] = 2 * d
    lo[-1] = 2 * d
    diag_lap = np.full(J, -2 * d)

    def apply(k, v):
        out = diag_lap * v - reaction(k) * v
        out[:-1] += up * v[1:]
        out[1:] += lo * v[:-1]
        return out

    phi = model.phi
    psi = np.empty((K + 1, J))
    psi[K] = np.exp(-(0.5 * phi.S[0, 0] * mu ** 2 + phi.s[0] * mu + phi.c + 0.5 * phi.S[0, 0] * Sig[K]) / lam)
    ab = np.zeros((3, J))
    for k in range(K - 1, -1, -1):
        if scheme == "explicit":
            psi[k] = psi[k + 1] + dt * apply(k + 1, psi[k + 1])
        else:
            rhs = psi[k + 1] + 0.5 * dt * apply(k + 1, psi[k + 1])
            ab[0, 1:] = -0.5 * dt * up
            ab[1] = 1.0 - 0.5 * dt * (diag_lap - reaction(k))
            ab[2, :-1] = -0.5 * dt * lo
            psi[k] = solve_banded((1, 1), ab, rhs)
    if not np.all(psi > 0):
        raise PositivityViolation("PDE solution lost positivity; refine the grid")
    return PdeGrid(float(mu_min), float(mu_max), J, K, times, mu, Sig, psi, scheme, lam)


# ---------------------------------------------------------------- LQG


@dataclass(frozen=True)
class LqgSolution:
    """``V(t, mu) = 1/2 mu^T P_t mu + b_t^T mu + c_t`` on the covariance schedule."""

    times: np.ndarray
    P: np.ndarray
    b: np.ndarray
    c: np.ndarray
    Sigma: np.ndarray
    lam: float
    gain: np.ndarray  # R_a^{-1} B^T

    def index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise InvalidArgument(f"t={t} is not a node of the LQG time grid")
        return k

    def value(self, t: float, mu) -> np.ndarray:
        k = self.index(t)
        mu = np.asarray(mu, dtype=float)
        if mu.ndim == 0 or (mu.ndim == 1 and self.P.shape[1] == 1):
            mu = mu.reshape(-1, 1)
        return 0.5 * np.einsum("...i,ij,...j->...", mu, self.P[k], mu) + mu @ self.b[k] + self.c[k]

    def psi(self, t: float, mu) -> np.ndarray:
        return np.exp(-self.value(t, mu) / self.lam)

    def feedback(self, t: float, mu) -> np.ndarray:
        k = self.index(t)
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        return -self.gain @ (self.P[k] @ mu + self.b[k])

    def to_csv(self, path, mu_grid) -> None:
        mu_grid = np.asarray(mu_grid, dtype=float)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "mu", "psi", "value"])
            for t in self.times:
                V = self.value(t, mu_grid)
                for m, v in zip(mu_grid, V):
                    w.writerow([_fmt(t), _fmt(m), _fmt(np.exp(-v / self.lam)), _fmt(v)])


def lqg_solve(model: ModelSpec, Sigma0, t0: float = 0.0, substeps: int = 1,
              tol_match: float = TOL_MATCH) -> LqgSolution:
    """Exact quadratic value function of the selector-restricted problem.

    Backward RK4 on

        -dP/dt = S_q + A^T P + P A - P G P,
        -db/dt = s_q + (A - G P)^T b,
        -dc/dt = c_q + tr(S_q Sigma_t)/2 + rho_kappa(t) + tr(D* P)/2 - b^T G b / 2,

    with ``G = B R_a^{-1} B^T``; the covariance schedule is integrated forward
    at half steps first.
    """
    if model.extra_cost is not None:
        raise UnsupportedCost("the LQG oracle supports quadratic costs only")
    k0 = model.grid_index(t0)
    steps = (model.K - k0) * substeps
    h = model.dt / substeps
    Sigma0 = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    n = model.n

    # forward covariance on the half-step grid
    half = 2 * steps
    Sig = np.empty((half + 1, n, n))
    rho = np.empty(half + 1)
    Sig[0] = Sigma0
    ctrl = lambda t, S: selector(t, S, model, tol_match)
    for i in range(half):
        t = t0 + i * h / 2
        k = k0 + (i // 2) // substeps
        rho[i] = model.rho(ctrl(t, Sig[i]))
        Sig[i + 1] = rk4_cov_step(t, Sig[i], h / 2, k, model, ctrl)
    rho[half] = model.rho(ctrl(model.T, Sig[half]))

    gain = np.linalg.solve(model.R_a, model.B.T)
    G = model.B @ gain
    Dstar = matching_target(model)
    S_q, s_q, c_q = model.q.S, model.q.s, model.q.c

    def f(P, b, A, i_half):
        dP = -(S_q + A.T @ P + P @ A - P @ G @ P)
        db = -(s_q + (A - G @ P).T @ b)
        dc = -(c_q + 0.5 * np.sum(S_q * Sig[i_half]) + rho[i_half] + 0.5 * np.sum(Dstar * P) - 0.5 * b @ G @ b)
        return dP, db, dc

    P = np.empty((steps + 1, n, n))
    b = np.empty((steps + 1, n))
    c = np.empty(steps + 1)
    P[-1] = model.phi.S
    b[-1] = model.phi.s
    c[-1] = model.phi.c + 0.5 * np.sum(model.phi.S * Sig[-1])
    for i in range(steps, 0, -1):
        A = model.A_at(k0 + (i - 1) // substeps)
        y = (P[i], b[i], c[i])
        k1 = f(*y[:2], A, 2 * i)
        y2 = [y[j] - 0.5 * h * k1[j] for j in range(3)]
        k2 = f(*y2[:2], A, 2 * i - 1)
        y3 = [y[j] - 0.5 * h * k2[j] for j in range(3)]
        k3 = f(*y3[:2], A, 2 * i - 1)
        y4 = [y[j] - h * k3[j] for j in range(3)]
        k4 = f(*y4[:2], A, 2 * i - 2)
        P[i - 1] = y[0] - h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        P[i - 1] = 0.5 * (P[i - 1] + P[i - 1].T)
        b[i - 1] = y[1] - h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        c[i - 1] = y[2] - h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    times = t0 + np.arange(steps + 1) * h
    return LqgSolution(times, P, b, c, Sig[::2].copy(), model.lam, gain)


# ---------------------------------------------------------------- residual checks


def hjb_residual(V, times, mu, model: ModelSpec, Sigma0, t0: Optional[float] = None) -> np.ndarray:
    """Pointwise residual of the reduced HJB equation of the scalar example.

    ``V[k, j]`` samples the value at ``(times[k], mu[j], Sigma_{times[k]})``;
    the covariance derivative is absorbed into the time difference along the
    schedule. Forward differences in t, central in mu; the result has shape
    ``(K, J - 2)``.
    """
    V = np.asarray(V, dtype=float)
    times = np.asarray(times, dtype=float)
    mu = np.asarray(mu, dtype=float)
    K, J = V.shape[0] - 1, V.shape[1]
    if J < 5 or K < 5:
        raise InvalidArgument("grid too coarse for the HJB residual (need J >= 5 and K >= 5)")
    sched = _scalar_schedule(model, Sigma0, times[0] if t0 is None else t0)
    dt = np.diff(times)[:, None]
    dmu = mu[1] - mu[0]
    Vk = V[:-1]
    V_t = (V[1:, 1:-1] - Vk[:, 1:-1]) / dt
    V_m = (Vk[:, 2:] - Vk[:, :-2]) / (2 * dmu)
    V_mm = (Vk[:, 2:] - 2 * Vk[:, 1:-1] + Vk[:, :-2]) / dmu ** 2
    m = mu[None, 1:-1]
    tk = times[:-1, None]
    S, s, c = model.q.S[0, 0], model.q.s[0], model.q.c
    q = 0.5 * S * m ** 2 + s * m + c + 0.5 * S * sched.Sigma(tk)
    return V_t + q + sched.rho(tk) + 0.5 * sched.dstar * V_mm - 0.5 * sched.gain * V_m ** 2


def cole_hopf_check(psi, V, lam: Optional[float] = None) -> float:
    """max |V + lam log psi| over matching grids."""
    if isinstance(psi, PdeGrid):
        lam = psi.lam if lam is None else lam
        psi = psi.psi
    if lam is None:
        raise InvalidArgument("lam is required when psi is a plain array")
    psi = np.asarray(psi, dtype=float)
    V = np.asarray(V, dtype=float)
    if psi.shape != V.shape:
        raise InvalidArgument(f"grid shapes differ: {psi.shape} vs {V.shape}")
    if np.any(psi <= 0):
        raise PositivityViolation("psi must be strictly positive for the log transform")
    return float(np.max(np.abs(V + lam * np.log(psi))))
