"""System description: plant, sensing family, costs.

The plant is linear, ``dx = (A_t x + B u_a) dt + H dw``, observed through
``dy = C(u_s) x dt + sigma_o dnu``. ``A_t`` is piecewise constant on the
simulation grid ``t_k = k * dt``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from beliefpic.errors import InvalidArgument

_SYM_TOL = 1e-10


def _as_matrix(a, name, shape=None) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(a, dtype=float))
    if arr.ndim != 2:
        raise InvalidArgument(f"{name} must be a matrix, got shape {arr.shape}")
    if shape is not None and arr.shape != shape:
        raise InvalidArgument(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def _as_vector(a, name, size=None) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(a, dtype=float)).ravel()
    if size is not None and arr.size != size:
        raise InvalidArgument(f"{name} must have length {size}, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def is_symmetric(M: np.ndarray, tol: float = _SYM_TOL) -> bool:
    scale = max(1.0, float(np.linalg.norm(M)))
    return float(np.linalg.norm(M - M.T)) <= tol * scale


def is_spd(M: np.ndarray) -> bool:
    if not is_symmetric(M):
        return False
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return False
    return True


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


# ---------------------------------------------------------------- sensing


@dataclass(frozen=True)
class Scalar:
    """C(u) = u for n = p = ell_s = 1."""

    kind = "scalar"

    @property
    def ell_s(self) -> int:
        return 1

    def check_dims(self, n: int, p: int) -> None:
        if n != 1 or p != 1:
            raise InvalidArgument(f"Scalar sensing requires n = p = 1, got n={n}, p={p}")


@dataclass(frozen=True)
class Scaled:
    """C(u) = u * C0 with a single scalar sensing control."""

    C0: np.ndarray
    kind = "scaled"

    def __post_init__(self):
        C0 = _as_matrix(self.C0, "C0")
        if not np.any(C0):
            raise InvalidArgument("Scaled sensing requires a nonzero C0")
        object.__setattr__(self, "C0", C0)

    @property
    def ell_s(self) -> int:
        return 1

    def check_dims(self, n: int, p: int) -> None:
        if self.C0.shape != (p, n):
            raise InvalidArgument(f"C0 must be {p}x{n}, got {self.C0.shape}")


@dataclass(frozen=True)
class Affine:
    """C(u) = sum_k u_k C_k."""

    C_list: tuple
    kind = "affine"

    def __post_init__(self):
        mats = tuple(_as_matrix(C, f"C_list[{i}]") for i, C in enumerate(self.C_list))
        if not mats:
            raise InvalidArgument("Affine sensing needs at least one basis matrix")
        if len({C.shape for C in mats}) != 1:
            raise InvalidArgument("Affine basis matrices must share a shape")
        object.__setattr__(self, "C_list", mats)

    @property
    def ell_s(self) -> int:
        return len(self.C_list)

    def check_dims(self, n: int, p: int) -> None:
        if self.C_list[0].shape != (p, n):
            raise InvalidArgument(f"C_k must be {p}x{n}, got {self.C_list[0].shape}")


SensingFamily = Union[Scalar, Scaled, Affine]


def sensing_matrix(family: SensingFamily, u) -> np.ndarray:
    """Observation matrix C(u) for the given sensing family."""
    u = np.atleast_1d(np.asarray(u, dtype=float)).ravel()
    if u.size != family.ell_s:
        raise InvalidArgument(f"sensing control must have length {family.ell_s}, got {u.size}")
    if isinstance(family, Scalar):
        return np.array([[u[0]]])
    if isinstance(family, Scaled):
        return u[0] * family.C0
    if isinstance(family, Affine):
        return np.einsum("k,kij->ij", u, np.stack(family.C_list))
    raise InvalidArgument(f"unknown sensing family {family!r}")


def sensing_D(family: SensingFamily, Sigma, u, R_o) -> np.ndarray:
    """Innovation diffusion ``Sigma C(u)^T R_o^{-1} C(u) Sigma`` (symmetrized)."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    R_o = np.atleast_2d(np.asarray(R_o, dtype=float))
    if not is_spd(R_o):
        raise InvalidArgument("R_o must be symmetric positive definite")
    C = sensing_matrix(family, u)
    if C.shape[1] != Sigma.shape[0] or C.shape[0] != R_o.shape[0]:
        raise InvalidArgument(f"dimension mismatch: C {C.shape}, Sigma {Sigma.shape}, R_o {R_o.shape}")
    return _innovation_D(C, Sigma, R_o)


def _innovation_D(C, Sigma, R_o):
    SC = Sigma @ C.T
    return symmetrize(SC @ np.linalg.solve(R_o, SC.T))


# ---------------------------------------------------------------- costs


@dataclass(frozen=True)
class QuadraticCost:
    """x -> 1/2 x^T S x + s^T x + c."""

    S: np.ndarray
    s: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        S = _as_matrix(self.S, "S")
        if S.shape[0] != S.shape[1] or not is_symmetric(S):
            raise InvalidArgument("cost matrix S must be square and symmetric")
        s = _as_vector(self.s, "s", S.shape[0])
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "c", float(self.c))

    @classmethod
    def zero(cls, n: int) -> "QuadraticCost":
        return cls(np.zeros((n, n)), np.zeros(n), 0.0)

    @property
    def n(self) -> int:
        return self.S.shape[0]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.S, x) + x @ self.s + self.c

    def gradient(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.S + self.s

    def lower_bound(self) -> float:
        """Infimum over x; ``-inf`` when the quadratic is unbounded below."""
        w, V = np.linalg.eigh(self.S)
        tol = 1e-12 * max(1.0, float(np.max(np.abs(w))))
        if np.any(w < -tol):
            return -np.inf
        proj = V.T @ self.s
        null = np.abs(w) <= tol
        if np.any(np.abs(proj[null]) > 1e-12 * max(1.0, float(np.linalg.norm(self.s)))):
            return -np.inf
        rng = ~null
        return float(self.c - 0.5 * np.sum(proj[rng] ** 2 / w[rng]))


def gaussian_expect(cost: QuadraticCost, mu, Sigma) -> Union[float, np.ndarray]:
    """Exact E[cost(x)] for x ~ N(mu, Sigma).

    ``mu`` may carry leading batch dimensions ``(..., n)``; the result then has
    shape ``(...)``.
    """
    mu = np.asarray(mu, dtype=float)
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    n = cost.n
    if mu.shape[-1:] != (n,) and not (mu.ndim == 0 and n == 1):
        raise InvalidArgument(f"mu must have trailing dimension {n}, got shape {mu.shape}")
    if Sigma.shape != (n, n):
        raise InvalidArgument(f"Sigma must be {n}x{n}, got {Sigma.shape}")
    if mu.ndim == 0:
        mu = mu.reshape(1)
    out = cost(mu) + 0.5 * float(np.sum(cost.S * Sigma))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SensingCost:
    """rho(u) = 1/2 u^T R_s u with R_s PSD."""

    R_s: np.ndarray

    def __post_init__(self):
        R_s = _as_matrix(self.R_s, "R_s")
        if R_s.shape[0] != R_s.shape[1] or not is_symmetric(R_s):
            raise InvalidArgument("R_s must be square and symmetric")
        if np.min(np.linalg.eigvalsh(R_s)) < -1e-12 * max(1.0, float(np.abs(R_s).max())):
            raise InvalidArgument("R_s must be positive semidefinite")
        object.__setattr__(self, "R_s", R_s)

    @classmethod
    def zero(cls, ell_s: int) -> "SensingCost":
        return cls(np.zeros((ell_s, ell_s)))

    def __call__(self, u) -> float:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return float(0.5 * u @ self.R_s @ u)


# ---------------------------------------------------------------- model


@dataclass(frozen=True)
class ModelSpec:
    """Immutable description of the partially observed control problem.

    Parameters
    ----------
    A : array, shape (n, n) or (K, n, n)
        Drift matrix, either constant or one matrix per grid interval.
    B : array, shape (n, ell_a)
    H : array, shape (n, m)
    sigma_o : array, shape (p, p)
    R_a : array, shape (ell_a, ell_a)
    lam : float
        Temperature lambda linking the value function and the desirability.
    sensing : Scalar | Scaled | Affine
    q, phi : QuadraticCost
        Running and terminal state costs (on the physical state).
    rho : SensingCost, optional
        Defaults to zero.
    T, dt : float
        Horizon and grid step; ``T / dt`` must be an integer.
    Q : array, optional
        If given, checked against ``H H^T``.
    extra_cost : callable, optional
        Hook ``(t, mu, Sigma) -> array`` added to the running belief cost.
        Not used by the closed-form oracles.
    """

    A: np.ndarray
    B: np.ndarray
    H: np.ndarray
    sigma_o: np.ndarray
    R_a: np.ndarray
    lam: float
    sensing: SensingFamily
    q: QuadraticCost
    phi: QuadraticCost
    T: float
    dt: float
    rho: Optional[SensingCost] = None
    Q: Optional[np.ndarray] = None
    extra_cost: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        B = _as_matrix(self.B, "B")
        n, ell_a = B.shape
        A = np.asarray(self.A, dtype=float)
        if A.ndim == 3:
            if A.shape[1:] != (n, n):
                raise InvalidArgument(f"A must be a stack of {n}x{n} matrices, got {A.shape}")
            A = A.copy()
            A.setflags(write=False)
        else:
            A = _as_matrix(A, "A", (n, n))
        H = _as_matrix(self.H, "H")
        if H.shape[0] != n:
            raise InvalidArgument(f"H must have {n} rows, got {H.shape}")
        sigma_o = _as_matrix(self.sigma_o, "sigma_o")
        p = sigma_o.shape[0]
        if sigma_o.shape != (p, p):
            raise InvalidArgument("sigma_o must be square")
        R_a = _as_matrix(self.R_a, "R_a", (ell_a, ell_a))
        if not is_spd(R_a):
            raise InvalidArgument("R_a must be symmetric positive definite")
        R_o = sigma_o @ sigma_o.T
        if not is_spd(R_o):
            raise InvalidArgument("R_o = sigma_o sigma_o^T must be positive definite")
        lam = float(self.lam)
        if not lam > 0:
            raise InvalidArgument("lambda must be positive")
        T, dt = float(self.T), float(self.dt)
        if not (T > 0 and dt > 0):
            raise InvalidArgument("T and dt must be positive")
        K = round(T / dt)
        if K < 1 or abs(K * dt - T) > 1e-9 * T:
            raise InvalidArgument(f"T/dt must be integral, got {T}/{dt}")
        if A.ndim == 3 and A.shape[0] != K:
            raise InvalidArgument(f"time-varying A needs {K} matrices, got {A.shape[0]}")
        self.sensing.check_dims(n, p)
        for name in ("q", "phi"):
            if getattr(self, name).n != n:
                raise InvalidArgument(f"{name} must act on R^{n}")
        rho = self.rho if self.rho is not None else SensingCost.zero(self.sensing.ell_s)
        if rho.R_s.shape != (self.sensing.ell_s,) * 2:
            raise InvalidArgument("R_s must be ell_s x ell_s")
        Qd = H @ H.T
        if self.Q is not None:
            Q = _as_matrix(self.Q, "Q", (n, n))
            if np.linalg.norm(Q - Qd) > 1e-12 * max(1.0, float(np.linalg.norm(Qd))):
                raise InvalidArgument("Q must equal H H^T")
        Qd.setflags(write=False)
        R_o.setflags(write=False)
        for k, v in dict(A=A, B=B, H=H, sigma_o=sigma_o, R_a=R_a, lam=lam, T=T, dt=dt, rho=rho, Q=Qd).items():
            object.__setattr__(self, k, v)
        object.__setattr__(self, "R_o", R_o)

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[1]

    @property
    def p(self) -> int:
        return self.sigma_o.shape[0]

    @property
    def ell_a(self) -> int:
        return self.B.shape[1]

    @property
    def ell_s(self) -> int:
        return self.sensing.ell_s

    @property
    def K(self) -> int:
        return round(self.T / self.dt)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.K + 1) * self.dt

    def grid_index(self, t: float) -> int:
        """Index of the grid node at time ``t``; raises if ``t`` is off-grid."""
        k = round(float(t) / self.dt)
        if abs(k * self.dt - t) > 1e-9 * max(1.0, self.T) or not 0 <= k <= self.K:
            raise InvalidArgument(f"t={t} is not a node of the time grid (dt={self.dt}, T={self.T})")
        return k

    def A_at(self, k: int) -> np.ndarray:
        """Drift matrix on grid interval ``[t_k, t_{k+1})``."""
        if self.A.ndim == 2:
            return self.A
        return self.A[min(k, self.K - 1)]

    @property
    def time_invariant(self) -> bool:
        return self.A.ndim == 2

    def replace(self, **changes) -> "ModelSpec":
        kwargs = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kwargs.update(changes)
        kwargs["Q"] = None
        return ModelSpec(**kwargs)


def scalar_model(lam=1.0, R_a=1.0, R_o=1.0, T=1.0, dt=0.01, q=(0.0, 0.0, 0.0), phi=(0.0, 0.0, 0.0), R_s=0.0, A=0.0, B=1.0, H=1.0) -> ModelSpec:
    """The one-dimensional controlled-sensing example: dx = u_a dt + dw, dy = u_s x dt + sigma_o dnu.

    ``q`` and ``phi`` are ``(S, s, c)`` triples.
    """
    return ModelSpec(
        A=[[A]], B=[[B]], H=[[H]], sigma_o=[[np.sqrt(R_o)]], R_a=[[R_a]], lam=lam,
        sensing=Scalar(), q=QuadraticCost(*q), phi=QuadraticCost(*phi),
        rho=SensingCost([[R_s]]), T=T, dt=dt,
    )
